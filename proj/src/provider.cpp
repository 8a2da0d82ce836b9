#include "zcbm/provider.hpp"

#include <httplib.h>

#include <cmath>
#include <json.hpp>
#include <optional>
#include <thread>

#include "zcbm/error.hpp"

namespace zcbm {

namespace {

struct SplitUrl {
  std::string base;  // scheme://host[:port]
  std::string path;
};

SplitUrl split_url(const std::string& url) {
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) {
    fail(ErrorCode::kInvalidArgument, "provider endpoint is not a URL: " + url);
  }
  const auto path_start = url.find('/', scheme_end + 3);
  if (path_start == std::string::npos) return {url, "/"};
  return {url.substr(0, path_start), url.substr(path_start)};
}

enum class Attempt { kOk, kTransient, kTimeout };

EmbeddingMatrix parse_batch(const std::string& body, std::size_t expected_rows) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(body);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kProviderBadResponse, std::string("malformed JSON: ") + e.what());
  }
  if (!doc.is_object() || !doc.contains("embeddings") || !doc["embeddings"].is_array()) {
    fail(ErrorCode::kProviderBadResponse, "response lacks an 'embeddings' array");
  }
  const auto& rows = doc["embeddings"];
  if (rows.size() != expected_rows) {
    fail(ErrorCode::kProviderBadResponse, "provider returned " + std::to_string(rows.size()) +
                                              " rows for " + std::to_string(expected_rows) +
                                              " texts");
  }
  std::size_t dim = 0;
  std::vector<float> data;
  for (const auto& row : rows) {
    if (!row.is_array() || row.empty()) {
      fail(ErrorCode::kProviderBadResponse, "embedding row is not a non-empty array");
    }
    if (dim == 0) dim = row.size();
    if (row.size() != dim) {
      fail(ErrorCode::kProviderBadResponse, "ragged embedding rows");
    }
    for (const auto& v : row) {
      if (!v.is_number()) fail(ErrorCode::kProviderBadResponse, "non-numeric component");
      data.push_back(v.get<float>());
    }
  }
  return normalize_rows(EmbeddingMatrix(dim, rows.size(), std::move(data), false));
}

}  // namespace

void ProviderConfig::validate() const {
  if (batch_size < 1) fail(ErrorCode::kInvalidArgument, "batch_size must be >= 1");
  if (max_retries < 0) fail(ErrorCode::kInvalidArgument, "max_retries must be >= 0");
  const auto first = prompt_template.find(kPromptPlaceholder);
  if (first == std::string::npos ||
      prompt_template.find(kPromptPlaceholder, first + 1) != std::string::npos) {
    fail(ErrorCode::kInvalidArgument,
         "prompt_template must contain [TEXT] exactly once: " + prompt_template);
  }
}

std::string ProviderConfig::apply_template(const std::string& text) const {
  std::string out = prompt_template;
  out.replace(out.find(kPromptPlaceholder), kPromptPlaceholder.size(), text);
  return out;
}

EmbeddingMatrix fetch_embeddings(const ProviderConfig& cfg,
                                 const std::vector<std::string>& texts) {
  cfg.validate();
  if (texts.empty()) fail(ErrorCode::kInvalidArgument, "fetch_embeddings: empty text list");

  const auto url = split_url(cfg.endpoint);
  httplib::Client client(url.base);
  const auto secs = static_cast<time_t>(cfg.timeout_seconds);
  const auto usecs = static_cast<time_t>((cfg.timeout_seconds - secs) * 1e6);
  client.set_connection_timeout(secs, usecs);
  client.set_read_timeout(secs, usecs);
  client.set_write_timeout(secs, usecs);

  EmbeddingMatrix out;
  const auto batch = static_cast<std::size_t>(cfg.batch_size);
  for (std::size_t start = 0; start < texts.size(); start += batch) {
    const std::size_t end = std::min(texts.size(), start + batch);
    nlohmann::json request;
    request["texts"] = nlohmann::json::array();
    for (std::size_t i = start; i < end; ++i) {
      request["texts"].push_back(cfg.apply_template(texts[i]));
    }
    const std::string body = request.dump();

    auto backoff = cfg.initial_backoff;
    Attempt last = Attempt::kTransient;
    std::string last_detail;
    std::optional<EmbeddingMatrix> rows;
    for (int attempt = 0; attempt <= cfg.max_retries; ++attempt) {
      if (attempt > 0) {
        std::this_thread::sleep_for(backoff);
        backoff *= 2;
      }
      auto res = client.Post(url.path, body, "application/json");
      if (!res) {
        const auto err = res.error();
        last = (err == httplib::Error::Read || err == httplib::Error::ConnectionTimeout)
                   ? Attempt::kTimeout
                   : Attempt::kTransient;
        last_detail = httplib::to_string(err);
        continue;
      }
      if (res->status >= 500 || res->status == 429) {
        last = Attempt::kTransient;
        last_detail = "HTTP " + std::to_string(res->status);
        continue;
      }
      if (res->status != 200) {
        fail(ErrorCode::kProviderBadResponse, "provider answered HTTP " +
                                                  std::to_string(res->status));
      }
      rows = parse_batch(res->body, end - start);
      last = Attempt::kOk;
      break;
    }
    if (last == Attempt::kTimeout) {
      fail(ErrorCode::kTimeout, "provider timed out at " + cfg.endpoint + " (" +
                                    last_detail + ")");
    }
    if (last != Attempt::kOk) {
      fail(ErrorCode::kProviderUnreachable, "provider unreachable at " + cfg.endpoint +
                                                " (" + last_detail + ")");
    }
    if (out.dim() == 0) {
      out = EmbeddingMatrix(rows->dim(), true);
      out.reserve(texts.size());
    } else if (rows->dim() != out.dim()) {
      fail(ErrorCode::kProviderBadResponse, "embedding dimension changed between batches");
    }
    for (std::size_t i = 0; i < rows->count(); ++i) out.append(rows->row(i));
  }
  return out;
}

EmbedFn make_provider_embedder(ProviderConfig cfg) {
  return [cfg = std::move(cfg)](const std::vector<std::string>& texts) {
    return fetch_embeddings(cfg, texts);
  };
}

}  // namespace zcbm
