#pragma once

#include <chrono>
#include <functional>
#include <string>
#include <vector>

#include "zcbm/vecstore.hpp"

namespace zcbm {

inline constexpr std::string_view kPromptPlaceholder = "[TEXT]";

/// Client-side settings for an external text-embedding server.
///
/// Wire contract: POST {"texts": [...]} to `endpoint`, expect
/// {"embeddings": [[...], ...]} with one row per text in request order.
struct ProviderConfig {
  std::string endpoint = "http://127.0.0.1:8088/embed";
  int batch_size = 64;
  double timeout_seconds = 30.0;
  std::string prompt_template = "[TEXT]";
  int max_retries = 3;
  std::chrono::milliseconds initial_backoff{200};

  /// Throws InvalidArgument if batch_size < 1 or the template does not hold
  /// the placeholder exactly once.
  void validate() const;
  std::string apply_template(const std::string& text) const;
};

/// Any source of text embeddings: one row per input text, in input order.
using EmbedFn = std::function<EmbeddingMatrix(const std::vector<std::string>&)>;

/// Fetches normalized embeddings in batches of cfg.batch_size. Transient
/// failures (connection errors, 5xx, 429) are retried up to cfg.max_retries
/// times with exponential backoff.
EmbeddingMatrix fetch_embeddings(const ProviderConfig& cfg,
                                 const std::vector<std::string>& texts);

EmbedFn make_provider_embedder(ProviderConfig cfg);

}  // namespace zcbm
