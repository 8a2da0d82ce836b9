#pragma once

#include <chrono>
#include <filesystem>
#include <map>
#include <optional>
#include <string>

#include <json.hpp>

#include "zcbm/bank.hpp"
#include "zcbm/pipeline.hpp"
#include "zcbm/session.hpp"

namespace httplib {
class Server;
}

namespace zcbm {

struct ServiceConfig {
  std::size_t default_k = kDefaultTopK;
  SolverConfig solver;
  std::chrono::seconds session_ttl = std::chrono::minutes(30);
  std::string cors_origin;  // empty: no CORS headers
  std::optional<std::filesystem::path> snapshot_file;
  std::optional<std::filesystem::path> ui_dir;  // served under /ui
};

/// A JSON response. Errors carry {"error": {"code", "message", "detail"?}}
/// with code one of bad_request, not_found, dimension_mismatch,
/// provider_error, expired, internal.
struct ApiResponse {
  int status = 200;
  nlohmann::json body;
};

/// HTTP facade over inference and intervention sessions. Route handlers are
/// callable directly; mount() binds them to an httplib server.
class Service {
 public:
  Service(const ConceptBank& bank, const ClassSet& classes, EmbedFn embed, ServiceConfig config,
          const IvfIndex* index = nullptr);

  ApiResponse infer(const std::string& body) const;
  ApiResponse create_session(const std::string& body);
  ApiResponse get_session(const std::string& id);
  ApiResponse edit_session(const std::string& id, const std::string& body);
  ApiResponse recompute_session(const std::string& id);
  ApiResponse search_bank(const std::map<std::string, std::string>& query) const;
  ApiResponse healthz() const;

  void mount(httplib::Server& server);

  /// Persists sessions to config.snapshot_file, if set.
  void save_snapshot() const;

  SessionStore& sessions() { return sessions_; }

 private:
  const ConceptBank& bank_;
  const ClassSet& classes_;
  EmbedFn embed_;
  ServiceConfig config_;
  const IvfIndex* index_;
  SessionStore sessions_;
};

/// Serializes a response body; every float is already rounded to 9
/// significant digits.
std::string dump_body(const nlohmann::json& body);

/// OpenAPI 3 description of the endpoints above.
nlohmann::json openapi_document();

}  // namespace zcbm
