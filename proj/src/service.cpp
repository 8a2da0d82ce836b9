#include "zcbm/service.hpp"

#include <httplib.h>

#include <cmath>
#include <limits>

#include "zcbm/error.hpp"
#include "zcbm/serialize.hpp"

namespace zcbm {

namespace {

using nlohmann::json;

ApiResponse error_response(int status, std::string_view code, const std::string& message,
                           json detail = nullptr) {
  json err = {{"code", code}, {"message", message.empty() ? std::string(code) : message}};
  if (!detail.is_null()) err["detail"] = std::move(detail);
  return {status, {{"error", std::move(err)}}};
}

ApiResponse from_error(const Error& e) {
  switch (e.code()) {
    case ErrorCode::kDimensionMismatch:
      return error_response(400, "dimension_mismatch", e.what());
    case ErrorCode::kNonFinite:
      return error_response(422, "bad_request", e.what());
    case ErrorCode::kUnknownSession:
      return error_response(404, "not_found", e.what());
    case ErrorCode::kExpiredSession:
      return error_response(410, "expired", e.what());
    case ErrorCode::kProviderUnreachable:
    case ErrorCode::kProviderBadResponse:
    case ErrorCode::kTimeout:
      return error_response(502, "provider_error", e.what(),
                            {{"kind", std::string(to_string(e.code()))}});
    default:
      return error_response(400, "bad_request", e.what(),
                            {{"kind", std::string(to_string(e.code()))}});
  }
}

template <typename Fn>
ApiResponse guarded(Fn&& fn) {
  try {
    return fn();
  } catch (const Error& e) {
    return from_error(e);
  } catch (const json::exception& e) {
    return error_response(400, "bad_request", std::string("malformed request: ") + e.what());
  } catch (const std::exception& e) {
    return error_response(500, "internal", e.what());
  }
}

json parse_body(const std::string& body) {
  if (body.empty()) return json::object();
  json doc = json::parse(body);
  if (!doc.is_object()) fail(ErrorCode::kInvalidArgument, "request body must be a JSON object");
  return doc;
}

struct InferRequest {
  EmbeddingVector embedding;
  std::size_t k = kDefaultTopK;
  SolverConfig solver;
};

InferRequest parse_infer(const json& doc, std::size_t bank_dim, const ServiceConfig& config) {
  if (!doc.contains("embedding") || !doc["embedding"].is_array()) {
    fail(ErrorCode::kInvalidArgument, "body needs an 'embedding' array");
  }
  std::vector<float> values;
  for (const auto& v : doc["embedding"]) {
    // null is how JavaScript serializes NaN and Infinity.
    if (v.is_null()) {
      fail(ErrorCode::kNonFinite, "embedding contains a non-finite value");
    }
    if (!v.is_number()) fail(ErrorCode::kInvalidArgument, "embedding values must be numbers");
    const double d = v.get<double>();
    if (!std::isfinite(d) || std::abs(d) > std::numeric_limits<float>::max()) {
      fail(ErrorCode::kNonFinite, "embedding contains a non-finite value");
    }
    values.push_back(static_cast<float>(d));
  }
  if (values.size() != bank_dim) {
    fail(ErrorCode::kDimensionMismatch, "embedding has " + std::to_string(values.size()) +
                                            " values, bank dimension is " +
                                            std::to_string(bank_dim));
  }
  InferRequest req;
  req.embedding = normalize(values);
  req.k = doc.value("k", config.default_k);
  if (req.k < 1) fail(ErrorCode::kInvalidArgument, "k must be >= 1");
  req.solver = config.solver;
  if (doc.contains("solver")) req.solver.kind = parse_solver_kind(doc["solver"].get<std::string>());
  if (doc.contains("lambda")) req.solver.lambda = doc["lambda"].get<double>();
  if (doc.contains("l2_weight")) req.solver.l2_weight = doc["l2_weight"].get<double>();
  if (doc.contains("s")) req.solver.s = doc["s"].get<std::size_t>();
  if (req.solver.kind == SolverKind::kLasso && !(req.solver.lambda > 0.0)) {
    fail(ErrorCode::kInvalidArgument, "lambda must be > 0 for lasso");
  }
  if (req.solver.kind == SolverKind::kHtp && req.solver.s < 1) {
    fail(ErrorCode::kInvalidArgument, "s must be >= 1 for htp");
  }
  return req;
}

void reply(httplib::Response& res, const ApiResponse& api) {
  res.status = api.status;
  res.set_content(dump_body(api.body), "application/json");
}

}  // namespace

std::string dump_body(const json& body) { return body.dump(); }

Service::Service(const ConceptBank& bank, const ClassSet& classes, EmbedFn embed,
                 ServiceConfig config, const IvfIndex* index)
    : bank_(bank),
      classes_(classes),
      embed_(std::move(embed)),
      config_(std::move(config)),
      index_(index),
      sessions_(config_.session_ttl) {
  if (classes_.embeddings.dim() != bank_.dim()) {
    fail(ErrorCode::kDimensionMismatch, "class and bank dimensions differ");
  }
  if (config_.snapshot_file && std::filesystem::exists(*config_.snapshot_file)) {
    sessions_.load_snapshot(*config_.snapshot_file);
  }
}

ApiResponse Service::infer(const std::string& body) const {
  return guarded([&] {
    const auto req = parse_infer(parse_body(body), bank_.dim(), config_);
    const Prediction p = zcbm::infer(req.embedding, bank_, classes_, req.k, req.solver, index_);
    return ApiResponse{200, prediction_to_json(p, classes_)};
  });
}

ApiResponse Service::create_session(const std::string& body) {
  return guarded([&] {
    const auto req = parse_infer(parse_body(body), bank_.dim(), config_);
    Prediction p = zcbm::infer(req.embedding, bank_, classes_, req.k, req.solver, index_);
    sessions_.sweep();
    const auto session = sessions_.create(std::move(p), req.solver);
    return ApiResponse{201, session_to_json(session, classes_)};
  });
}

ApiResponse Service::get_session(const std::string& id) {
  return guarded([&] { return ApiResponse{200, session_to_json(sessions_.get(id), classes_)}; });
}

ApiResponse Service::edit_session(const std::string& id, const std::string& body) {
  return guarded([&] {
    const json doc = parse_body(body);
    EditRequest req;
    req.op = parse_edit_op(doc.at("op").get<std::string>());
    if (doc.contains("concept") && !doc["concept"].is_null()) {
      req.concept_text = doc["concept"].get<std::string>();
    }
    if (doc.contains("index") && !doc["index"].is_null()) {
      req.index = doc["index"].get<std::size_t>();
    }
    return ApiResponse{200, session_to_json(sessions_.edit(id, req, embed_), classes_)};
  });
}

ApiResponse Service::recompute_session(const std::string& id) {
  return guarded(
      [&] { return ApiResponse{200, session_to_json(sessions_.recompute(id, classes_), classes_)}; });
}

ApiResponse Service::search_bank(const std::map<std::string, std::string>& query) const {
  return guarded([&] {
    const auto q = query.find("q");
    if (q == query.end() || fold_concept(q->second).empty()) {
      fail(ErrorCode::kInvalidArgument, "query parameter 'q' is required");
    }
    std::size_t n = 10;
    if (auto it = query.find("n"); it != query.end()) {
      try {
        n = std::stoul(it->second);
      } catch (const std::exception&) {
        fail(ErrorCode::kInvalidArgument, "n must be a positive integer");
      }
    }
    if (n < 1) fail(ErrorCode::kInvalidArgument, "n must be >= 1");
    const EmbeddingMatrix e = embed_({q->second});
    if (e.count() != 1) fail(ErrorCode::kProviderBadResponse, "expected one query embedding");
    if (e.dim() != bank_.dim()) {
      fail(ErrorCode::kDimensionMismatch, "query embedding dimension differs from the bank");
    }
    const RetrievalSet hits = topk_exact(normalize(e.row(0)).values, bank_.embeddings, n);
    json results = json::array();
    for (std::size_t i = 0; i < hits.size(); ++i) {
      results.push_back({{"index", hits.indices[i]},
                         {"text", bank_.vocab[hits.indices[i]]},
                         {"score", round9(hits.scores[i])}});
    }
    return ApiResponse{200, {{"query", q->second}, {"results", std::move(results)}}};
  });
}

ApiResponse Service::healthz() const {
  return {200, {{"status", "ok"}, {"bank_count", bank_.size()}, {"dim", bank_.dim()}}};
}

void Service::save_snapshot() const {
  if (config_.snapshot_file) sessions_.save_snapshot(*config_.snapshot_file);
}

void Service::mount(httplib::Server& server) {
  if (!config_.cors_origin.empty()) {
    server.set_post_routing_handler([origin = config_.cors_origin](const httplib::Request&,
                                                                   httplib::Response& res) {
      res.set_header("Access-Control-Allow-Origin", origin);
      res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
      res.set_header("Access-Control-Allow-Headers", "Content-Type");
    });
    server.Options(R"(/v1/.*)", [](const httplib::Request&, httplib::Response& res) {
      res.status = 204;
    });
  }
  server.Post("/v1/infer", [this](const httplib::Request& req, httplib::Response& res) {
    reply(res, infer(req.body));
  });
  server.Post("/v1/sessions", [this](const httplib::Request& req, httplib::Response& res) {
    reply(res, create_session(req.body));
  });
  server.Get(R"(/v1/sessions/([^/]+))", [this](const httplib::Request& req,
                                               httplib::Response& res) {
    reply(res, get_session(req.matches[1]));
  });
  server.Post(R"(/v1/sessions/([^/]+)/edits)", [this](const httplib::Request& req,
                                                      httplib::Response& res) {
    reply(res, edit_session(req.matches[1], req.body));
  });
  server.Post(R"(/v1/sessions/([^/]+)/recompute)", [this](const httplib::Request& req,
                                                          httplib::Response& res) {
    reply(res, recompute_session(req.matches[1]));
  });
  server.Get("/v1/bank/search", [this](const httplib::Request& req, httplib::Response& res) {
    std::map<std::string, std::string> query;
    for (const auto& [k, v] : req.params) query.emplace(k, v);
    reply(res, search_bank(query));
  });
  server.Get("/v1/healthz", [this](const httplib::Request&, httplib::Response& res) {
    reply(res, healthz());
  });
  if (config_.ui_dir) server.set_mount_point("/ui", config_.ui_dir->string());
}

json openapi_document() {
  const json error_ref = {{"$ref", "#/components/schemas/ApiError"}};
  const json prediction_ref = {{"$ref", "#/components/schemas/Prediction"}};
  const json session_ref = {{"$ref", "#/components/schemas/Session"}};
  auto body = [](json schema) {
    return json{{"required", true},
                {"content", {{"application/json", {{"schema", std::move(schema)}}}}}};
  };
  auto resp = [](const std::string& description, json schema) {
    return json{{"description", description},
                {"content", {{"application/json", {{"schema", std::move(schema)}}}}}};
  };
  const json id_param = {{"name", "id"}, {"in", "path"}, {"required", true},
                         {"schema", {{"type", "string"}}}};
  const json infer_body = {
      {"type", "object"},
      {"required", {"embedding"}},
      {"properties",
       {{"embedding", {{"type", "array"}, {"items", {{"type", "number"}}}}},
        {"k", {{"type", "integer"}, {"minimum", 1}}},
        {"solver", {{"type", "string"},
                    {"enum", {"lasso", "elastic_net", "htp", "least_squares", "similarity"}}}},
        {"lambda", {{"type", "number"}}},
        {"l2_weight", {{"type", "number"}}},
        {"s", {{"type", "integer"}, {"minimum", 1}}}}}};

  json doc;
  doc["openapi"] = "3.0.3";
  doc["info"] = {{"title", "zcbm inference service"}, {"version", "1.0.0"}};
  doc["paths"]["/v1/infer"]["post"] = {
      {"summary", "Infer label and concepts for one image embedding"},
      {"requestBody", body(infer_body)},
      {"responses", {{"200", resp("Prediction", prediction_ref)},
                     {"400", resp("Bad request or dimension mismatch", error_ref)},
                     {"422", resp("Non-finite embedding values", error_ref)}}}};
  doc["paths"]["/v1/sessions"]["post"] = {
      {"summary", "Create an intervention session"},
      {"requestBody", body(infer_body)},
      {"responses", {{"201", resp("Session", session_ref)},
                     {"400", resp("Bad request or dimension mismatch", error_ref)}}}};
  doc["paths"]["/v1/sessions/{id}"]["get"] = {
      {"summary", "Current session state including history"},
      {"parameters", {id_param}},
      {"responses", {{"200", resp("Session", session_ref)},
                     {"404", resp("Unknown session", error_ref)},
                     {"410", resp("Expired session", error_ref)}}}};
  doc["paths"]["/v1/sessions/{id}/edits"]["post"] = {
      {"summary", "Delete, restore or insert a concept"},
      {"parameters", {id_param}},
      {"requestBody",
       body({{"type", "object"},
             {"required", {"op"}},
             {"properties", {{"op", {{"type", "string"}, {"enum", {"delete", "restore", "insert"}}}},
                             {"concept", {{"type", "string"}}},
                             {"index", {{"type", "integer"}, {"minimum", 0}}}}}})},
      {"responses", {{"200", resp("Session", session_ref)},
                     {"400", resp("Bad edit", error_ref)},
                     {"404", resp("Unknown session", error_ref)},
                     {"410", resp("Expired session", error_ref)},
                     {"502", resp("Embedding provider failure", error_ref)}}}};
  doc["paths"]["/v1/sessions/{id}/recompute"]["post"] = {
      {"summary", "Apply pending edits and recompute the prediction"},
      {"parameters", {id_param}},
      {"responses", {{"200", resp("Session", session_ref)},
                     {"404", resp("Unknown session", error_ref)},
                     {"410", resp("Expired session", error_ref)}}}};
  doc["paths"]["/v1/bank/search"]["get"] = {
      {"summary", "Nearest bank concepts to a query text"},
      {"parameters",
       {{{"name", "q"}, {"in", "query"}, {"required", true}, {"schema", {{"type", "string"}}}},
        {{"name", "n"}, {"in", "query"}, {"required", false},
         {"schema", {{"type", "integer"}, {"minimum", 1}, {"default", 10}}}}}},
      {"responses",
       {{"200", resp("Search results",
                     {{"type", "object"},
                      {"properties",
                       {{"query", {{"type", "string"}}},
                        {"results", {{"type", "array"},
                                     {"items", {{"type", "object"},
                                                {"properties",
                                                 {{"index", {{"type", "integer"}}},
                                                  {"text", {{"type", "string"}}},
                                                  {"score", {{"type", "number"}}}}}}}}}}}})},
        {"400", resp("Bad request", error_ref)},
        {"502", resp("Embedding provider failure", error_ref)}}}};
  doc["paths"]["/v1/healthz"]["get"] = {
      {"summary", "Liveness and bank shape"},
      {"responses",
       {{"200", resp("Health",
                     {{"type", "object"},
                      {"properties", {{"status", {{"type", "string"}}},
                                      {"bank_count", {{"type", "integer"}}},
                                      {"dim", {{"type", "integer"}}}}}})}}}};

  const json concept_item = {
      {"type", "object"},
      {"properties", {{"text", {{"type", "string"}}},
                      {"weight", {{"type", "number"}}},
                      {"source", {{"type", "string"}, {"enum", {"retrieved", "inserted"}}}},
                      {"bank_index", {{"type", "integer"}, {"nullable", true}}}}}};
  doc["components"]["schemas"]["ApiError"] = {
      {"type", "object"},
      {"properties",
       {{"error",
         {{"type", "object"},
          {"required", {"code", "message"}},
          {"properties",
           {{"code", {{"type", "string"},
                      {"enum", {"bad_request", "not_found", "dimension_mismatch",
                                "provider_error", "expired", "internal"}}}},
            {"message", {{"type", "string"}}},
            {"detail", {{"type", "object"}}}}}}}}}};
  doc["components"]["schemas"]["Prediction"] = {
      {"type", "object"},
      {"properties",
       {{"label_id", {{"type", "integer"}}},
        {"class_scores", {{"type", "array"},
                          {"items", {{"type", "object"},
                                     {"properties", {{"label_id", {{"type", "integer"}}},
                                                     {"name", {{"type", "string"}}},
                                                     {"score", {{"type", "number"}}}}}}}}},
        {"concepts", {{"type", "array"}, {"items", concept_item}}},
        {"reconstructed", {{"type", "array"}, {"items", {{"type", "number"}}}}},
        {"weights", {{"type", "object"}}},
        {"retrieval", {{"type", "object"}}},
        {"fallback", {{"type", "boolean"}}}}}};
  doc["components"]["schemas"]["Session"] = {
      {"type", "object"},
      {"properties",
       {{"session_id", {{"type", "string"}}},
        {"solver", {{"type", "string"}}},
        {"concepts", {{"type", "array"},
                      {"items", {{"type", "object"},
                                 {"properties", {{"index", {{"type", "integer"}}},
                                                 {"text", {{"type", "string"}}},
                                                 {"source", {{"type", "string"}}},
                                                 {"deleted", {{"type", "boolean"}}},
                                                 {"weight", {{"type", "number"}}}}}}}}},
        {"history", {{"type", "array"}, {"items", {{"type", "object"}}}}},
        {"pending_edits", {{"type", "boolean"}}},
        {"base", prediction_ref},
        {"prediction", prediction_ref}}}};
  return doc;
}

}  // namespace zcbm
