#include "zcbm/serialize.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>

#include "zcbm/error.hpp"

namespace zcbm {

namespace {

using nlohmann::json;

json rounded(const std::vector<double>& v) {
  json out = json::array();
  for (double x : v) out.push_back(round9(x));
  return out;
}

json rounded(const std::vector<float>& v) {
  json out = json::array();
  for (float x : v) out.push_back(round9(x));
  return out;
}

std::string_view source_name(ConceptSource s) {
  return s == ConceptSource::kInserted ? "inserted" : "retrieved";
}

ConceptSource parse_source(std::string_view s) {
  return s == "inserted" ? ConceptSource::kInserted : ConceptSource::kRetrieved;
}

json weights_summary(const ConceptWeights& w) {
  json out = {{"solver", std::string(to_string(w.solver))},
              {"nonzero_count", w.nonzero_count},
              {"candidates", w.w.size()},
              {"iterations", w.iterations},
              {"converged", w.converged}};
  if (w.solver == SolverKind::kLasso || w.solver == SolverKind::kElasticNet) {
    out["lambda"] = w.lambda;
  }
  if (w.solver == SolverKind::kElasticNet) out["l2_weight"] = w.l2_weight;
  if (w.solver == SolverKind::kHtp) out["s"] = w.s;
  return out;
}

json matrix_state(const EmbeddingMatrix& m) {
  return {{"dim", m.dim()}, {"count", m.count()}, {"normalized", m.normalized()},
          {"data", m.data()}};
}

EmbeddingMatrix matrix_from_state(const json& j) {
  return EmbeddingMatrix(j.at("dim").get<std::size_t>(), j.at("count").get<std::size_t>(),
                         j.at("data").get<std::vector<float>>(), j.at("normalized").get<bool>());
}

json solver_state(const SolverConfig& c) {
  return {{"kind", std::string(to_string(c.kind))}, {"lambda", c.lambda},
          {"l2_weight", c.l2_weight}, {"s", c.s}, {"step", c.step},
          {"max_iter", c.max_iter}, {"tol", c.tol}};
}

SolverConfig solver_from_state(const json& j) {
  SolverConfig c;
  c.kind = parse_solver_kind(j.at("kind").get<std::string>());
  c.lambda = j.at("lambda").get<double>();
  c.l2_weight = j.at("l2_weight").get<double>();
  c.s = j.at("s").get<std::size_t>();
  c.step = j.at("step").get<double>();
  c.max_iter = j.at("max_iter").get<int>();
  c.tol = j.at("tol").get<double>();
  return c;
}

json edit_record(const EditRecord& r) {
  json out = {{"seq", r.seq}, {"op", std::string(to_string(r.op))}, {"timestamp", r.timestamp}};
  out["concept"] = r.concept_text.empty() ? json(nullptr) : json(r.concept_text);
  out["index"] = r.index ? json(*r.index) : json(nullptr);
  return out;
}

EditRecord edit_from_json(const json& j) {
  EditRecord r;
  r.seq = j.at("seq").get<std::size_t>();
  r.op = parse_edit_op(j.at("op").get<std::string>());
  r.timestamp = j.at("timestamp").get<std::string>();
  if (!j.at("concept").is_null()) r.concept_text = j["concept"].get<std::string>();
  if (!j.at("index").is_null()) r.index = j["index"].get<std::size_t>();
  return r;
}

}  // namespace

double round9(double v) {
  if (!std::isfinite(v) || v == 0.0) return v;
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return std::strtod(buf, nullptr);
}

json prediction_to_json(const Prediction& p, const ClassSet& classes) {
  json scores = json::array();
  for (std::size_t c = 0; c < p.class_scores.size(); ++c) {
    scores.push_back({{"label_id", classes.labels[c].label_id},
                      {"name", classes.labels[c].name},
                      {"score", round9(p.class_scores[c])}});
  }
  json concepts = json::array();
  for (const auto& c : p.concepts) {
    json item = {{"text", c.text}, {"weight", round9(c.weight)},
                 {"source", std::string(source_name(p.candidates[c.position].source))}};
    item["bank_index"] = c.bank_index >= 0 ? json(c.bank_index) : json(nullptr);
    concepts.push_back(std::move(item));
  }
  return {{"label_id", p.label_id},
          {"class_scores", std::move(scores)},
          {"concepts", std::move(concepts)},
          {"reconstructed", rounded(p.reconstructed)},
          {"weights", weights_summary(p.weights)},
          {"retrieval", {{"k", p.retrieval.k},
                         {"indices", p.retrieval.indices},
                         {"scores", rounded(p.retrieval.scores)}}},
          {"fallback", p.fallback}};
}

json prediction_state_to_json(const Prediction& p) {
  json candidates = json::array();
  for (const auto& c : p.candidates) {
    candidates.push_back({{"text", c.text}, {"bank_index", c.bank_index},
                          {"source", std::string(source_name(c.source))}});
  }
  return {{"input", p.input.values},
          {"input_normalized", p.input.normalized},
          {"candidates", std::move(candidates)},
          {"candidate_embeddings", matrix_state(p.candidate_embeddings)},
          {"weights", {{"w", p.weights.w},
                       {"solver", std::string(to_string(p.weights.solver))},
                       {"lambda", p.weights.lambda},
                       {"l2_weight", p.weights.l2_weight},
                       {"s", p.weights.s},
                       {"iterations", p.weights.iterations},
                       {"converged", p.weights.converged}}},
          {"retrieval", {{"k", p.retrieval.k},
                         {"indices", p.retrieval.indices},
                         {"scores", p.retrieval.scores}}},
          {"label_id", p.label_id},
          {"class_scores", p.class_scores},
          {"reconstructed", p.reconstructed},
          {"fallback", p.fallback}};
}

Prediction prediction_state_from_json(const json& j) {
  Prediction p;
  p.input.values = j.at("input").get<std::vector<float>>();
  p.input.normalized = j.at("input_normalized").get<bool>();
  for (const auto& c : j.at("candidates")) {
    p.candidates.push_back({c.at("text").get<std::string>(),
                            c.at("bank_index").get<std::int64_t>(),
                            parse_source(c.at("source").get<std::string>())});
  }
  p.candidate_embeddings = matrix_from_state(j.at("candidate_embeddings"));
  const auto& w = j.at("weights");
  p.weights.w = w.at("w").get<std::vector<double>>();
  p.weights.solver = parse_solver_kind(w.at("solver").get<std::string>());
  p.weights.lambda = w.at("lambda").get<double>();
  p.weights.l2_weight = w.at("l2_weight").get<double>();
  p.weights.s = w.at("s").get<std::size_t>();
  p.weights.iterations = w.at("iterations").get<int>();
  p.weights.converged = w.at("converged").get<bool>();
  p.weights.recount();
  const auto& r = j.at("retrieval");
  p.retrieval.k = r.at("k").get<std::size_t>();
  p.retrieval.indices = r.at("indices").get<std::vector<std::size_t>>();
  p.retrieval.scores = r.at("scores").get<std::vector<float>>();
  p.label_id = j.at("label_id").get<int>();
  p.class_scores = j.at("class_scores").get<std::vector<double>>();
  p.reconstructed = j.at("reconstructed").get<std::vector<double>>();
  p.fallback = j.at("fallback").get<bool>();
  if (p.candidates.size() != p.weights.w.size() ||
      p.candidate_embeddings.count() != p.weights.w.size()) {
    fail(ErrorCode::kLengthMismatch, "inconsistent prediction state");
  }
  for (std::size_t j2 = 0; j2 < p.weights.w.size(); ++j2) {
    if (p.weights.w[j2] == 0.0) continue;
    p.concepts.push_back({p.candidates[j2].text, p.candidates[j2].bank_index, p.weights.w[j2], j2});
  }
  std::stable_sort(p.concepts.begin(), p.concepts.end(), [](const auto& a, const auto& b) {
    return std::abs(a.weight) > std::abs(b.weight);
  });
  return p;
}

json session_to_json(const InterventionSession& s, const ClassSet& classes) {
  json concepts = json::array();
  for (std::size_t i = 0; i < s.concepts.size(); ++i) {
    const auto& c = s.concepts[i];
    json item = {{"index", i}, {"text", c.text}, {"source", std::string(source_name(c.source))},
                 {"deleted", c.deleted}};
    // Weight under the current prediction, if the concept is part of it.
    std::optional<double> weight;
    for (const auto& wc : s.current.concepts) {
      if (wc.text == c.text) {
        weight = wc.weight;
        break;
      }
    }
    item["weight"] = weight ? json(round9(*weight)) : json(0.0);
    concepts.push_back(std::move(item));
  }
  json history = json::array();
  for (const auto& h : s.history) history.push_back(edit_record(h));
  return {{"session_id", s.session_id},
          {"solver", std::string(to_string(s.solver.kind))},
          {"concepts", std::move(concepts)},
          {"history", std::move(history)},
          {"pending_edits", s.dirty},
          {"base", prediction_to_json(s.base, classes)},
          {"prediction", prediction_to_json(s.current, classes)}};
}

json session_state_to_json(const InterventionSession& s) {
  json concepts = json::array();
  for (const auto& c : s.concepts) {
    json item = {{"text", c.text}, {"embedding", c.embedding},
                 {"source", std::string(source_name(c.source))}, {"deleted", c.deleted}};
    item["base_position"] = c.base_position ? json(*c.base_position) : json(nullptr);
    concepts.push_back(std::move(item));
  }
  json history = json::array();
  for (const auto& h : s.history) history.push_back(edit_record(h));
  return {{"session_id", s.session_id},
          {"base", prediction_state_to_json(s.base)},
          {"current", prediction_state_to_json(s.current)},
          {"concepts", std::move(concepts)},
          {"solver", solver_state(s.solver)},
          {"history", std::move(history)},
          {"dirty", s.dirty}};
}

InterventionSession session_state_from_json(const json& j) {
  InterventionSession s;
  s.session_id = j.at("session_id").get<std::string>();
  s.base = prediction_state_from_json(j.at("base"));
  s.current = prediction_state_from_json(j.at("current"));
  for (const auto& c : j.at("concepts")) {
    SessionConcept sc;
    sc.text = c.at("text").get<std::string>();
    sc.embedding = c.at("embedding").get<std::vector<float>>();
    sc.source = parse_source(c.at("source").get<std::string>());
    sc.deleted = c.at("deleted").get<bool>();
    if (!c.at("base_position").is_null()) sc.base_position = c["base_position"].get<std::size_t>();
    s.concepts.push_back(std::move(sc));
  }
  s.solver = solver_from_state(j.at("solver"));
  for (const auto& h : j.at("history")) s.history.push_back(edit_from_json(h));
  s.dirty = j.at("dirty").get<bool>();
  return s;
}

json prediction_record(std::size_t index, const Prediction& p, const ClassSet& classes,
                       bool with_class_scores) {
  json concepts = json::array();
  for (const auto& c : p.concepts) {
    concepts.push_back({{"text", c.text}, {"weight", round9(c.weight)}});
  }
  json out = {{"index", index}, {"label_id", p.label_id}};
  if (with_class_scores) {
    json scores = json::object();
    for (std::size_t c = 0; c < p.class_scores.size(); ++c) {
      scores[std::to_string(classes.labels[c].label_id)] = round9(p.class_scores[c]);
    }
    out["class_scores"] = std::move(scores);
  }
  out["concepts"] = std::move(concepts);
  out["fallback"] = p.fallback;
  return out;
}

std::string format_timestamp(std::chrono::system_clock::time_point t) {
  const auto secs = std::chrono::time_point_cast<std::chrono::seconds>(t);
  const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(t - secs).count();
  const std::time_t tt = std::chrono::system_clock::to_time_t(secs);
  std::tm tm{};
  gmtime_r(&tt, &tm);
  char buf[40];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%S", &tm);
  char out[48];
  std::snprintf(out, sizeof(out), "%s.%03dZ", buf, static_cast<int>(ms));
  return out;
}

}  // namespace zcbm
