#include "zcbm/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <numeric>
#include <random>
#include <unordered_set>

#include "zcbm/error.hpp"

namespace zcbm {

namespace {

using Clock = std::chrono::steady_clock;

double elapsed_ms(Clock::time_point since) {
  return std::chrono::duration<double, std::milli>(Clock::now() - since).count();
}

// Reconstruction norm below which the prediction falls back to zero-shot.
constexpr double kDegenerateNorm = 1e-10;

template <typename T>
ZeroShotResult zero_shot_impl(std::span<const T> x, const ClassSet& classes) {
  if (classes.size() == 0) fail(ErrorCode::kEmptyClassSet, "class set is empty");
  if (x.size() != classes.embeddings.dim()) {
    fail(ErrorCode::kDimensionMismatch, "input dimension " + std::to_string(x.size()) +
                                            " != class dimension " +
                                            std::to_string(classes.embeddings.dim()));
  }
  double x_norm = 0.0;
  for (auto v : x) x_norm += static_cast<double>(v) * static_cast<double>(v);
  x_norm = std::sqrt(x_norm);

  ZeroShotResult out;
  out.class_scores.resize(classes.size());
  std::size_t best = 0;
  for (std::size_t c = 0; c < classes.size(); ++c) {
    auto row = classes.embeddings.row(c);
    double ab = 0.0;
    double bb = 0.0;
    for (std::size_t i = 0; i < row.size(); ++i) {
      ab += static_cast<double>(x[i]) * row[i];
      bb += static_cast<double>(row[i]) * row[i];
    }
    const double denom = x_norm * std::sqrt(bb);
    const double score = denom > 0.0 ? ab / denom : 0.0;
    out.class_scores[c] = score;
    const double best_score = out.class_scores[best];
    if (c > 0 && (score > best_score ||
                  (score == best_score && classes.labels[c].label_id <
                                              classes.labels[best].label_id))) {
      best = c;
    }
  }
  out.label_id = classes.labels[best].label_id;
  return out;
}

std::vector<WeightedConcept> ranked_concepts(const std::vector<CandidateConcept>& candidates,
                                             const ConceptWeights& weights) {
  std::vector<WeightedConcept> out;
  for (std::size_t j = 0; j < weights.w.size(); ++j) {
    if (weights.w[j] == 0.0) continue;
    out.push_back({candidates[j].text, candidates[j].bank_index, weights.w[j], j});
  }
  std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) {
    return std::abs(a.weight) > std::abs(b.weight);
  });
  return out;
}

}  // namespace

std::string default_class_prompt(const std::string& name) {
  return "a photo of " + name;
}

std::vector<ClassLabel> load_class_labels(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::kIo, "cannot open class file " + path.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kInvalidArgument, path.string() + ": " + e.what());
  }
  if (!doc.is_array()) fail(ErrorCode::kInvalidArgument, path.string() + ": expected an array");
  std::vector<ClassLabel> labels;
  std::unordered_set<int> ids;
  for (const auto& item : doc) {
    ClassLabel label;
    try {
      label.label_id = item.at("label_id").get<int>();
      label.name = item.at("name").get<std::string>();
      label.prompt = item.contains("prompt") && !item["prompt"].is_null()
                         ? item["prompt"].get<std::string>()
                         : default_class_prompt(label.name);
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::kInvalidArgument, path.string() + ": bad class entry: " + e.what());
    }
    if (!ids.insert(label.label_id).second) {
      fail(ErrorCode::kInvalidArgument, "duplicate label_id " + std::to_string(label.label_id));
    }
    labels.push_back(std::move(label));
  }
  return labels;
}

ClassSet make_class_set(std::vector<ClassLabel> labels, EmbeddingMatrix embeddings) {
  if (labels.empty()) fail(ErrorCode::kEmptyClassSet, "class set is empty");
  if (labels.size() != embeddings.count()) {
    fail(ErrorCode::kDimMismatch, std::to_string(labels.size()) + " classes but " +
                                      std::to_string(embeddings.count()) + " class embeddings");
  }
  std::unordered_set<int> ids;
  for (const auto& l : labels) {
    if (!ids.insert(l.label_id).second) {
      fail(ErrorCode::kInvalidArgument, "duplicate label_id " + std::to_string(l.label_id));
    }
  }
  ClassSet set;
  set.labels = std::move(labels);
  set.embeddings = embeddings.normalized() ? std::move(embeddings) : normalize_rows(embeddings);
  return set;
}

ClassSet embed_class_set(std::vector<ClassLabel> labels, const EmbedFn& embed) {
  std::vector<std::string> prompts;
  for (const auto& l : labels) prompts.push_back(l.prompt);
  if (prompts.empty()) fail(ErrorCode::kEmptyClassSet, "class set is empty");
  return make_class_set(std::move(labels), embed(prompts));
}

ZeroShotResult zero_shot_baseline(std::span<const float> x, const ClassSet& classes) {
  return zero_shot_impl(x, classes);
}

ZeroShotResult zero_shot_baseline(std::span<const double> x, const ClassSet& classes) {
  return zero_shot_impl(x, classes);
}

Prediction predict_from_weights(EmbeddingVector input, std::vector<CandidateConcept> candidates,
                                EmbeddingMatrix candidate_embeddings, ConceptWeights weights,
                                RetrievalSet retrieval, const ClassSet& classes) {
  if (candidates.size() != weights.w.size() ||
      candidate_embeddings.count() != weights.w.size()) {
    fail(ErrorCode::kLengthMismatch, "candidates, embeddings and weights disagree in length");
  }
  const std::size_t d = input.dim();
  Prediction p;
  p.reconstructed.assign(d, 0.0);
  for (std::size_t j = 0; j < weights.w.size(); ++j) {
    const double wj = weights.w[j];
    if (wj == 0.0) continue;
    auto row = candidate_embeddings.row(j);
    for (std::size_t i = 0; i < d; ++i) p.reconstructed[i] += wj * row[i];
  }
  double norm = 0.0;
  for (double v : p.reconstructed) norm += v * v;
  norm = std::sqrt(norm);

  ZeroShotResult z = norm < kDegenerateNorm
                         ? zero_shot_baseline(std::span<const float>(input.values), classes)
                         : zero_shot_baseline(std::span<const double>(p.reconstructed), classes);
  p.fallback = norm < kDegenerateNorm;
  p.label_id = z.label_id;
  p.class_scores = std::move(z.class_scores);
  weights.recount();
  p.concepts = ranked_concepts(candidates, weights);
  p.weights = std::move(weights);
  p.retrieval = std::move(retrieval);
  p.input = std::move(input);
  p.candidates = std::move(candidates);
  p.candidate_embeddings = std::move(candidate_embeddings);
  return p;
}

Prediction infer(const EmbeddingVector& x, const ConceptBank& bank, const ClassSet& classes,
                 std::size_t k, const SolverConfig& solver, const IvfIndex* index,
                 StageTimes* times) {
  if (x.dim() != bank.dim()) {
    fail(ErrorCode::kDimensionMismatch, "input dimension " + std::to_string(x.dim()) +
                                            " != bank dimension " + std::to_string(bank.dim()));
  }
  if (classes.embeddings.dim() != bank.dim()) {
    fail(ErrorCode::kDimensionMismatch, "class dimension " +
                                            std::to_string(classes.embeddings.dim()) +
                                            " != bank dimension " + std::to_string(bank.dim()));
  }
  EmbeddingVector input = x.normalized ? x : normalize(x.values);

  auto t0 = Clock::now();
  Retriever retriever{&bank.embeddings, index};
  RetrievalSet retrieval = retriever.search(input.values, k);
  EmbeddingMatrix candidate_embeddings = bank.embeddings.select(retrieval.indices);
  std::vector<CandidateConcept> candidates;
  candidates.reserve(retrieval.size());
  for (auto i : retrieval.indices) {
    candidates.push_back({bank.vocab[i], static_cast<std::int64_t>(i), ConceptSource::kRetrieved});
  }
  const double retrieval_ms = elapsed_ms(t0);

  t0 = Clock::now();
  const auto problem = RegressionProblem::from_rows(candidate_embeddings, input.values);
  ConceptWeights weights = solve(problem, solver);
  const double regression_ms = elapsed_ms(t0);

  t0 = Clock::now();
  Prediction p = predict_from_weights(std::move(input), std::move(candidates),
                                      std::move(candidate_embeddings), std::move(weights),
                                      std::move(retrieval), classes);
  if (times != nullptr) {
    times->retrieval_ms = retrieval_ms;
    times->regression_ms = regression_ms;
    times->prediction_ms = elapsed_ms(t0);
  }
  return p;
}

CalibrationResult select_lambda(const std::vector<double>& grid,
                                const std::vector<double>& mean_ratios, double target_ratio) {
  if (grid.empty()) fail(ErrorCode::kInvalidArgument, "lambda grid is empty");
  if (grid.size() != mean_ratios.size()) {
    fail(ErrorCode::kLengthMismatch, "grid and ratio lists differ in length");
  }
  CalibrationResult out;
  out.grid = grid;
  out.mean_ratios = mean_ratios;
  std::optional<double> best;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    if (mean_ratios[i] > target_ratio && (!best || grid[i] > *best)) best = grid[i];
  }
  if (best) {
    out.lambda = *best;
  } else {
    out.lambda = *std::min_element(grid.begin(), grid.end());
    out.no_qualifier = true;
  }
  return out;
}

CalibrationResult calibrate_lambda(const std::vector<EmbeddingVector>& samples,
                                   const ConceptBank& bank, std::size_t k,
                                   const std::vector<double>& grid, double target_ratio,
                                   const SolverConfig& base, const IvfIndex* index) {
  if (grid.empty()) fail(ErrorCode::kInvalidArgument, "lambda grid is empty");
  if (!(target_ratio > 0.0 && target_ratio < 1.0)) {
    fail(ErrorCode::kInvalidArgument, "target ratio must lie in (0, 1)");
  }
  if (samples.empty()) fail(ErrorCode::kEmptySamples, "no calibration samples");

  std::vector<RegressionProblem> problems;
  problems.reserve(samples.size());
  Retriever retriever{&bank.embeddings, index};
  for (const auto& s : samples) {
    const EmbeddingVector x = s.normalized ? s : normalize(s.values);
    const RetrievalSet r = retriever.search(x.values, k);
    problems.push_back(RegressionProblem::from_rows(bank.embeddings.select(r.indices), x.values));
  }
  std::vector<double> ratios;
  for (double lambda : grid) {
    SolverConfig cfg = base;
    cfg.kind = SolverKind::kLasso;
    cfg.lambda = lambda;
    double total = 0.0;
    for (const auto& p : problems) {
      const auto w = solve(p, cfg);
      total += static_cast<double>(w.nonzero_count) / static_cast<double>(p.size());
    }
    ratios.push_back(total / static_cast<double>(problems.size()));
  }
  return select_lambda(grid, ratios, target_ratio);
}

std::string_view to_string(DeletionOrder order) {
  switch (order) {
    case DeletionOrder::kAscending: return "ascending";
    case DeletionOrder::kDescending: return "descending";
    case DeletionOrder::kRandom: return "random";
  }
  return "unknown";
}

DeletionOrder parse_deletion_order(std::string_view name) {
  if (name == "ascending") return DeletionOrder::kAscending;
  if (name == "descending") return DeletionOrder::kDescending;
  if (name == "random") return DeletionOrder::kRandom;
  fail(ErrorCode::kInvalidArgument, "unknown deletion order '" + std::string(name) + "'");
}

Prediction zero_weights(const Prediction& p, const ClassSet& classes,
                        const std::vector<std::size_t>& positions) {
  ConceptWeights w = p.weights;
  for (auto j : positions) {
    if (j >= w.w.size()) fail(ErrorCode::kInvalidArgument, "candidate position out of range");
    w.w[j] = 0.0;
  }
  return predict_from_weights(p.input, p.candidates, p.candidate_embeddings, std::move(w),
                              p.retrieval, classes);
}

Prediction intervene_delete(const Prediction& p, const ClassSet& classes, DeletionOrder order,
                            double ratio, std::uint64_t seed) {
  if (!(ratio >= 0.0 && ratio <= 1.0)) {
    fail(ErrorCode::kInvalidArgument, "deletion ratio must lie in [0, 1]");
  }
  // p.concepts is already sorted by descending |weight|.
  std::vector<std::size_t> positions;
  for (const auto& c : p.concepts) positions.push_back(c.position);
  switch (order) {
    case DeletionOrder::kDescending:
      break;
    case DeletionOrder::kAscending:
      std::stable_sort(positions.begin(), positions.end(), [&](std::size_t a, std::size_t b) {
        return std::abs(p.weights.w[a]) < std::abs(p.weights.w[b]);
      });
      break;
    case DeletionOrder::kRandom: {
      std::mt19937_64 rng(seed);
      std::shuffle(positions.begin(), positions.end(), rng);
      break;
    }
  }
  const auto n = positions.size();
  const auto m = std::min(n, static_cast<std::size_t>(
                                 std::floor(ratio * static_cast<double>(n) + 1e-9)));
  positions.resize(m);
  return zero_weights(p, classes, positions);
}

Prediction intervene_insert(const Prediction& p, const ClassSet& classes,
                            const std::vector<InsertedConcept>& inserted) {
  const std::size_t d = p.input.dim();
  std::vector<CandidateConcept> candidates;
  EmbeddingMatrix embeddings(d, true);
  std::unordered_set<std::string> seen;
  for (std::size_t j = 0; j < p.weights.w.size(); ++j) {
    if (p.weights.w[j] == 0.0) continue;
    if (!seen.insert(fold_concept(p.candidates[j].text)).second) continue;
    candidates.push_back(p.candidates[j]);
    embeddings.append(p.candidate_embeddings.row(j));
  }
  for (const auto& c : inserted) {
    if (c.embedding.dim() != d) {
      fail(ErrorCode::kDimensionMismatch, "inserted concept '" + c.text + "' has dimension " +
                                              std::to_string(c.embedding.dim()) + ", expected " +
                                              std::to_string(d));
    }
    if (!seen.insert(fold_concept(c.text)).second) continue;
    candidates.push_back({c.text, -1, ConceptSource::kInserted});
    const EmbeddingVector e = c.embedding.normalized ? c.embedding : normalize(c.embedding.values);
    embeddings.append(e.values);
  }
  ConceptWeights w = least_squares(RegressionProblem::from_rows(embeddings, p.input.values));
  return predict_from_weights(p.input, std::move(candidates), std::move(embeddings), std::move(w),
                              p.retrieval, classes);
}

double reconstruction_error(const Prediction& p) {
  double err = 0.0;
  for (std::size_t i = 0; i < p.reconstructed.size(); ++i) {
    const double diff = static_cast<double>(p.input.values[i]) - p.reconstructed[i];
    err += diff * diff;
  }
  return err;
}

}  // namespace zcbm
