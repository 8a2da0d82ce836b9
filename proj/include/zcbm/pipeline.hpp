#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "zcbm/bank.hpp"
#include "zcbm/provider.hpp"
#include "zcbm/regress.hpp"
#include "zcbm/retrieval.hpp"
#include "zcbm/vecstore.hpp"

namespace zcbm {

inline constexpr std::string_view kDefaultClassPrompt = "a photo of [class name]";

struct ClassLabel {
  int label_id = 0;
  std::string name;
  std::string prompt;
};

/// Target classes and their text embeddings (row i belongs to labels[i]).
struct ClassSet {
  std::vector<ClassLabel> labels;
  EmbeddingMatrix embeddings;

  std::size_t size() const { return labels.size(); }
};

std::string default_class_prompt(const std::string& name);

/// Reads [{"label_id": int, "name": str, "prompt": str?}, ...]. A missing
/// prompt becomes "a photo of <name>".
std::vector<ClassLabel> load_class_labels(const std::filesystem::path& path);

ClassSet make_class_set(std::vector<ClassLabel> labels, EmbeddingMatrix embeddings);

/// Embeds each label's prompt with `embed`.
ClassSet embed_class_set(std::vector<ClassLabel> labels, const EmbedFn& embed);

struct ZeroShotResult {
  int label_id = 0;
  std::vector<double> class_scores;  // aligned with ClassSet::labels
};

/// argmax over classes of cosine(x, class); ties go to the lowest label_id.
ZeroShotResult zero_shot_baseline(std::span<const float> x, const ClassSet& classes);
ZeroShotResult zero_shot_baseline(std::span<const double> x, const ClassSet& classes);

enum class ConceptSource { kRetrieved, kInserted };

struct CandidateConcept {
  std::string text;
  std::int64_t bank_index = -1;  // -1 for inserted concepts
  ConceptSource source = ConceptSource::kRetrieved;
};

struct WeightedConcept {
  std::string text;
  std::int64_t bank_index = -1;
  double weight = 0.0;
  std::size_t position = 0;  // index into Prediction::candidates
};

/// Output of one inference, with everything needed to intervene on it.
struct Prediction {
  int label_id = 0;
  std::vector<double> class_scores;
  /// Nonzero-weight concepts by descending |weight| (ties: candidate order).
  std::vector<WeightedConcept> concepts;
  /// Sum of weight * concept embedding; not re-normalized.
  std::vector<double> reconstructed;
  ConceptWeights weights;
  RetrievalSet retrieval;
  /// Set when the reconstruction vanished and the label came from zero-shot
  /// classification of the input itself.
  bool fallback = false;

  EmbeddingVector input;
  std::vector<CandidateConcept> candidates;  // aligned with weights.w
  EmbeddingMatrix candidate_embeddings;      // aligned with candidates
};

/// Assembles a Prediction from fixed weights: reconstruction, class scores and
/// label. Falls back to zero-shot on the input when ||Fw|| < 1e-10.
Prediction predict_from_weights(EmbeddingVector input, std::vector<CandidateConcept> candidates,
                                EmbeddingMatrix candidate_embeddings, ConceptWeights weights,
                                RetrievalSet retrieval, const ClassSet& classes);

struct StageTimes {
  double retrieval_ms = 0.0;
  double regression_ms = 0.0;
  double prediction_ms = 0.0;
};

/// Retrieve top-k concepts, regress the input on them, classify the
/// reconstruction. Unnormalized inputs are normalized first.
Prediction infer(const EmbeddingVector& x, const ConceptBank& bank, const ClassSet& classes,
                 std::size_t k, const SolverConfig& solver, const IvfIndex* index = nullptr,
                 StageTimes* times = nullptr);

struct CalibrationResult {
  double lambda = 0.0;
  bool no_qualifier = false;
  std::vector<double> grid;
  std::vector<double> mean_ratios;  // aligned with grid
};

/// Among grid values whose mean nonzero ratio exceeds target_ratio, the
/// largest lambda. With no qualifier: the smallest grid value, flagged.
CalibrationResult select_lambda(const std::vector<double>& grid,
                                const std::vector<double>& mean_ratios, double target_ratio);

CalibrationResult calibrate_lambda(const std::vector<EmbeddingVector>& samples,
                                   const ConceptBank& bank, std::size_t k,
                                   const std::vector<double>& grid, double target_ratio,
                                   const SolverConfig& base = {},
                                   const IvfIndex* index = nullptr);

enum class DeletionOrder { kAscending, kDescending, kRandom };

std::string_view to_string(DeletionOrder order);
DeletionOrder parse_deletion_order(std::string_view name);

/// Zeroes the first floor(ratio * n) nonzero weights in the given |weight|
/// order and re-classifies without re-fitting.
Prediction intervene_delete(const Prediction& p, const ClassSet& classes, DeletionOrder order,
                            double ratio, std::uint64_t seed = 0);

/// Zeroes the weights at the given candidate positions, no re-fit.
Prediction zero_weights(const Prediction& p, const ClassSet& classes,
                        const std::vector<std::size_t>& positions);

struct InsertedConcept {
  std::string text;
  EmbeddingVector embedding;
};

/// Re-fits by least squares over the current nonzero concepts plus the
/// inserted ones (deduplicated by folded text) and re-classifies.
Prediction intervene_insert(const Prediction& p, const ClassSet& classes,
                            const std::vector<InsertedConcept>& inserted);

/// ||x - reconstructed||^2.
double reconstruction_error(const Prediction& p);

}  // namespace zcbm
