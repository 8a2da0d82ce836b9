#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "zcbm/pipeline.hpp"

namespace zcbm {

double top1_accuracy(const std::vector<int>& predictions, const std::vector<int>& truths);

/// Mean cosine between the scorer-side image embedding and the scorer-side
/// embeddings of the top_n concepts by |weight|. scorer_concepts rows are
/// aligned with weights.w.
double clip_score(std::span<const float> scorer_image, const EmbeddingMatrix& scorer_concepts,
                  const ConceptWeights& weights, std::size_t top_n = 10);

/// |predicted ∩ reference| / |reference| after case folding.
double concept_coverage(const std::vector<std::string>& predicted,
                        const std::vector<std::string>& reference);

/// Reference concepts: those whose contribution exceeds `threshold`.
std::vector<std::string> reference_concepts(const std::vector<std::string>& texts,
                                            const std::vector<double>& contributions,
                                            double threshold = 0.05);

/// Fraction of zero coefficients: 1 - nonzero_count / k.
double sparsity(const ConceptWeights& w, std::size_t k);
double sparsity(const ConceptWeights& w);

/// Mean cosine over unordered distinct row pairs.
double inner_redundancy(const EmbeddingMatrix& concepts);

/// L2 distance between the centroids of the two (row-normalized) sets.
double modality_gap(const EmbeddingMatrix& a, const EmbeddingMatrix& b);

struct DeletionCurveRow {
  DeletionOrder order = DeletionOrder::kAscending;
  double ratio = 0.0;
  double accuracy = 0.0;
  double mean_reconstruction_error = 0.0;
};

std::vector<DeletionCurveRow> deletion_curve(const std::vector<Prediction>& predictions,
                                             const std::vector<int>& truths,
                                             const ClassSet& classes,
                                             const std::vector<DeletionOrder>& orders,
                                             const std::vector<double>& ratios,
                                             std::uint64_t seed = 0);

struct InsertionCurveRow {
  std::size_t count = 0;
  double accuracy = 0.0;
  double mean_reconstruction_error = 0.0;
};

/// For each m in counts: insert the first m ground-truth concepts of every
/// sample and re-fit. m = 0 reports the un-intervened predictions.
std::vector<InsertionCurveRow> insertion_curve(
    const std::vector<Prediction>& predictions, const std::vector<int>& truths,
    const std::vector<std::vector<InsertedConcept>>& ground_truth, const ClassSet& classes,
    const std::vector<std::size_t>& counts);

void write_deletion_csv(std::ostream& out, const std::vector<DeletionCurveRow>& rows);
void write_insertion_csv(std::ostream& out, const std::vector<InsertionCurveRow>& rows);

using Point2 = std::array<double, 2>;

/// Projects every group onto the top two principal components of the pooled,
/// mean-centred points. Each component's largest-|loading| entry is positive.
std::vector<std::vector<Point2>> pca2d(const std::vector<EmbeddingMatrix>& groups);

void write_pca_csv(std::ostream& out, const std::vector<std::string>& group_names,
                   const std::vector<std::vector<Point2>>& coords);

struct BenchmarkRow {
  std::size_t k = 0;
  double total_ms = 0.0;
  double retrieval_ms = 0.0;
  double regression_ms = 0.0;
  double prediction_ms = 0.0;
  std::optional<double> accuracy;
};

struct BenchmarkOptions {
  std::size_t warmup = 3;
  SolverConfig solver;
  const IvfIndex* index = nullptr;
};

/// Per k: mean wall-clock per stage over the samples, excluding `warmup`
/// leading runs. Accuracy is reported when truths are given.
std::vector<BenchmarkRow> benchmark_inference(const ConceptBank& bank,
                                              const std::vector<EmbeddingVector>& samples,
                                              const ClassSet& classes,
                                              const std::vector<std::size_t>& k_grid,
                                              const BenchmarkOptions& options = {},
                                              const std::vector<int>* truths = nullptr);

void write_benchmark_csv(std::ostream& out, const std::vector<BenchmarkRow>& rows);

struct SampleRecord {
  std::size_t index = 0;
  int predicted = 0;
  int truth = 0;
  double clip_score = 0.0;
  double sparsity = 0.0;
  std::optional<double> inner_redundancy;
};

struct EvalReport {
  std::string dataset_name;
  std::size_t n_samples = 0;
  double top1_accuracy = 0.0;
  double mean_clip_score = 0.0;
  double mean_sparsity = 0.0;
  double mean_inner_redundancy = 0.0;
  double image_to_label_gap = 0.0;
  double concept_to_label_gap = 0.0;
  std::vector<SampleRecord> samples;
};

struct EvalOptions {
  std::string dataset_name = "dataset";
  std::size_t top_n = 10;
  /// Scorer-side embeddings; when absent the pipeline's own embeddings score.
  const std::vector<EmbeddingVector>* scorer_images = nullptr;
  const EmbedFn* scorer_text = nullptr;
  bool per_sample = false;
};

/// Aggregates accuracy, CLIP-Score, sparsity, inner redundancy and modality
/// gaps (image vs. label, reconstruction vs. label) over a batch.
EvalReport evaluate(const std::vector<Prediction>& predictions, const std::vector<int>& truths,
                    const ClassSet& classes, const EvalOptions& options = {});

nlohmann::json to_json(const EvalReport& report);
void write_report_csv(std::ostream& out, const EvalReport& report);

}  // namespace zcbm
