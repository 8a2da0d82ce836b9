#include "zcbm/metrics.hpp"

#include <Eigen/SVD>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <sstream>
#include <numeric>
#include <unordered_set>

#include "zcbm/error.hpp"
#include "zcbm/serialize.hpp"

namespace zcbm {

namespace {

using Clock = std::chrono::steady_clock;

// Nonzero positions by descending |w|, ties by position; at most top_n.
std::vector<std::size_t> top_positions(const ConceptWeights& w, std::size_t top_n) {
  std::vector<std::size_t> pos;
  for (std::size_t j = 0; j < w.w.size(); ++j) {
    if (w.w[j] != 0.0) pos.push_back(j);
  }
  std::stable_sort(pos.begin(), pos.end(), [&w](std::size_t a, std::size_t b) {
    return std::abs(w.w[a]) > std::abs(w.w[b]);
  });
  if (pos.size() > top_n) pos.resize(top_n);
  return pos;
}

std::vector<double> centroid(const EmbeddingMatrix& m) {
  std::vector<double> c(m.dim(), 0.0);
  for (std::size_t i = 0; i < m.count(); ++i) {
    const EmbeddingVector v = m.normalized() ? m.row_vector(i) : normalize(m.row(i));
    for (std::size_t j = 0; j < c.size(); ++j) c[j] += v.values[j];
  }
  for (double& x : c) x /= static_cast<double>(m.count());
  return c;
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(9) << v;
  return os.str();
}

}  // namespace

double top1_accuracy(const std::vector<int>& predictions, const std::vector<int>& truths) {
  if (predictions.size() != truths.size()) {
    fail(ErrorCode::kLengthMismatch, std::to_string(predictions.size()) + " predictions vs " +
                                         std::to_string(truths.size()) + " truths");
  }
  if (predictions.empty()) fail(ErrorCode::kEmptySamples, "no predictions to score");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) hit += predictions[i] == truths[i];
  return static_cast<double>(hit) / static_cast<double>(predictions.size());
}

double clip_score(std::span<const float> scorer_image, const EmbeddingMatrix& scorer_concepts,
                  const ConceptWeights& weights, std::size_t top_n) {
  if (scorer_concepts.count() != weights.w.size()) {
    fail(ErrorCode::kLengthMismatch, "scorer concept rows must align with the weights");
  }
  const auto pos = top_positions(weights, top_n);
  if (pos.empty()) fail(ErrorCode::kNoNonzeroConcepts, "no nonzero concepts to score");
  double total = 0.0;
  for (auto j : pos) total += cosine(scorer_image, scorer_concepts.row(j));
  return total / static_cast<double>(pos.size());
}

double concept_coverage(const std::vector<std::string>& predicted,
                        const std::vector<std::string>& reference) {
  std::unordered_set<std::string> ref;
  for (const auto& r : reference) ref.insert(fold_concept(r));
  if (ref.empty()) fail(ErrorCode::kEmptyReference, "reference concept set is empty");
  std::unordered_set<std::string> pred;
  for (const auto& p : predicted) pred.insert(fold_concept(p));
  std::size_t hit = 0;
  for (const auto& r : ref) hit += pred.count(r);
  return static_cast<double>(hit) / static_cast<double>(ref.size());
}

std::vector<std::string> reference_concepts(const std::vector<std::string>& texts,
                                            const std::vector<double>& contributions,
                                            double threshold) {
  if (texts.size() != contributions.size()) {
    fail(ErrorCode::kLengthMismatch, "texts and contributions differ in length");
  }
  std::vector<std::string> out;
  for (std::size_t i = 0; i < texts.size(); ++i) {
    if (contributions[i] > threshold) out.push_back(texts[i]);
  }
  return out;
}

double sparsity(const ConceptWeights& w, std::size_t k) {
  if (k == 0 || k < w.nonzero_count) {
    fail(ErrorCode::kInvalidArgument, "k must be >= the number of nonzero weights");
  }
  return 1.0 - static_cast<double>(w.nonzero_count) / static_cast<double>(k);
}

double sparsity(const ConceptWeights& w) { return sparsity(w, w.w.size()); }

double inner_redundancy(const EmbeddingMatrix& concepts) {
  const std::size_t n = concepts.count();
  if (n < 2) fail(ErrorCode::kTooFewConcepts, "inner redundancy needs at least two concepts");
  double total = 0.0;
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t b = a + 1; b < n; ++b) total += cosine(concepts.row(a), concepts.row(b));
  }
  return total / (static_cast<double>(n) * static_cast<double>(n - 1) / 2.0);
}

double modality_gap(const EmbeddingMatrix& a, const EmbeddingMatrix& b) {
  if (a.empty() || b.empty()) fail(ErrorCode::kInvalidArgument, "modality gap needs two non-empty sets");
  if (a.dim() != b.dim()) {
    fail(ErrorCode::kDimensionMismatch, "set dimensions " + std::to_string(a.dim()) + " and " +
                                            std::to_string(b.dim()) + " differ");
  }
  const auto ca = centroid(a);
  const auto cb = centroid(b);
  double d2 = 0.0;
  for (std::size_t j = 0; j < ca.size(); ++j) d2 += (ca[j] - cb[j]) * (ca[j] - cb[j]);
  return std::sqrt(d2);
}

std::vector<DeletionCurveRow> deletion_curve(const std::vector<Prediction>& predictions,
                                             const std::vector<int>& truths,
                                             const ClassSet& classes,
                                             const std::vector<DeletionOrder>& orders,
                                             const std::vector<double>& ratios,
                                             std::uint64_t seed) {
  if (predictions.size() != truths.size()) {
    fail(ErrorCode::kLengthMismatch, "predictions and truths differ in length");
  }
  if (predictions.empty()) fail(ErrorCode::kEmptySamples, "no predictions");
  std::vector<DeletionCurveRow> rows;
  for (auto order : orders) {
    for (double ratio : ratios) {
      std::vector<int> labels;
      double err = 0.0;
      for (std::size_t i = 0; i < predictions.size(); ++i) {
        // Random order uses seed + sample index so samples differ but runs repeat.
        const Prediction q = intervene_delete(predictions[i], classes, order, ratio, seed + i);
        labels.push_back(q.label_id);
        err += reconstruction_error(q);
      }
      rows.push_back({order, ratio, top1_accuracy(labels, truths),
                      err / static_cast<double>(predictions.size())});
    }
  }
  return rows;
}

std::vector<InsertionCurveRow> insertion_curve(
    const std::vector<Prediction>& predictions, const std::vector<int>& truths,
    const std::vector<std::vector<InsertedConcept>>& ground_truth, const ClassSet& classes,
    const std::vector<std::size_t>& counts) {
  if (predictions.size() != truths.size() || predictions.size() != ground_truth.size()) {
    fail(ErrorCode::kLengthMismatch, "predictions, truths and ground truth differ in length");
  }
  if (predictions.empty()) fail(ErrorCode::kEmptySamples, "no predictions");
  std::vector<InsertionCurveRow> rows;
  for (auto m : counts) {
    std::vector<int> labels;
    double err = 0.0;
    for (std::size_t i = 0; i < predictions.size(); ++i) {
      if (m == 0) {
        labels.push_back(predictions[i].label_id);
        err += reconstruction_error(predictions[i]);
        continue;
      }
      const auto& gt = ground_truth[i];
      std::vector<InsertedConcept> first(gt.begin(), gt.begin() + static_cast<std::ptrdiff_t>(
                                                                      std::min(m, gt.size())));
      const Prediction q = intervene_insert(predictions[i], classes, first);
      labels.push_back(q.label_id);
      err += reconstruction_error(q);
    }
    rows.push_back({m, top1_accuracy(labels, truths),
                    err / static_cast<double>(predictions.size())});
  }
  return rows;
}

void write_deletion_csv(std::ostream& out, const std::vector<DeletionCurveRow>& rows) {
  out << "order,ratio,accuracy,mean_reconstruction_error\n";
  for (const auto& r : rows) {
    out << to_string(r.order) << ',' << fmt(r.ratio) << ',' << fmt(r.accuracy) << ','
        << fmt(r.mean_reconstruction_error) << '\n';
  }
}

void write_insertion_csv(std::ostream& out, const std::vector<InsertionCurveRow>& rows) {
  out << "count,accuracy,mean_reconstruction_error\n";
  for (const auto& r : rows) {
    out << r.count << ',' << fmt(r.accuracy) << ',' << fmt(r.mean_reconstruction_error) << '\n';
  }
}

std::vector<std::vector<Point2>> pca2d(const std::vector<EmbeddingMatrix>& groups) {
  std::size_t total = 0;
  std::size_t dim = 0;
  for (const auto& g : groups) {
    if (g.empty()) continue;
    if (dim == 0) dim = g.dim();
    if (g.dim() != dim) fail(ErrorCode::kDimensionMismatch, "PCA groups differ in dimension");
    total += g.count();
  }
  if (total < 2) fail(ErrorCode::kInvalidArgument, "PCA needs at least two points");

  Eigen::MatrixXd x(static_cast<Eigen::Index>(total), static_cast<Eigen::Index>(dim));
  Eigen::Index r = 0;
  for (const auto& g : groups) {
    for (std::size_t i = 0; i < g.count(); ++i, ++r) {
      auto row = g.row(i);
      for (std::size_t j = 0; j < dim; ++j) x(r, static_cast<Eigen::Index>(j)) = row[j];
    }
  }
  const Eigen::RowVectorXd mean = x.colwise().mean();
  x.rowwise() -= mean;
  if (x.squaredNorm() < 1e-20) fail(ErrorCode::kDegenerateVariance, "pooled variance is zero");

  Eigen::BDCSVD<Eigen::MatrixXd> svd(x, Eigen::ComputeThinV);
  Eigen::MatrixXd basis = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(dim), 2);
  const Eigen::Index comps = std::min<Eigen::Index>(2, svd.matrixV().cols());
  for (Eigen::Index c = 0; c < comps; ++c) {
    // Directions with (numerically) zero variance contribute nothing.
    if (svd.singularValues()[c] <= 1e-12 * svd.singularValues()[0]) continue;
    Eigen::VectorXd v = svd.matrixV().col(c);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v[arg] < 0) v = -v;
    basis.col(c) = v;
  }
  const Eigen::MatrixXd proj = x * basis;

  std::vector<std::vector<Point2>> out;
  r = 0;
  for (const auto& g : groups) {
    std::vector<Point2> pts;
    for (std::size_t i = 0; i < g.count(); ++i, ++r) pts.push_back({proj(r, 0), proj(r, 1)});
    out.push_back(std::move(pts));
  }
  return out;
}

void write_pca_csv(std::ostream& out, const std::vector<std::string>& group_names,
                   const std::vector<std::vector<Point2>>& coords) {
  out << "group,index,pc1,pc2\n";
  for (std::size_t g = 0; g < coords.size(); ++g) {
    const std::string name = g < group_names.size() ? group_names[g] : std::to_string(g);
    for (std::size_t i = 0; i < coords[g].size(); ++i) {
      out << name << ',' << i << ',' << fmt(coords[g][i][0]) << ',' << fmt(coords[g][i][1])
          << '\n';
    }
  }
}

std::vector<BenchmarkRow> benchmark_inference(const ConceptBank& bank,
                                              const std::vector<EmbeddingVector>& samples,
                                              const ClassSet& classes,
                                              const std::vector<std::size_t>& k_grid,
                                              const BenchmarkOptions& options,
                                              const std::vector<int>* truths) {
  if (k_grid.empty()) fail(ErrorCode::kInvalidArgument, "k grid is empty");
  if (samples.empty()) fail(ErrorCode::kEmptySamples, "no benchmark samples");
  if (truths != nullptr && truths->size() != samples.size()) {
    fail(ErrorCode::kLengthMismatch, "truths and samples differ in length");
  }
  std::vector<BenchmarkRow> rows;
  for (auto k : k_grid) {
    for (std::size_t w = 0; w < options.warmup; ++w) {
      infer(samples[w % samples.size()], bank, classes, k, options.solver, options.index);
    }
    BenchmarkRow row;
    row.k = k;
    std::vector<int> labels;
    for (const auto& x : samples) {
      StageTimes times;
      const auto t0 = Clock::now();
      const Prediction p = infer(x, bank, classes, k, options.solver, options.index, &times);
      row.total_ms += std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
      row.retrieval_ms += times.retrieval_ms;
      row.regression_ms += times.regression_ms;
      row.prediction_ms += times.prediction_ms;
      labels.push_back(p.label_id);
    }
    const auto n = static_cast<double>(samples.size());
    row.total_ms /= n;
    row.retrieval_ms /= n;
    row.regression_ms /= n;
    row.prediction_ms /= n;
    if (truths != nullptr) row.accuracy = top1_accuracy(labels, *truths);
    rows.push_back(row);
  }
  return rows;
}

void write_benchmark_csv(std::ostream& out, const std::vector<BenchmarkRow>& rows) {
  out << "k,total_ms,retrieval_ms,regression_ms,prediction_ms,accuracy\n";
  for (const auto& r : rows) {
    out << r.k << ',' << fmt(r.total_ms) << ',' << fmt(r.retrieval_ms) << ','
        << fmt(r.regression_ms) << ',' << fmt(r.prediction_ms) << ','
        << (r.accuracy ? fmt(*r.accuracy) : std::string()) << '\n';
  }
}

EvalReport evaluate(const std::vector<Prediction>& predictions, const std::vector<int>& truths,
                    const ClassSet& classes, const EvalOptions& options) {
  if (predictions.empty()) fail(ErrorCode::kEmptySamples, "no predictions to evaluate");
  if (options.scorer_images && options.scorer_images->size() != predictions.size()) {
    fail(ErrorCode::kLengthMismatch, "scorer images and predictions differ in length");
  }
  EvalReport report;
  report.dataset_name = options.dataset_name;
  report.n_samples = predictions.size();

  std::vector<int> labels;
  for (const auto& p : predictions) labels.push_back(p.label_id);
  report.top1_accuracy = top1_accuracy(labels, truths);

  const std::size_t dim = predictions.front().input.dim();
  EmbeddingMatrix images(dim, true);
  EmbeddingMatrix reconstructions(dim, true);
  EmbeddingMatrix label_rows(dim, true);
  std::size_t clip_n = 0;
  std::size_t redundancy_n = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const auto& p = predictions[i];
    SampleRecord rec;
    rec.index = i;
    rec.predicted = p.label_id;
    rec.truth = truths[i];
    rec.sparsity = sparsity(p.weights);
    report.mean_sparsity += rec.sparsity;

    const auto pos = top_positions(p.weights, options.top_n);
    if (!pos.empty()) {
      EmbeddingMatrix scorer_rows;
      std::vector<float> scorer_image;
      if (options.scorer_text != nullptr && options.scorer_images != nullptr) {
        std::vector<std::string> texts;
        for (auto j : pos) texts.push_back(p.candidates[j].text);
        scorer_rows = (*options.scorer_text)(texts);
        scorer_image = (*options.scorer_images)[i].values;
      } else {
        scorer_rows = p.candidate_embeddings.select(pos);
        scorer_image = p.input.values;
      }
      ConceptWeights top;
      for (auto j : pos) top.w.push_back(p.weights.w[j]);
      top.recount();
      rec.clip_score = clip_score(scorer_image, scorer_rows, top, options.top_n);
      report.mean_clip_score += rec.clip_score;
      ++clip_n;
      if (scorer_rows.count() >= 2) {
        rec.inner_redundancy = inner_redundancy(scorer_rows);
        report.mean_inner_redundancy += *rec.inner_redundancy;
        ++redundancy_n;
      }
    }

    images.append(p.input.values);
    std::vector<float> rec_f(p.reconstructed.begin(), p.reconstructed.end());
    if (l2_norm(rec_f) >= 1e-12) reconstructions.append(normalize(rec_f).values);
    for (std::size_t c = 0; c < classes.size(); ++c) {
      if (classes.labels[c].label_id == truths[i]) {
        label_rows.append(classes.embeddings.row(c));
        break;
      }
    }
    if (options.per_sample) report.samples.push_back(rec);
  }
  const auto n = static_cast<double>(predictions.size());
  report.mean_sparsity /= n;
  if (clip_n > 0) report.mean_clip_score /= static_cast<double>(clip_n);
  if (redundancy_n > 0) report.mean_inner_redundancy /= static_cast<double>(redundancy_n);
  if (!label_rows.empty()) {
    report.image_to_label_gap = modality_gap(images, label_rows);
    if (!reconstructions.empty()) {
      report.concept_to_label_gap = modality_gap(reconstructions, label_rows);
    }
  }
  return report;
}

nlohmann::json to_json(const EvalReport& report) {
  nlohmann::json out = {
      {"dataset_name", report.dataset_name},
      {"n_samples", report.n_samples},
      {"top1_accuracy", round9(report.top1_accuracy)},
      {"mean_clip_score", round9(report.mean_clip_score)},
      {"mean_sparsity", round9(report.mean_sparsity)},
      {"mean_inner_redundancy", round9(report.mean_inner_redundancy)},
      {"modality_gap", {{"image_to_label", round9(report.image_to_label_gap)},
                        {"concept_to_label", round9(report.concept_to_label_gap)}}},
  };
  if (!report.samples.empty()) {
    nlohmann::json samples = nlohmann::json::array();
    for (const auto& s : report.samples) {
      nlohmann::json item = {{"index", s.index},
                             {"predicted", s.predicted},
                             {"truth", s.truth},
                             {"clip_score", round9(s.clip_score)},
                             {"sparsity", round9(s.sparsity)}};
      item["inner_redundancy"] =
          s.inner_redundancy ? nlohmann::json(round9(*s.inner_redundancy)) : nlohmann::json(nullptr);
      samples.push_back(std::move(item));
    }
    out["samples"] = std::move(samples);
  }
  return out;
}

void write_report_csv(std::ostream& out, const EvalReport& report) {
  out << "dataset_name,n_samples,top1_accuracy,mean_clip_score,mean_sparsity,"
         "mean_inner_redundancy,image_to_label_gap,concept_to_label_gap\n";
  out << report.dataset_name << ',' << report.n_samples << ',' << fmt(report.top1_accuracy)
      << ',' << fmt(report.mean_clip_score) << ',' << fmt(report.mean_sparsity) << ','
      << fmt(report.mean_inner_redundancy) << ',' << fmt(report.image_to_label_gap) << ','
      << fmt(report.concept_to_label_gap) << '\n';
}

}  // namespace zcbm
