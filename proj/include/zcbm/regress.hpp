#pragma once

#include <Eigen/Core>
#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "zcbm/vecstore.hpp"

namespace zcbm {

/// Reconstruct `target` (d) as design * w, where design is d x K and each
/// column is one concept embedding.
struct RegressionProblem {
  Eigen::MatrixXd design;
  Eigen::VectorXd target;

  std::size_t dim() const { return static_cast<std::size_t>(design.rows()); }
  std::size_t size() const { return static_cast<std::size_t>(design.cols()); }

  /// Columns are the matrix rows, in order.
  static RegressionProblem from_rows(const EmbeddingMatrix& concepts,
                                     std::span<const float> target);
};

enum class SolverKind { kLasso, kElasticNet, kHtp, kLeastSquares, kSimilarity };

std::string_view to_string(SolverKind kind);
SolverKind parse_solver_kind(std::string_view name);

/// Solver settings. The lasso objective is ||y - Fw||^2 + lambda ||w||_1 with
/// no 1/(2n) factor, so lambda here equals 2n * alpha in the scaled
/// convention ||y - Fw||^2 / (2n) + alpha ||w||_1.
struct SolverConfig {
  SolverKind kind = SolverKind::kLasso;
  double lambda = 1e-5;     // l1 weight (lasso, elastic net)
  double l2_weight = 1e-5;  // elastic net only
  std::size_t s = 256;      // htp support size
  double step = 0.5;        // htp gradient step
  int max_iter = 1000;
  double tol = 1e-7;
  bool record_objective = false;
};

struct ConceptWeights {
  std::vector<double> w;
  std::size_t nonzero_count = 0;
  SolverKind solver = SolverKind::kLasso;
  double lambda = 0.0;
  double l2_weight = 0.0;
  std::size_t s = 0;
  int iterations = 0;
  bool converged = false;
  /// Objective after each full coordinate sweep, when requested.
  std::vector<double> objective_trace;

  std::size_t size() const { return w.size(); }
  void recount();
};

/// sign(z) * max(|z| - gamma, 0).
double soft_threshold(double z, double gamma);

/// ||y - Fw||^2 + l1 ||w||_1 + l2 ||w||^2.
double regression_objective(const RegressionProblem& p, std::span<const double> w,
                            double l1, double l2 = 0.0);

/// Largest violation of the stationarity conditions of the elastic-net
/// objective (lasso when l2 == 0), computed from a fresh residual.
double kkt_violation(const RegressionProblem& p, std::span<const double> w, double l1,
                     double l2 = 0.0);

ConceptWeights lasso_cd(const RegressionProblem& p, double lambda, int max_iter = 1000,
                        double tol = 1e-7, bool record_objective = false);

ConceptWeights elastic_net_cd(const RegressionProblem& p, double lambda1, double lambda2,
                              int max_iter = 1000, double tol = 1e-7,
                              bool record_objective = false);

ConceptWeights htp(const RegressionProblem& p, std::size_t s, double step = 0.5,
                   int max_iter = 1000);

/// Minimum-norm least squares via a complete orthogonal decomposition.
ConceptWeights least_squares(const RegressionProblem& p);

ConceptWeights similarity_weights(const RegressionProblem& p);

ConceptWeights solve(const RegressionProblem& p, const SolverConfig& cfg);

Eigen::VectorXd reconstruct(const RegressionProblem& p, std::span<const double> w);

}  // namespace zcbm
