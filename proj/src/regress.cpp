#include "zcbm/regress.hpp"

#include <Eigen/LU>
#include <Eigen/QR>
#include <algorithm>
#include <cassert>
#include <cmath>
#include <limits>
#include <numeric>

#include "zcbm/error.hpp"

namespace zcbm {

namespace {

// Columns with squared norm below this are treated as zero and skipped.
constexpr double kZeroColumn = 1e-24;

// Flop budget for the exact refinement of one problem. Large, nearly
// interpolating problems stop here and report converged = false.
constexpr double kRefineWork = 2e9;

double kkt_tolerance(double l1) { return 1e-6 * std::max(l1, 1.0); }

ConceptWeights finish(std::vector<double> w, SolverKind kind) {
  ConceptWeights out;
  out.w = std::move(w);
  out.solver = kind;
  out.recount();
  return out;
}

// Objective restricted to the columns in `a`; every other weight is zero.
double restricted_objective(const RegressionProblem& p, const std::vector<Eigen::Index>& a,
                            const Eigen::VectorXd& x, double l1, double l2) {
  Eigen::VectorXd r = p.target;
  for (Eigen::Index i = 0; i < x.size(); ++i) r.noalias() -= x[i] * p.design.col(a[i]);
  return r.squaredNorm() + l1 * x.lpNorm<1>() + l2 * x.squaredNorm();
}

// Feature-sign search from a warm start: repeatedly solves the stationarity
// equations for the active set under a fixed sign pattern, line-searches
// through sign changes, and adds the most violating zero coordinate when the
// active set is optimal. Without a ridge term, a rank-deficient active set
// is first moved along a null vector of its columns, which keeps the fit and
// lowers the l1 term until a coordinate reaches zero. Only accepts objective
// decreases. Returns true once kkt_violation is within kkt_tolerance(l1);
// false when stuck or out of the kRefineWork budget.
bool feature_sign(const RegressionProblem& p, std::vector<double>& w, double l1, double l2,
                  std::vector<double>* trace) {
  const Eigen::Index k = p.design.cols();
  const double tol = kkt_tolerance(l1);
  const Eigen::Index max_steps = 50 + 4 * k;

  auto columns = [&](const std::vector<Eigen::Index>& a) {
    Eigen::MatrixXd sub(p.design.rows(), static_cast<Eigen::Index>(a.size()));
    for (std::size_t i = 0; i < a.size(); ++i) {
      sub.col(static_cast<Eigen::Index>(i)) = p.design.col(a[i]);
    }
    return sub;
  };
  auto record = [&] {
    if (trace != nullptr) trace->push_back(regression_objective(p, w, l1, l2));
  };
  // Moves along v (oriented so sign . v <= 0) until the first nonzero
  // coordinate crosses zero; false if no coordinate does.
  auto null_move = [&](const std::vector<Eigen::Index>& a, const std::vector<double>& sign,
                       Eigen::VectorXd v) {
    double dot = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) dot += sign[i] * v[static_cast<Eigen::Index>(i)];
    if (dot > 0.0) v = -v;
    Eigen::Index hit = -1;
    double t_min = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < a.size(); ++i) {
      const double x = w[a[i]];
      const double vi = v[static_cast<Eigen::Index>(i)];
      if (x != 0.0 && x * vi < 0.0 && -x / vi < t_min) {
        t_min = -x / vi;
        hit = static_cast<Eigen::Index>(i);
      }
    }
    if (hit < 0) return false;
    for (std::size_t i = 0; i < a.size(); ++i) w[a[i]] += t_min * v[static_cast<Eigen::Index>(i)];
    w[a[static_cast<std::size_t>(hit)]] = 0.0;
    record();
    return true;
  };

  const auto d = static_cast<double>(p.design.rows());
  double work = 0.0;
  for (Eigen::Index step = 0; step < max_steps; ++step) {
    std::vector<Eigen::Index> a;
    std::vector<double> sign;
    for (Eigen::Index j = 0; j < k; ++j) {
      if (w[j] != 0.0) {
        a.push_back(j);
        sign.push_back(w[j] > 0 ? 1.0 : -1.0);
      }
    }
    const auto m = static_cast<double>(a.size()) + 1.0;
    work += d * static_cast<double>(k) + 4.0 * d * m * m + m * m * m;
    if (work > kRefineWork) break;
    if (l2 == 0.0 && !a.empty()) {
      const Eigen::FullPivLU<Eigen::MatrixXd> lu(columns(a));
      if (lu.rank() < static_cast<Eigen::Index>(a.size())) {
        if (!null_move(a, sign, lu.kernel().col(0))) return false;
        continue;
      }
    }

    const Eigen::VectorXd r = p.target - reconstruct(p, w);
    bool active_optimal = true;
    Eigen::Index entering = -1;
    double entering_grad = 0.0;
    for (Eigen::Index j = 0; j < k; ++j) {
      const double c = 2.0 * p.design.col(j).dot(r) - 2.0 * l2 * w[j];
      if (w[j] != 0.0) {
        if (std::abs(c - l1 * (w[j] > 0 ? 1.0 : -1.0)) > tol) active_optimal = false;
      } else if (std::abs(c) > l1 + tol && std::abs(c) > std::abs(entering_grad)) {
        entering = j;
        entering_grad = c;
      }
    }
    if (active_optimal && entering < 0) return true;
    if (active_optimal) {
      const auto pos = std::upper_bound(a.begin(), a.end(), entering) - a.begin();
      a.insert(a.begin() + pos, entering);
      sign.insert(sign.begin() + pos, entering_grad > 0 ? 1.0 : -1.0);
      if (l2 == 0.0) {
        const Eigen::FullPivLU<Eigen::MatrixXd> lu(columns(a));
        if (lu.rank() < static_cast<Eigen::Index>(a.size())) {
          // The entering coordinate must grow in the direction of its sign.
          Eigen::VectorXd v = lu.kernel().col(0);
          if (v[pos] * sign[static_cast<std::size_t>(pos)] < 0.0) v = -v;
          if (v[pos] == 0.0) return false;
          double dot = 0.0;
          for (std::size_t i = 0; i < a.size(); ++i) {
            dot += sign[i] * v[static_cast<Eigen::Index>(i)];
          }
          if (!(dot < 0.0) || !null_move(a, sign, v)) return false;
          continue;
        }
      }
    }

    const auto n = static_cast<Eigen::Index>(a.size());
    const Eigen::MatrixXd sub = columns(a);
    Eigen::VectorXd rhs(n);
    Eigen::VectorXd x0(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      rhs[i] = sub.col(i).dot(p.target) - 0.5 * l1 * sign[static_cast<std::size_t>(i)];
      x0[i] = w[a[i]];
    }
    Eigen::MatrixXd gram = sub.transpose() * sub;
    gram.diagonal().array() += l2;
    const Eigen::VectorXd x1 = gram.completeOrthogonalDecomposition().solve(rhs);
    if (!x1.allFinite()) return false;

    // Candidates: the full step and every point where a coordinate crosses zero.
    const double current = restricted_objective(p, a, x0, l1, l2);
    double best = current;
    Eigen::VectorXd best_x = x0;
    auto consider = [&](double t, Eigen::Index zeroed) {
      Eigen::VectorXd x = x0 + t * (x1 - x0);
      if (zeroed >= 0) x[zeroed] = 0.0;
      const double obj = restricted_objective(p, a, x, l1, l2);
      if (obj < best) {
        best = obj;
        best_x = std::move(x);
      }
    };
    consider(1.0, -1);
    for (Eigen::Index i = 0; i < n; ++i) {
      if (x0[i] != 0.0 && (x1[i] > 0) != (x0[i] > 0)) consider(x0[i] / (x0[i] - x1[i]), i);
    }
    if (!(best < current)) return kkt_violation(p, w, l1, l2) <= tol;
    for (Eigen::Index i = 0; i < n; ++i) w[a[i]] = best_x[i];
    if (trace != nullptr) trace->push_back(best);
  }
  return kkt_violation(p, w, l1, l2) <= tol;
}

// Cyclic coordinate descent for ||y - Fw||^2 + l1 |w|_1 + l2 |w|^2, from w = 0.
// Alternates full sweeps with sweeps over the current support; stops once a
// full sweep moves no coordinate by tol or more and the stationarity
// conditions hold to kkt_tolerance(l1). Once the support settles it hands
// over to feature_sign.
ConceptWeights coordinate_descent(const RegressionProblem& p, double l1, double l2,
                                  int max_iter, double tol, bool record, SolverKind kind) {
  const Eigen::Index k = p.design.cols();
  const Eigen::VectorXd col_sq = p.design.colwise().squaredNorm();
  std::vector<double> w(static_cast<std::size_t>(k), 0.0);
  Eigen::VectorXd r = p.target;
  std::vector<double> trace;

  auto update = [&](Eigen::Index j) {
    if (col_sq[j] < kZeroColumn) return 0.0;
    const double old = w[j];
    const double rho = 2.0 * (p.design.col(j).dot(r) + col_sq[j] * old);
    const double next = soft_threshold(rho, l1) / (2.0 * col_sq[j] + 2.0 * l2);
    if (next != old) {
      r.noalias() -= (next - old) * p.design.col(j);
      w[j] = next;
    }
    return std::abs(next - old);
  };

  int sweeps = 0;
  bool converged = false;
  std::vector<Eigen::Index> last_active;
  if (record) trace.push_back(regression_objective(p, w, l1, l2));
  while (sweeps < max_iter) {
    double max_change = 0.0;
    for (Eigen::Index j = 0; j < k; ++j) max_change = std::max(max_change, update(j));
    ++sweeps;
    if (record) {
      trace.push_back(regression_objective(p, w, l1, l2));
      assert(trace.back() <= trace[trace.size() - 2] * (1.0 + 1e-12) + 1e-15);
    }
    if (max_change < tol) {
      r = p.target - reconstruct(p, w);
      if (kkt_violation(p, w, l1, l2) <= kkt_tolerance(l1)) {
        converged = true;
        break;
      }
      continue;
    }
    std::vector<Eigen::Index> active;
    for (Eigen::Index j = 0; j < k; ++j) {
      if (w[j] != 0.0) active.push_back(j);
    }
    while (sweeps < max_iter) {
      double change = 0.0;
      for (auto j : active) change = std::max(change, update(j));
      ++sweeps;
      if (change < tol) break;
    }
    // Switch to exact active-set steps once the support has settled.
    const bool settled = active == last_active;
    last_active = active;
    if (settled && feature_sign(p, w, l1, l2, record ? &trace : nullptr)) {
      converged = true;
      break;
    }
    r = p.target - reconstruct(p, w);
  }
  if (!converged) converged = feature_sign(p, w, l1, l2, record ? &trace : nullptr);

  ConceptWeights out = finish(std::move(w), kind);
  out.lambda = l1;
  out.l2_weight = l2;
  out.iterations = sweeps;
  out.converged = converged;
  out.objective_trace = std::move(trace);
  return out;
}

Eigen::VectorXd restricted_least_squares(const RegressionProblem& p,
                                         const std::vector<Eigen::Index>& support) {
  Eigen::MatrixXd sub(p.design.rows(), static_cast<Eigen::Index>(support.size()));
  for (std::size_t i = 0; i < support.size(); ++i) {
    sub.col(static_cast<Eigen::Index>(i)) = p.design.col(support[i]);
  }
  return Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd>(sub).solve(p.target);
}

}  // namespace

RegressionProblem RegressionProblem::from_rows(const EmbeddingMatrix& concepts,
                                               std::span<const float> target) {
  if (!concepts.empty() && concepts.dim() != target.size()) {
    fail(ErrorCode::kDimensionMismatch, "target dimension " + std::to_string(target.size()) +
                                            " != concept dimension " +
                                            std::to_string(concepts.dim()));
  }
  for (float v : target) {
    if (!std::isfinite(v)) fail(ErrorCode::kNonFinite, "regression target is not finite");
  }
  RegressionProblem p;
  const auto d = static_cast<Eigen::Index>(target.size());
  const auto k = static_cast<Eigen::Index>(concepts.count());
  p.design.resize(d, k);
  for (Eigen::Index j = 0; j < k; ++j) {
    auto row = concepts.row(static_cast<std::size_t>(j));
    for (Eigen::Index i = 0; i < d; ++i) p.design(i, j) = row[i];
  }
  p.target.resize(d);
  for (Eigen::Index i = 0; i < d; ++i) p.target[i] = target[i];
  return p;
}

std::string_view to_string(SolverKind kind) {
  switch (kind) {
    case SolverKind::kLasso: return "lasso";
    case SolverKind::kElasticNet: return "elastic_net";
    case SolverKind::kHtp: return "htp";
    case SolverKind::kLeastSquares: return "least_squares";
    case SolverKind::kSimilarity: return "similarity";
  }
  return "unknown";
}

SolverKind parse_solver_kind(std::string_view name) {
  if (name == "lasso") return SolverKind::kLasso;
  if (name == "elastic_net" || name == "elastic-net") return SolverKind::kElasticNet;
  if (name == "htp") return SolverKind::kHtp;
  if (name == "least_squares" || name == "linear") return SolverKind::kLeastSquares;
  if (name == "similarity") return SolverKind::kSimilarity;
  fail(ErrorCode::kInvalidArgument, "unknown solver '" + std::string(name) + "'");
}

void ConceptWeights::recount() {
  nonzero_count = static_cast<std::size_t>(
      std::count_if(w.begin(), w.end(), [](double v) { return v != 0.0; }));
}

double soft_threshold(double z, double gamma) {
  if (z > gamma) return z - gamma;
  if (z < -gamma) return z + gamma;
  return 0.0;
}

Eigen::VectorXd reconstruct(const RegressionProblem& p, std::span<const double> w) {
  Eigen::VectorXd out = Eigen::VectorXd::Zero(p.design.rows());
  for (std::size_t j = 0; j < w.size(); ++j) {
    if (w[j] != 0.0) out.noalias() += w[j] * p.design.col(static_cast<Eigen::Index>(j));
  }
  return out;
}

double regression_objective(const RegressionProblem& p, std::span<const double> w,
                            double l1, double l2) {
  const double fit = (p.target - reconstruct(p, w)).squaredNorm();
  double abs_sum = 0.0;
  double sq_sum = 0.0;
  for (double v : w) {
    abs_sum += std::abs(v);
    sq_sum += v * v;
  }
  return fit + l1 * abs_sum + l2 * sq_sum;
}

double kkt_violation(const RegressionProblem& p, std::span<const double> w, double l1,
                     double l2) {
  const Eigen::VectorXd r = p.target - reconstruct(p, w);
  double worst = 0.0;
  for (Eigen::Index j = 0; j < p.design.cols(); ++j) {
    const double grad = 2.0 * p.design.col(j).dot(r) - 2.0 * l2 * w[j];
    double v = 0.0;
    if (w[j] == 0.0) {
      v = std::max(0.0, std::abs(grad) - l1);
    } else {
      v = std::abs(grad - l1 * (w[j] > 0 ? 1.0 : -1.0));
    }
    worst = std::max(worst, v);
  }
  return worst;
}

ConceptWeights lasso_cd(const RegressionProblem& p, double lambda, int max_iter, double tol,
                        bool record_objective) {
  if (!(lambda > 0.0)) fail(ErrorCode::kInvalidArgument, "lasso lambda must be > 0");
  return coordinate_descent(p, lambda, 0.0, max_iter, tol, record_objective,
                            SolverKind::kLasso);
}

ConceptWeights elastic_net_cd(const RegressionProblem& p, double lambda1, double lambda2,
                              int max_iter, double tol, bool record_objective) {
  if (lambda1 < 0.0 || lambda2 < 0.0 || (lambda1 == 0.0 && lambda2 == 0.0)) {
    fail(ErrorCode::kInvalidArgument,
         "elastic net needs lambda1, lambda2 >= 0 and not both zero");
  }
  return coordinate_descent(p, lambda1, lambda2, max_iter, tol, record_objective,
                            SolverKind::kElasticNet);
}

ConceptWeights htp(const RegressionProblem& p, std::size_t s, double step, int max_iter) {
  const auto k = static_cast<std::size_t>(p.design.cols());
  if (s < 1 || s > k) {
    fail(ErrorCode::kInvalidArgument,
         "htp support size must be in [1, " + std::to_string(k) + "], got " + std::to_string(s));
  }
  Eigen::VectorXd w = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(k));
  std::vector<Eigen::Index> support;
  std::vector<Eigen::Index> order(k);
  bool converged = false;
  int it = 0;
  while (it < max_iter) {
    ++it;
    const Eigen::VectorXd residual = p.target - p.design * w;
    const Eigen::VectorXd u = w + step * 2.0 * (p.design.transpose() * residual);
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    std::stable_sort(order.begin(), order.end(), [&u](Eigen::Index a, Eigen::Index b) {
      return std::abs(u[a]) > std::abs(u[b]);
    });
    std::vector<Eigen::Index> next(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(s));
    std::sort(next.begin(), next.end());
    if (next == support) {
      converged = true;
      break;
    }
    support = std::move(next);
    const Eigen::VectorXd sub = restricted_least_squares(p, support);
    w.setZero();
    for (std::size_t i = 0; i < support.size(); ++i) {
      w[support[i]] = sub[static_cast<Eigen::Index>(i)];
    }
  }
  ConceptWeights out = finish(std::vector<double>(w.data(), w.data() + w.size()),
                              SolverKind::kHtp);
  out.s = s;
  out.iterations = it;
  out.converged = converged;
  return out;
}

ConceptWeights least_squares(const RegressionProblem& p) {
  std::vector<double> w(static_cast<std::size_t>(p.design.cols()), 0.0);
  if (p.design.cols() > 0) {
    const Eigen::VectorXd sol =
        Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd>(p.design).solve(p.target);
    std::copy(sol.data(), sol.data() + sol.size(), w.begin());
  }
  ConceptWeights out = finish(std::move(w), SolverKind::kLeastSquares);
  out.iterations = 1;
  out.converged = true;
  return out;
}

ConceptWeights similarity_weights(const RegressionProblem& p) {
  const double y_norm = p.target.norm();
  std::vector<double> w(static_cast<std::size_t>(p.design.cols()), 0.0);
  for (Eigen::Index j = 0; j < p.design.cols(); ++j) {
    const double denom = y_norm * p.design.col(j).norm();
    w[static_cast<std::size_t>(j)] = denom > 0.0 ? p.design.col(j).dot(p.target) / denom : 0.0;
  }
  ConceptWeights out = finish(std::move(w), SolverKind::kSimilarity);
  out.iterations = 1;
  out.converged = true;
  return out;
}

ConceptWeights solve(const RegressionProblem& p, const SolverConfig& cfg) {
  switch (cfg.kind) {
    case SolverKind::kLasso:
      return lasso_cd(p, cfg.lambda, cfg.max_iter, cfg.tol, cfg.record_objective);
    case SolverKind::kElasticNet:
      return elastic_net_cd(p, cfg.lambda, cfg.l2_weight, cfg.max_iter, cfg.tol,
                            cfg.record_objective);
    case SolverKind::kHtp:
      return htp(p, std::min(cfg.s, p.size()), cfg.step, cfg.max_iter);
    case SolverKind::kLeastSquares:
      return least_squares(p);
    case SolverKind::kSimilarity:
      return similarity_weights(p);
  }
  fail(ErrorCode::kInvalidArgument, "unknown solver");
}

}  // namespace zcbm
