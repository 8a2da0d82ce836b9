// Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
// failure.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <random>
#include <sstream>
#include <string>

#include "fixtures.hpp"
#include "oracles.hpp"
#include "zcbm/error.hpp"
#include "zcbm/metrics.hpp"
#include "zcbm/pipeline.hpp"
#include "zcbm/regress.hpp"
#include "zcbm/retrieval.hpp"

using namespace zcbm;
namespace zt = zcbm::testing;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;
};

// Records the first failure; later ones only bump the count.
class Check {
 public:
  void expect(bool ok, const std::string& what) {
    if (ok) return;
    if (failures_++ == 0) first_ = what;
  }
  Outcome outcome(const std::string& summary) const {
    if (failures_ == 0) return {true, summary};
    return {false, std::to_string(failures_) + " failure(s), first: " + first_};
  }

 private:
  int failures_ = 0;
  std::string first_;
};

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(3);
  os << v;
  return os.str();
}

RegressionProblem random_problem(std::mt19937_64& rng, int d, int K) {
  std::normal_distribution<double> g(0.0, 1.0);
  RegressionProblem p{Eigen::MatrixXd(d, K), Eigen::VectorXd(d)};
  for (int j = 0; j < K; ++j) {
    for (int i = 0; i < d; ++i) p.design(i, j) = g(rng);
    p.design.col(j).normalize();
  }
  for (int i = 0; i < d; ++i) p.target(i) = g(rng);
  p.target.normalize();
  return p;
}

double log_uniform(std::mt19937_64& rng, double lo_exp, double hi_exp) {
  return std::pow(10.0, std::uniform_real_distribution<double>(lo_exp, hi_exp)(rng));
}

using Clock = std::chrono::steady_clock;
double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

Outcome lasso_correctness() {
  Check c;
  const auto t0 = Clock::now();
  std::mt19937_64 rng(2024);
  double worst = 0.0;
  for (int t = 0; t < 200; ++t) {
    const auto p = random_problem(rng, 16, 32);
    const double lambda = log_uniform(rng, -5.0, 0.0);
    const auto w = lasso_cd(p, lambda);
    const double v = zt::kkt_oracle(p.design, p.target, w.w, lambda) / std::max(lambda, 1.0);
    worst = std::max(worst, v);
    c.expect(v <= 1e-6, "KKT violation " + fmt(v) + " on problem " + std::to_string(t));
  }
  double worst_gap = 0.0;
  for (int t = 0; t < 50; ++t) {
    const int K = 1 + t % 8;
    const int d = 2 + (t * 7) % 11;
    const auto p = random_problem(rng, d, K);
    const double lambda = log_uniform(rng, -4.0, 0.0);
    const auto w = lasso_cd(p, lambda);
    const auto best = zt::lasso_brute_force(p.design, p.target, lambda);
    const double gap =
        std::abs(zt::lasso_objective_oracle(p.design, p.target, w.w, lambda) - best.objective);
    worst_gap = std::max(worst_gap, gap);
    c.expect(gap <= 1e-6, "brute-force gap " + fmt(gap) + " on tiny problem " + std::to_string(t));
  }
  const double secs = seconds_since(t0);
  c.expect(secs < 10.0, "runtime " + fmt(secs) + " s");
  return c.outcome("max scaled KKT " + fmt(worst) + ", max objective gap " + fmt(worst_gap) +
                   ", " + fmt(secs) + " s");
}

Outcome solver_family() {
  Check c;
  const auto t0 = Clock::now();
  std::mt19937_64 rng(7);
  double worst = 0.0;
  for (int t = 0; t < 100; ++t) {
    const auto p = random_problem(rng, 16, 32);
    const double lambda = log_uniform(rng, -4.0, 0.0);
    const auto a = lasso_cd(p, lambda);
    const auto b = elastic_net_cd(p, lambda, 0.0);
    for (std::size_t j = 0; j < a.w.size(); ++j) worst = std::max(worst, std::abs(a.w[j] - b.w[j]));
  }
  c.expect(worst <= 1e-6, "elastic net vs lasso differs by " + fmt(worst));

  std::normal_distribution<double> g(0.0, 1.0);
  for (int t = 0; t < 100; ++t) {
    const auto p = random_problem(rng, 16, 32);
    const std::size_t s = 1 + static_cast<std::size_t>(t % 20);
    const auto h = htp(p, s);
    c.expect(h.nonzero_count <= s, "htp returned " + std::to_string(h.nonzero_count) + " > s");

    // orthonormal design: the answer is the top-s entries of F^T y
    const int d = 24, K = 16;
    Eigen::MatrixXd A(d, K);
    for (int i = 0; i < d; ++i)
      for (int j = 0; j < K; ++j) A(i, j) = g(rng);
    const Eigen::MatrixXd Q = Eigen::HouseholderQR<Eigen::MatrixXd>(A).householderQ() *
                              Eigen::MatrixXd::Identity(d, K);
    Eigen::VectorXd y(d);
    for (int i = 0; i < d; ++i) y(i) = g(rng);
    const std::size_t so = 1 + static_cast<std::size_t>(t % K);
    const auto ho = htp(RegressionProblem{Q, y}, so);
    const Eigen::VectorXd corr = Q.transpose() * y;
    std::vector<int> order(K);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return std::abs(corr(a)) > std::abs(corr(b)); });
    for (std::size_t r = 0; r < static_cast<std::size_t>(K); ++r) {
      const int j = order[r];
      const double expect = r < so ? corr(j) : 0.0;
      c.expect(std::abs(ho.w[j] - expect) <= 1e-9,
               "htp orthonormal coordinate " + std::to_string(j) + " off by " +
                   fmt(std::abs(ho.w[j] - expect)));
    }
  }
  const double secs = seconds_since(t0);
  c.expect(secs < 10.0, "runtime " + fmt(secs) + " s");
  return c.outcome("max |enet - lasso| " + fmt(worst) + ", htp oracle exact, " + fmt(secs) + " s");
}

Outcome retrieval_equivalence() {
  Check c;
  const auto t0 = Clock::now();
  std::mt19937_64 rng(99);
  std::size_t largest = 0;
  for (int b = 0; b < 50; ++b) {
    // sizes spread log-uniformly over [64, 10000], always including the extremes
    const std::size_t n = b == 0   ? 10000
                          : b == 1 ? 64
                                   : static_cast<std::size_t>(log_uniform(rng, 1.81, 4.0));
    largest = std::max(largest, n);
    EmbeddingMatrix rows(64, true);
    for (std::size_t i = 0; i < n; ++i) {
      if (i > 0 && rng() % 10 == 0) {
        auto r = rows.row(rng() % i);
        rows.append(std::vector<float>(r.begin(), r.end()));
      } else {
        rows.append(zt::random_unit(rng, 64));
      }
    }
    const std::size_t n_list = std::max<std::size_t>(1, static_cast<std::size_t>(std::sqrt(n) / 4));
    IvfIndex index = build_ivf(rows, n_list, 1000 + b);
    index.n_probe = index.n_list();
    for (int q = 0; q < 2; ++q) {
      const auto query = q == 0 ? std::vector<float>(rows.row(n / 2).begin(), rows.row(n / 2).end())
                                : zt::random_unit(rng, 64);
      for (std::size_t k : {std::size_t{1}, std::size_t{7}, std::size_t{64}, n}) {
        const auto oracle = zt::topk_naive(query, rows, k);
        c.expect(topk_exact(query, rows, k) == oracle,
                 "exact != oracle for bank " + std::to_string(b) + " k=" + std::to_string(k));
        c.expect(topk_ivf(query, rows, index, k) == oracle,
                 "ivf != oracle for bank " + std::to_string(b) + " k=" + std::to_string(k));
      }
    }
  }
  const double secs = seconds_since(t0);
  c.expect(secs < 30.0, "runtime " + fmt(secs) + " s");
  return c.outcome("50 banks up to N=" + std::to_string(largest) + ", exact and full-probe IVF " +
                   "match the sort oracle, " + fmt(secs) + " s");
}

SolverConfig lasso_config(double lambda) {
  SolverConfig cfg;
  cfg.kind = SolverKind::kLasso;
  cfg.lambda = lambda;
  return cfg;
}

Outcome synthetic_recovery(const zt::OrthoFixture& fx) {
  Check c;
  const auto t0 = Clock::now();
  const double lambda = 1e-4;
  std::size_t correct = 0;
  double worst = 0.0;
  for (std::size_t i = 0; i < fx.images.size(); ++i) {
    const auto p = infer(fx.images[i], fx.bank, fx.classes, 100, lasso_config(lambda));
    correct += p.label_id == fx.truths[i];
    const auto& triple = fx.class_concepts[static_cast<std::size_t>(fx.truths[i])];
    for (auto j : triple) {
      // on an orthonormal active set the lasso weight is soft(x_j, lambda/2)
      const double expect = soft_threshold(fx.images[i].values[j], lambda / 2.0);
      double got = 0.0;
      bool found = false;
      for (const auto& wc : p.concepts) {
        if (wc.bank_index == static_cast<std::int64_t>(j)) {
          got = wc.weight;
          found = true;
        }
      }
      c.expect(found, "sample " + std::to_string(i) + " misses concept " + std::to_string(j));
      worst = std::max(worst, std::abs(got - expect));
      c.expect(std::abs(got - expect) <= 0.02,
               "sample " + std::to_string(i) + " weight error " + fmt(std::abs(got - expect)));
    }
  }
  const double acc = static_cast<double>(correct) / static_cast<double>(fx.images.size());
  c.expect(correct == fx.images.size(), "accuracy " + fmt(acc));
  const double secs = seconds_since(t0);
  c.expect(secs < 60.0, "runtime " + fmt(secs) + " s");
  return c.outcome("accuracy " + fmt(acc) + " over " + std::to_string(fx.images.size()) +
                   " samples, max weight error " + fmt(worst) + ", " + fmt(secs) + " s");
}

Outcome intervention_properties(const zt::OrthoFixture& fx) {
  Check c;
  double min_margin = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < fx.images.size(); ++i) {
    const auto p = infer(fx.images[i], fx.bank, fx.classes, 100, lasso_config(1e-4));
    for (int r = 1; r <= 9; ++r) {
      const double ratio = r / 10.0;
      const double asc = reconstruction_error(
          intervene_delete(p, fx.classes, DeletionOrder::kAscending, ratio));
      const double desc = reconstruction_error(
          intervene_delete(p, fx.classes, DeletionOrder::kDescending, ratio));
      min_margin = std::min(min_margin, desc - asc);
      c.expect(desc >= asc - 1e-9, "sample " + std::to_string(i) + " ratio " + fmt(ratio) +
                                       ": descending " + fmt(desc) + " < ascending " + fmt(asc));
    }
  }

  // Corrupt each sample: the prediction uses another class's concepts.
  std::size_t corrected = 0;
  double worst_residual = 0.0;
  for (std::size_t i = 0; i < fx.images.size(); ++i) {
    const auto truth = static_cast<std::size_t>(fx.truths[i]);
    const std::size_t wrong = (truth + 1) % fx.class_concepts.size();
    std::vector<CandidateConcept> cands;
    EmbeddingMatrix rows(fx.dim, true);
    std::vector<std::size_t> idx;
    for (auto j : fx.class_concepts[wrong]) {
      cands.push_back({fx.bank.vocab[j], static_cast<std::int64_t>(j), ConceptSource::kRetrieved});
      rows.append(fx.bank.embeddings.row(j));
      idx.push_back(j);
    }
    ConceptWeights w;
    w.w = {1.0, 1.0, 1.0};
    w.recount();
    RetrievalSet rs;
    rs.indices = idx;
    rs.scores.assign(idx.size(), 0.0f);
    rs.k = idx.size();
    const Prediction bad =
        predict_from_weights(fx.images[i], cands, rows, w, rs, fx.classes);
    c.expect(bad.label_id != fx.truths[i], "corruption left sample " + std::to_string(i) + " correct");

    std::vector<InsertedConcept> gt;
    for (auto j : fx.class_concepts[truth]) {
      gt.push_back({fx.bank.vocab[j], fx.bank.embeddings.row_vector(j)});
    }
    const Prediction fixed = intervene_insert(bad, fx.classes, gt);
    const double res = reconstruction_error(fixed);
    worst_residual = std::max(worst_residual, res);
    c.expect(res < 1e-6, "residual " + fmt(res) + " on sample " + std::to_string(i));
    corrected += fixed.label_id == fx.truths[i];
  }
  c.expect(corrected == fx.images.size(),
           "insertion corrected " + std::to_string(corrected) + "/" +
               std::to_string(fx.images.size()));
  return c.outcome("deletion margin min " + fmt(min_margin) + "; insertion corrected " +
                   std::to_string(corrected) + "/" + std::to_string(fx.images.size()) +
                   ", max residual " + fmt(worst_residual));
}

Outcome metric_identities() {
  Check c;
  c.expect(concept_coverage({"red apple", "tree"}, {"red apple", "tree"}) == 1.0, "coverage(A,A)");
  ConceptWeights dense;
  dense.w = {0.1, -0.2, 0.3};
  dense.recount();
  c.expect(sparsity(dense) == 0.0, "dense sparsity");
  ConceptWeights half;
  half.w = {0, 0, 1, 2};
  half.recount();
  c.expect(sparsity(half, 4) == 0.5, "sparsity of (0,0,1,2)");
  EmbeddingMatrix same(3, true);
  const std::vector<float> img{0.6f, 0.8f, 0.0f};
  same.append(img);
  same.append(img);
  ConceptWeights two;
  two.w = {0.4, 0.7};
  two.recount();
  c.expect(clip_score(img, same, two) == 1.0, "clip_score of identical vectors");
  const auto set = zt::random_unit_rows(12, 8, 5);
  c.expect(modality_gap(set, set) == 0.0, "modality_gap of identical sets");
  return c.outcome("coverage, sparsity, clip_score and modality_gap identities exact");
}

Outcome format_round_trip() {
  Check c;
  const auto dir = zt::temp_dir("acceptance-format");
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed);
    const std::size_t dim = 1 + rng() % 100;
    const std::size_t n = rng() % 50;
    std::vector<float> data(dim * n);
    std::uniform_int_distribution<std::uint32_t> bits;
    for (auto& x : data) {
      std::uint32_t b = bits(rng);
      std::memcpy(&x, &b, sizeof x);  // arbitrary bit patterns, NaNs included
    }
    const EmbeddingMatrix m(dim, n, data, seed % 2 == 0);
    const auto path = dir / ("m" + std::to_string(seed) + ".zcbm");
    save_matrix(m, path);
    const auto back = load_matrix(path);
    c.expect(back.dim() == dim && back.count() == n && back.normalized() == m.normalized() &&
                 std::memcmp(back.data().data(), data.data(), data.size() * sizeof(float)) == 0,
             "round trip " + std::to_string(seed));
    c.expect(read_file_bytes(path) == encode_matrix(back), "re-encode " + std::to_string(seed));
  }
  const fs::path golden(ZCBM_GOLDEN_DIR);
  const EmbeddingMatrix g(3, 2, {0.6f, 0.8f, 0.0f, 0.0f, 0.0f, 1.0f}, true);
  c.expect(encode_matrix(g) == read_file_bytes(golden / "matrix_2x3.zcbm"), "golden bytes");
  c.expect(load_matrix(golden / "matrix_2x3.zcbm") == g, "golden decode");
  const std::pair<const char*, ErrorCode> bad[] = {
      {"bad_magic.zcbm", ErrorCode::kBadMagic},
      {"truncated_rows.zcbm", ErrorCode::kTruncatedFile},
      {"truncated_header.zcbm", ErrorCode::kTruncatedFile},
      {"bad_version.zcbm", ErrorCode::kUnsupportedVersion},
      {"bad_dtype.zcbm", ErrorCode::kUnsupportedVersion},
      {"trailing_bytes.zcbm", ErrorCode::kDimMismatch}};
  for (const auto& [file, code] : bad) {
    std::string got = "no error";
    try {
      load_matrix(golden / file);
    } catch (const Error& e) {
      got = std::string(to_string(e.code()));
    }
    c.expect(got == to_string(code), std::string(file) + " gave " + got);
  }
  fs::remove_all(dir);
  return c.outcome("10 random matrices bit-exact, golden bytes match, 6 corrupt files rejected");
}

Outcome dedup_oracle() {
  Check c;
  std::size_t removed = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed + 500);
    const std::size_t n = 20 + rng() % 481;
    const std::size_t dim = 8 + rng() % 25;
    std::normal_distribution<float> noise(0.0f, 0.15f);
    EmbeddingMatrix rows(dim, true);
    std::vector<std::string> vocab;
    for (std::size_t i = 0; i < n; ++i) {
      if (i > 0 && rng() % 3 == 0) {
        auto base = rows.row(rng() % i);
        std::vector<float> v(base.begin(), base.end());
        for (auto& x : v) x += noise(rng);
        rows.append(normalize(v).values);
      } else {
        rows.append(zt::random_unit(rng, dim));
      }
      vocab.push_back("concept " + std::to_string(i));
    }
    const double threshold = 0.85 + 0.01 * static_cast<double>(seed % 10);
    const auto bank = make_bank(vocab, rows);
    const auto expect = zt::dedup_brute_force(rows, threshold);
    const auto got = dedup_similar(bank, threshold, n);
    std::vector<std::string> expect_vocab;
    for (auto i : expect) expect_vocab.push_back(vocab[i]);
    c.expect(got.vocab == expect_vocab, "seed " + std::to_string(seed) + " differs");
    removed += n - expect.size();
  }
  return c.outcome("20 seeds match the O(N^2) greedy oracle (" + std::to_string(removed) +
                   " near-duplicates removed)");
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

Outcome determinism(const zt::OrthoFixture& fx) {
  Check c;
  const auto dir = zt::temp_dir("acceptance-determinism");
  zt::write_fixture_files(fx, dir);
  auto run = [&](const std::string& out) {
    const std::string cmd =
        std::string("'") + ZCBM_CLI_PATH + "' infer --bank '" + (dir / "bank").string() +
        "' --classes '" + (dir / "classes.json").string() + "' --class-embeddings '" +
        (dir / "class_embeddings.zcbm").string() + "' --images '" + (dir / "images.zcbm").string() +
        "' --k 100 --lambda 0.0001 --class-scores --out '" + (dir / out).string() + "'";
    return std::system(cmd.c_str());
  };
  c.expect(run("a.jsonl") == 0, "first run failed");
  c.expect(run("b.jsonl") == 0, "second run failed");
  const auto a = slurp(dir / "a.jsonl");
  const auto b = slurp(dir / "b.jsonl");
  const auto lines = std::count(a.begin(), a.end(), '\n');
  c.expect(lines == static_cast<long>(fx.images.size()), "expected one line per image");
  c.expect(a == b, "outputs differ");
  fs::remove_all(dir);
  return c.outcome("two runs byte-identical (" + std::to_string(a.size()) + " bytes, " +
                   std::to_string(lines) + " records)");
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

Outcome benchmark_sanity() {
  Check c;
  const std::size_t n = 100000, dim = 64;
  const auto bank = zt::random_bank(n, dim, 77);
  std::mt19937_64 rng(78);
  std::vector<EmbeddingVector> samples;
  for (int i = 0; i < 8; ++i) samples.push_back(normalize(zt::random_unit(rng, dim)));
  EmbeddingMatrix protos(dim, true);
  std::vector<ClassLabel> labels;
  for (int i = 0; i < 10; ++i) {
    protos.append(zt::random_unit(rng, dim));
    labels.push_back({i, "class " + std::to_string(i), ""});
  }
  const auto classes = make_class_set(labels, protos);
  const std::vector<std::size_t> grid{128, 256, 512, 1024, 2048};

  // Rounds interleave the grid so drift affects every k alike; the median
  // over rounds is the estimate.
  BenchmarkOptions opt;
  opt.warmup = 3;
  const int rounds = 5;
  std::vector<std::vector<double>> retrieval(grid.size());
  double worst_gap = 0.0;
  for (int r = 0; r < rounds; ++r) {
    const auto rows = benchmark_inference(bank, samples, classes, grid, opt);
    for (std::size_t g = 0; g < grid.size(); ++g) {
      const auto& row = rows[g];
      const double stages = row.retrieval_ms + row.regression_ms + row.prediction_ms;
      const double gap = std::abs(row.total_ms - stages) / row.total_ms;
      worst_gap = std::max(worst_gap, gap);
      c.expect(gap <= 0.05, "k=" + std::to_string(row.k) + " stages " + fmt(stages) +
                                " ms vs total " + fmt(row.total_ms) + " ms");
      retrieval[g].push_back(row.retrieval_ms);
    }
  }
  std::string trend;
  double prev = 0.0;
  for (std::size_t g = 0; g < grid.size(); ++g) {
    const double m = median(retrieval[g]);
    trend += (g ? " " : "") + fmt(m);
    c.expect(m >= prev, "retrieval median drops at k=" + std::to_string(grid[g]) + " (" +
                            fmt(prev) + " -> " + fmt(m) + " ms)");
    prev = m;
  }
  return c.outcome("max stage/total gap " + fmt(100 * worst_gap) +
                   "%, median retrieval ms over k-grid: " + trend);
}

}  // namespace

int main() {
  const auto fx = zt::make_ortho_fixture(2025, 200);
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"lasso correctness", lasso_correctness},
      {"solver family", solver_family},
      {"retrieval equivalence", retrieval_equivalence},
      {"end-to-end synthetic recovery", [&] { return synthetic_recovery(fx); }},
      {"intervention properties", [&] { return intervention_properties(fx); }},
      {"metric identities", metric_identities},
      {"format round-trip", format_round_trip},
      {"bank dedup oracle", dedup_oracle},
      {"determinism", [&] { return determinism(fx); }},
      {"benchmark harness sanity", benchmark_sanity},
  };
  int failed = 0;
  for (const auto& [name, fn] : criteria) {
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS " : "FAIL ") << name << ": " << o.detail << std::endl;
  }
  std::cout << (criteria.size() - failed) << "/" << criteria.size() << " criteria passed"
            << std::endl;
  return failed == 0 ? 0 : 1;
}
