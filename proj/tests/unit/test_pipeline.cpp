#include <doctest.h>

#include <Eigen/Dense>
#include <fstream>
#include <map>
#include <random>

#include "fixtures.hpp"
#include "zcbm/error.hpp"
#include "zcbm/pipeline.hpp"

using namespace zcbm;
namespace zt = zcbm::testing;

namespace {

std::vector<float> basis(std::size_t dim, std::size_t i) {
  std::vector<float> v(dim, 0.0f);
  v[i] = 1.0f;
  return v;
}

ClassSet classes_from(const std::vector<std::vector<float>>& rows,
                      std::vector<int> ids = {}) {
  std::vector<ClassLabel> labels;
  EmbeddingMatrix m(rows.front().size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const int id = ids.empty() ? static_cast<int>(i) : ids[i];
    labels.push_back({id, "c" + std::to_string(id), ""});
    m.append(rows[i]);
  }
  return make_class_set(std::move(labels), std::move(m));
}

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("no error thrown");
  return ErrorCode::kInvalidArgument;
}

SolverConfig lasso(double lambda) {
  SolverConfig cfg;
  cfg.lambda = lambda;
  return cfg;
}

double cosine_d(const std::vector<double>& a, std::span<const float> b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += static_cast<double>(b[i]) * b[i];
  }
  return ab / std::sqrt(aa * bb);
}

// Bank whose first `n_basis` rows are e_0.. and the rest random.
ConceptBank basis_bank(std::size_t dim, std::size_t n_basis, std::size_t n_random,
                       std::uint64_t seed) {
  std::vector<std::string> vocab;
  EmbeddingMatrix rows(dim, true);
  for (std::size_t i = 0; i < n_basis; ++i) {
    vocab.push_back("basis " + std::to_string(i));
    rows.append(basis(dim, i));
  }
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < n_random; ++i) {
    vocab.push_back("random " + std::to_string(i));
    rows.append(zt::random_unit(rng, dim));
  }
  return make_bank(std::move(vocab), std::move(rows));
}

}  // namespace

TEST_CASE("zero-shot baseline") {
  const std::size_t d = 8;
  SUBCASE("exact match") {
    std::vector<std::vector<float>> rows;
    for (std::size_t i = 0; i < 5; ++i) rows.push_back(basis(d, i));
    const auto classes = classes_from(rows);
    const auto z = zero_shot_baseline(std::span<const float>(rows[3]), classes);
    CHECK(z.label_id == 3);
    CHECK(z.class_scores[3] == doctest::Approx(1.0));
  }
  SUBCASE("ties go to the lowest label id") {
    const auto classes = classes_from({basis(d, 1), basis(d, 1)}, {7, 2});
    CHECK(zero_shot_baseline(std::span<const float>(basis(d, 1)), classes).label_id == 2);
  }
  SUBCASE("orthogonal input") {
    const auto classes = classes_from({basis(d, 1), basis(d, 2), basis(d, 3)});
    const auto z = zero_shot_baseline(std::span<const float>(basis(d, 0)), classes);
    CHECK(z.label_id == 0);
    CHECK(z.class_scores[0] == 0.0);
  }
  SUBCASE("errors") {
    CHECK(code_of([&] { zero_shot_baseline(std::span<const float>(basis(d, 0)), ClassSet{}); }) ==
          ErrorCode::kEmptyClassSet);
    CHECK(code_of([&] { make_class_set({}, EmbeddingMatrix(d)); }) == ErrorCode::kEmptyClassSet);
    const auto classes = classes_from({basis(d, 1)});
    CHECK(code_of([&] { zero_shot_baseline(std::span<const float>(basis(4, 0)), classes); }) ==
          ErrorCode::kDimensionMismatch);
    CHECK(code_of([&] { classes_from({basis(d, 1), basis(d, 2)}, {1, 1}); }) ==
          ErrorCode::kInvalidArgument);
  }
}

TEST_CASE("infer examples") {
  const std::size_t d = 32;
  SUBCASE("input present in the bank") {
    std::mt19937_64 rng(11);
    const auto x = normalize(zt::random_unit(rng, d));
    auto bank = zt::random_bank(200, d, 12);
    std::vector<std::string> vocab{"self"};
    EmbeddingMatrix rows(d, true);
    rows.append(x.values);
    for (std::size_t i = 0; i < bank.size(); ++i) {
      vocab.push_back(bank.vocab[i]);
      rows.append(bank.embeddings.row(i));
    }
    const auto with_self = make_bank(vocab, rows);
    const auto classes = classes_from({zt::random_unit(rng, d), zt::random_unit(rng, d)});
    const auto p = infer(x, with_self, classes, 16, lasso(1e-4));
    REQUIRE_FALSE(p.concepts.empty());
    CHECK(p.concepts.front().text == "self");
    CHECK(p.concepts.front().bank_index == 0);
    CHECK(cosine_d(p.reconstructed, x.values) > 0.999);
  }
  SUBCASE("single class") {
    const auto bank = zt::random_bank(50, d, 3);
    const auto classes = classes_from({basis(d, 0)}, {42});
    std::mt19937_64 rng(4);
    for (int t = 0; t < 5; ++t) {
      CHECK(infer(normalize(zt::random_unit(rng, d)), bank, classes, 10, lasso(1e-3)).label_id ==
            42);
    }
  }
  SUBCASE("two orthogonal concepts") {
    const auto bank = basis_bank(d, 2, 100, 5);
    std::vector<float> x(d, 0.0f);
    x[0] = 0.6f;
    x[1] = 0.8f;
    const auto classes = classes_from({basis(d, 0), basis(d, 1)});
    for (std::size_t k : {2u, 8u}) {
      const auto p = infer(normalize(x), bank, classes, k, lasso(1e-4));
      std::map<std::int64_t, double> w;
      for (const auto& c : p.concepts) w[c.bank_index] = c.weight;
      CHECK(std::abs(w[0] - 0.6) <= 0.01);
      CHECK(std::abs(w[1] - 0.8) <= 0.01);
      CHECK(reconstruction_error(p) < 0.02);
      CHECK(p.label_id == 1);
      CHECK_FALSE(p.fallback);
    }
  }
  SUBCASE("unnormalized input is normalized first") {
    const auto bank = basis_bank(d, 2, 20, 6);
    const auto classes = classes_from({basis(d, 0), basis(d, 1)});
    std::vector<float> x(d, 0.0f);
    x[0] = 3.0f;
    x[1] = 4.0f;
    const auto a = infer(EmbeddingVector{x, false}, bank, classes, 4, lasso(1e-4));
    const auto b = infer(normalize(x), bank, classes, 4, lasso(1e-4));
    CHECK(a.weights.w == b.weights.w);
    CHECK(a.input.values == b.input.values);
  }
  SUBCASE("huge lambda falls back to zero-shot") {
    const auto bank = basis_bank(d, 2, 20, 7);
    const auto classes = classes_from({basis(d, 0), basis(d, 1)});
    std::vector<float> x(d, 0.0f);
    x[1] = 1.0f;
    const auto p = infer(normalize(x), bank, classes, 4, lasso(100.0));
    CHECK(p.fallback);
    CHECK(p.concepts.empty());
    CHECK(p.label_id == 1);
  }
  SUBCASE("dimension errors") {
    const auto bank = zt::random_bank(10, d, 1);
    const auto classes = classes_from({basis(d, 0)});
    CHECK(code_of([&] { infer(normalize(basis(4, 0)), bank, classes, 2, lasso(1e-3)); }) ==
          ErrorCode::kDimensionMismatch);
    const auto small = classes_from({basis(4, 0)});
    CHECK(code_of([&] { infer(normalize(basis(d, 0)), bank, small, 2, lasso(1e-3)); }) ==
          ErrorCode::kDimensionMismatch);
  }
}

TEST_CASE("prediction invariants hold on random inputs") {
  const auto fx = zt::make_ortho_fixture(21, 40);
  std::mt19937_64 rng(22);
  std::vector<EmbeddingVector> inputs = fx.images;
  for (int i = 0; i < 20; ++i) inputs.push_back(normalize(zt::random_unit(rng, fx.dim)));
  for (SolverKind kind : {SolverKind::kLasso, SolverKind::kElasticNet, SolverKind::kHtp,
                          SolverKind::kLeastSquares, SolverKind::kSimilarity}) {
    SolverConfig cfg;
    cfg.kind = kind;
    cfg.lambda = 1e-3;
    cfg.l2_weight = 1e-3;
    cfg.s = 5;
    for (const auto& x : inputs) {
      const auto p = infer(x, fx.bank, fx.classes, 32, cfg);
      // label = zero-shot of the reconstruction
      if (!p.fallback) {
        CHECK(p.label_id ==
              zero_shot_baseline(std::span<const double>(p.reconstructed), fx.classes).label_id);
      }
      CHECK(p.concepts.size() == p.weights.nonzero_count);
      for (std::size_t i = 1; i < p.concepts.size(); ++i) {
        CHECK(std::abs(p.concepts[i - 1].weight) >= std::abs(p.concepts[i].weight));
      }
      // reconstruction is recomputable and lies in the span of the candidates
      Eigen::MatrixXd F(fx.dim, p.candidate_embeddings.count());
      Eigen::VectorXd w(p.candidate_embeddings.count());
      for (std::size_t j = 0; j < p.candidate_embeddings.count(); ++j) {
        for (std::size_t i = 0; i < fx.dim; ++i) F(i, j) = p.candidate_embeddings.row(j)[i];
        w(j) = p.weights.w[j];
      }
      const Eigen::VectorXd r = Eigen::Map<const Eigen::VectorXd>(p.reconstructed.data(), fx.dim);
      CHECK((F * w - r).cwiseAbs().maxCoeff() <= 1e-6);
      const Eigen::VectorXd proj = F * F.completeOrthogonalDecomposition().solve(r);
      CHECK((r - proj).norm() < 1e-6);
      // fixture label ids equal class positions
      CHECK(p.class_scores[p.label_id] ==
            *std::max_element(p.class_scores.begin(), p.class_scores.end()));
    }
  }
}

TEST_CASE("infer is deterministic") {
  const auto bank = zt::random_bank(500, 16, 31);
  std::mt19937_64 rng(32);
  const auto classes = classes_from({zt::random_unit(rng, 16), zt::random_unit(rng, 16)});
  for (int t = 0; t < 10; ++t) {
    const auto x = normalize(zt::random_unit(rng, 16));
    const auto a = infer(x, bank, classes, 64, lasso(1e-3));
    const auto b = infer(x, bank, classes, 64, lasso(1e-3));
    CHECK(a.weights.w == b.weights.w);
    CHECK(a.retrieval == b.retrieval);
    CHECK(a.reconstructed == b.reconstructed);
    CHECK(a.label_id == b.label_id);
  }
}

TEST_CASE("lambda selection") {
  CHECK(select_lambda({1e-2, 1e-5}, {0.01, 0.30}, 0.10).lambda == 1e-5);
  const auto all = select_lambda({1e-2, 1e-3, 1e-4}, {0.9, 0.9, 0.9}, 0.10);
  CHECK(all.lambda == 1e-2);
  CHECK_FALSE(all.no_qualifier);
  const auto none = select_lambda({1e-2, 1e-3}, {0.01, 0.05}, 0.10);
  CHECK(none.lambda == 1e-3);
  CHECK(none.no_qualifier);
  // strictly greater than the target
  CHECK(select_lambda({1e-2, 1e-3}, {0.10, 0.2}, 0.10).lambda == 1e-3);
  CHECK(code_of([] { select_lambda({}, {}, 0.1); }) == ErrorCode::kInvalidArgument);
  CHECK(code_of([] { select_lambda({1e-2}, {}, 0.1); }) == ErrorCode::kLengthMismatch);
}

TEST_CASE("lambda calibration") {
  const auto fx = zt::make_ortho_fixture(41, 20);
  const std::vector<double> grid{1e-1, 1e-2, 1e-3, 1e-4, 1e-5};
  const auto r = calibrate_lambda(fx.images, fx.bank, 30, grid, 0.05);
  REQUIRE(r.mean_ratios.size() == grid.size());
  CHECK_FALSE(r.no_qualifier);
  for (std::size_t i = 0; i < grid.size(); ++i) {
    if (r.mean_ratios[i] > 0.05) CHECK(grid[i] <= r.lambda);
  }
  // recompute one grid point directly
  double total = 0.0;
  for (const auto& x : fx.images) {
    total += static_cast<double>(infer(x, fx.bank, fx.classes, 30, lasso(1e-3)).weights.nonzero_count) / 30.0;
  }
  CHECK(r.mean_ratios[2] == doctest::Approx(total / fx.images.size()).epsilon(1e-12));

  CHECK(code_of([&] { calibrate_lambda({}, fx.bank, 30, grid, 0.1); }) ==
        ErrorCode::kEmptySamples);
  CHECK(code_of([&] { calibrate_lambda(fx.images, fx.bank, 30, {}, 0.1); }) ==
        ErrorCode::kInvalidArgument);
  CHECK(code_of([&] { calibrate_lambda(fx.images, fx.bank, 30, grid, 1.0); }) ==
        ErrorCode::kInvalidArgument);
}

TEST_CASE("deletion") {
  const auto fx = zt::make_ortho_fixture(51, 30);
  SUBCASE("ratio 0 is a no-op and ratio 1 falls back") {
    const auto p = infer(fx.images[0], fx.bank, fx.classes, 20, lasso(1e-4));
    const auto same = intervene_delete(p, fx.classes, DeletionOrder::kDescending, 0.0);
    CHECK(same.weights.w == p.weights.w);
    CHECK(same.label_id == p.label_id);
    CHECK(same.reconstructed == p.reconstructed);
    const auto gone = intervene_delete(p, fx.classes, DeletionOrder::kAscending, 1.0);
    CHECK(gone.fallback);
    CHECK(gone.weights.nonzero_count == 0);
  }
  SUBCASE("count is floor(ratio * n)") {
    const auto p = infer(fx.images[1], fx.bank, fx.classes, 3, lasso(1e-4));
    REQUIRE(p.weights.nonzero_count == 3);
    CHECK(intervene_delete(p, fx.classes, DeletionOrder::kDescending, 0.5).weights.nonzero_count ==
          2);
    CHECK(intervene_delete(p, fx.classes, DeletionOrder::kDescending, 0.7).weights.nonzero_count ==
          1);
    const auto asc = intervene_delete(p, fx.classes, DeletionOrder::kAscending, 0.34);
    CHECK(std::abs(asc.concepts.front().weight) == std::abs(p.concepts.front().weight));
    const auto desc = intervene_delete(p, fx.classes, DeletionOrder::kDescending, 0.34);
    CHECK(desc.concepts.front().text == p.concepts[1].text);
  }
  SUBCASE("no re-fit of the survivors") {
    const auto p = infer(fx.images[2], fx.bank, fx.classes, 3, lasso(1e-4));
    const auto q = intervene_delete(p, fx.classes, DeletionOrder::kAscending, 0.5);
    for (const auto& c : q.concepts) CHECK(c.weight == p.weights.w[c.position]);
  }
  SUBCASE("random order is seeded") {
    const auto p = infer(fx.images[3], fx.bank, fx.classes, 40, lasso(1e-4));
    const auto a = intervene_delete(p, fx.classes, DeletionOrder::kRandom, 0.5, 9);
    const auto b = intervene_delete(p, fx.classes, DeletionOrder::kRandom, 0.5, 9);
    CHECK(a.weights.w == b.weights.w);
  }
  SUBCASE("descending removes at least as much energy on orthonormal supports") {
    for (std::size_t i = 0; i < fx.images.size(); ++i) {
      const auto p = infer(fx.images[i], fx.bank, fx.classes, 3, lasso(1e-4));
      for (double ratio : {0.0, 0.34, 0.5, 0.67, 1.0}) {
        const double asc =
            reconstruction_error(intervene_delete(p, fx.classes, DeletionOrder::kAscending, ratio));
        const double desc = reconstruction_error(
            intervene_delete(p, fx.classes, DeletionOrder::kDescending, ratio));
        CHECK(desc >= asc - 1e-9);
      }
    }
  }
  CHECK(code_of([&] {
          const auto p = infer(fx.images[0], fx.bank, fx.classes, 5, lasso(1e-4));
          intervene_delete(p, fx.classes, DeletionOrder::kAscending, 1.5);
        }) == ErrorCode::kInvalidArgument);
  CHECK(parse_deletion_order("random") == DeletionOrder::kRandom);
  CHECK(code_of([] { parse_deletion_order("sideways"); }) == ErrorCode::kInvalidArgument);
}

TEST_CASE("insertion") {
  const std::size_t d = 16;
  std::mt19937_64 rng(61);
  const auto bank = zt::random_bank(300, d, 62);
  const auto classes = classes_from({zt::random_unit(rng, d), zt::random_unit(rng, d)});
  const auto x = normalize(zt::random_unit(rng, d));
  const auto p = infer(x, bank, classes, 8, lasso(1e-2));
  REQUIRE(p.weights.nonzero_count >= 1);

  SUBCASE("already present concept leaves the set unchanged") {
    const auto& top = p.concepts.front();
    const InsertedConcept dup{"  " + top.text + " ", bank.embeddings.row_vector(top.bank_index)};
    const auto q = intervene_insert(p, classes, {dup});
    const auto base = intervene_insert(p, classes, {});
    CHECK(q.candidates.size() == p.weights.nonzero_count);
    CHECK(q.weights.w == base.weights.w);
  }
  SUBCASE("inserting the input itself") {
    const auto q = intervene_insert(p, classes, {{"the answer", x}});
    CHECK(cosine_d(q.reconstructed, x.values) > 0.999);
    CHECK(q.candidates.back().source == ConceptSource::kInserted);
    CHECK(q.candidates.back().bank_index == -1);
  }
  SUBCASE("residual never increases") {
    double prev = reconstruction_error(intervene_insert(p, classes, {}));
    std::vector<InsertedConcept> added;
    for (int t = 0; t < 12; ++t) {
      added.push_back({"extra " + std::to_string(t), normalize(zt::random_unit(rng, d))});
      const double err = reconstruction_error(intervene_insert(p, classes, added));
      CHECK(err <= prev + 1e-8);
      prev = err;
    }
    CHECK(prev < 1e-8);  // d columns span the space
  }
  SUBCASE("dimension mismatch") {
    CHECK(code_of([&] { intervene_insert(p, classes, {{"bad", normalize(basis(d + 1, 0))}}); }) ==
          ErrorCode::kDimensionMismatch);
  }
}

TEST_CASE("class label files") {
  const auto dir = zt::temp_dir("classes");
  std::ofstream(dir / "ok.json") << R"([{"label_id": 3, "name": "cat"},
    {"label_id": 1, "name": "dog", "prompt": "a dog"}])";
  const auto labels = load_class_labels(dir / "ok.json");
  REQUIRE(labels.size() == 2);
  CHECK(labels[0].prompt == "a photo of cat");
  CHECK(labels[1].prompt == "a dog");
  std::ofstream(dir / "dup.json") << R"([{"label_id": 1, "name": "a"}, {"label_id": 1, "name": "b"}])";
  CHECK(code_of([&] { load_class_labels(dir / "dup.json"); }) == ErrorCode::kInvalidArgument);
  std::ofstream(dir / "bad.json") << "{";
  CHECK(code_of([&] { load_class_labels(dir / "bad.json"); }) == ErrorCode::kInvalidArgument);
  CHECK(code_of([&] { load_class_labels(dir / "missing.json"); }) == ErrorCode::kIo);
}
