#include "fixtures.hpp"

#include <algorithm>
#include <atomic>
#include <fstream>
#include <unistd.h>

#include <json.hpp>

namespace zcbm::testing {

std::vector<float> random_unit(std::mt19937_64& rng, std::size_t dim) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<float> v(dim);
  for (;;) {
    for (auto& x : v) x = static_cast<float>(gauss(rng));
    if (l2_norm(v) > 1e-3) return normalize(v).values;
  }
}

EmbeddingMatrix random_unit_rows(std::size_t n, std::size_t dim, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  EmbeddingMatrix m(dim, true);
  m.reserve(n);
  for (std::size_t i = 0; i < n; ++i) m.append(random_unit(rng, dim));
  return m;
}

ConceptBank random_bank(std::size_t n, std::size_t dim, std::uint64_t seed,
                        const std::string& prefix) {
  std::vector<std::string> vocab;
  vocab.reserve(n);
  for (std::size_t i = 0; i < n; ++i) vocab.push_back(prefix + " " + std::to_string(i));
  return make_bank(std::move(vocab), random_unit_rows(n, dim, seed), "random");
}

OrthoFixture make_ortho_fixture(std::uint64_t seed, std::size_t n_samples, std::size_t dim,
                                std::size_t n_distractors, std::size_t n_classes) {
  std::mt19937_64 rng(seed);
  OrthoFixture fx;
  fx.dim = dim;

  std::vector<std::string> vocab;
  EmbeddingMatrix rows(dim, true);
  for (std::size_t i = 0; i < dim; ++i) {
    std::vector<float> e(dim, 0.0f);
    e[i] = 1.0f;
    rows.append(e);
    vocab.push_back("basis " + std::to_string(i));
  }
  for (std::size_t i = 0; i < n_distractors; ++i) {
    rows.append(random_unit(rng, dim));
    vocab.push_back("distractor " + std::to_string(i));
  }
  fx.bank = make_bank(std::move(vocab), std::move(rows), "ortho");

  std::vector<std::size_t> basis(dim);
  for (std::size_t i = 0; i < dim; ++i) basis[i] = i;
  std::shuffle(basis.begin(), basis.end(), rng);
  std::vector<ClassLabel> labels;
  EmbeddingMatrix protos(dim, true);
  for (std::size_t c = 0; c < n_classes; ++c) {
    const std::array<std::size_t, 3> triple{basis[3 * c], basis[3 * c + 1], basis[3 * c + 2]};
    fx.class_concepts.push_back(triple);
    std::vector<float> p(dim, 0.0f);
    for (auto j : triple) p[j] = 1.0f;
    protos.append(normalize(p).values);
    labels.push_back({static_cast<int>(c), "class " + std::to_string(c),
                      default_class_prompt("class " + std::to_string(c))});
  }
  fx.classes = make_class_set(std::move(labels), std::move(protos));

  std::uniform_int_distribution<std::size_t> pick_class(0, n_classes - 1);
  std::uniform_real_distribution<double> pick_weight(0.3, 1.0);
  for (std::size_t i = 0; i < n_samples; ++i) {
    const std::size_t c = pick_class(rng);
    std::array<double, 3> w{};
    std::vector<float> x(dim, 0.0f);
    for (std::size_t t = 0; t < 3; ++t) {
      w[t] = pick_weight(rng);
      x[fx.class_concepts[c][t]] = static_cast<float>(w[t]);
    }
    fx.images.push_back(normalize(x));
    fx.truths.push_back(static_cast<int>(c));
    fx.raw_weights.push_back(w);
  }
  return fx;
}

EmbeddingMatrix to_matrix(const std::vector<EmbeddingVector>& rows) {
  EmbeddingMatrix m(rows.empty() ? 0 : rows.front().dim(), true);
  for (const auto& r : rows) m.append(r.values);
  return m;
}

void write_fixture_files(const OrthoFixture& fx, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  save_bank(fx.bank, dir / "bank");
  nlohmann::json classes = nlohmann::json::array();
  for (const auto& l : fx.classes.labels) {
    classes.push_back({{"label_id", l.label_id}, {"name", l.name}, {"prompt", l.prompt}});
  }
  std::ofstream(dir / "classes.json") << classes.dump(2) << "\n";
  save_matrix(fx.classes.embeddings, dir / "class_embeddings.zcbm");
  save_matrix(to_matrix(fx.images), dir / "images.zcbm");
  std::ofstream truths(dir / "truths.txt");
  for (int t : fx.truths) truths << t << "\n";
}

std::filesystem::path temp_dir(const std::string& tag) {
  static std::atomic<int> counter{0};
  const auto dir = std::filesystem::temp_directory_path() /
                   ("zcbm-" + tag + "-" + std::to_string(::getpid()) + "-" +
                    std::to_string(counter++));
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace zcbm::testing
