#include "zcbm/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <fstream>
#include <json.hpp>
#include <mutex>
#include <numeric>
#include <random>
#include <unordered_set>

#include "zcbm/error.hpp"

namespace zcbm {

namespace {

struct Scored {
  float score;
  std::size_t index;
};

// Strict "ranks ahead of": higher score first, then lower index.
inline bool ahead(const Scored& a, const Scored& b) {
  return a.score > b.score || (a.score == b.score && a.index < b.index);
}

class BoundedTopK {
 public:
  explicit BoundedTopK(std::size_t k) : k_(k) { heap_.reserve(k); }

  void offer(float score, std::size_t index) {
    const Scored s{score, index};
    if (heap_.size() < k_) {
      heap_.push_back(s);
      std::push_heap(heap_.begin(), heap_.end(), ahead);
    } else if (ahead(s, heap_.front())) {
      // front() is the worst retained entry.
      std::pop_heap(heap_.begin(), heap_.end(), ahead);
      heap_.back() = s;
      std::push_heap(heap_.begin(), heap_.end(), ahead);
    }
  }

  RetrievalSet finish(std::size_t requested_k) && {
    std::sort_heap(heap_.begin(), heap_.end(), ahead);
    RetrievalSet out;
    out.k = requested_k;
    out.indices.reserve(heap_.size());
    out.scores.reserve(heap_.size());
    for (const auto& s : heap_) {
      out.indices.push_back(s.index);
      out.scores.push_back(s.score);
    }
    return out;
  }

 private:
  std::size_t k_;
  std::vector<Scored> heap_;
};

void check_query(std::span<const float> query, const EmbeddingMatrix& rows, std::size_t k) {
  if (rows.empty()) fail(ErrorCode::kEmptyBank, "retrieval over an empty bank");
  if (query.size() != rows.dim()) {
    fail(ErrorCode::kDimensionMismatch, "query dimension " + std::to_string(query.size()) +
                                            " != bank dimension " + std::to_string(rows.dim()));
  }
  if (k == 0) fail(ErrorCode::kInvalidArgument, "k must be >= 1");
}

inline float score_row(std::span<const float> query, const EmbeddingMatrix& rows,
                       std::size_t i) {
  const float* r = rows.data().data() + i * rows.dim();
  double acc = 0.0;
  for (std::size_t j = 0; j < query.size(); ++j) {
    acc += static_cast<double>(query[j]) * static_cast<double>(r[j]);
  }
  return static_cast<float>(acc);
}

// Best centroid by cosine, ties to the lower centroid id.
std::size_t nearest_centroid(std::span<const float> v, const EmbeddingMatrix& centroids) {
  std::size_t best = 0;
  double best_score = -std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < centroids.count(); ++c) {
    const double s = dot(v, centroids.row(c));
    if (s > best_score) {
      best_score = s;
      best = c;
    }
  }
  return best;
}

std::vector<std::size_t> kmeanspp_seeds(const EmbeddingMatrix& rows, std::size_t n_list,
                                        std::mt19937_64& rng) {
  const std::size_t n = rows.count();
  std::vector<std::size_t> seeds;
  seeds.reserve(n_list);
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  seeds.push_back(pick(rng));

  // Squared chordal distance to the nearest chosen seed: 2 - 2cos.
  std::vector<double> d2(n);
  std::vector<bool> chosen(n, false);
  chosen[seeds[0]] = true;
  for (std::size_t i = 0; i < n; ++i) {
    d2[i] = std::max(0.0, 2.0 - 2.0 * dot(rows.row(i), rows.row(seeds[0])));
  }
  while (seeds.size() < n_list) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) total += chosen[i] ? 0.0 : d2[i];
    std::size_t next = n;
    if (total > 0.0) {
      std::uniform_real_distribution<double> u(0.0, total);
      double target = u(rng);
      for (std::size_t i = 0; i < n; ++i) {
        if (chosen[i]) continue;
        target -= d2[i];
        if (target <= 0.0) {
          next = i;
          break;
        }
      }
    }
    if (next == n) {
      // All remaining rows coincide with a seed (or rounding ran past the end):
      // take the first unchosen row.
      for (std::size_t i = 0; i < n; ++i) {
        if (!chosen[i]) {
          next = i;
          break;
        }
      }
    }
    chosen[next] = true;
    seeds.push_back(next);
    for (std::size_t i = 0; i < n; ++i) {
      d2[i] = std::min(d2[i], std::max(0.0, 2.0 - 2.0 * dot(rows.row(i), rows.row(next))));
    }
  }
  return seeds;
}

}  // namespace

RetrievalSet topk_exact(std::span<const float> query, const EmbeddingMatrix& rows,
                        std::size_t k) {
  check_query(query, rows, k);
  BoundedTopK top(std::min(k, rows.count()));
  for (std::size_t i = 0; i < rows.count(); ++i) top.offer(score_row(query, rows, i), i);
  return std::move(top).finish(k);
}

RetrievalSet topk_subset(std::span<const float> query, const EmbeddingMatrix& rows,
                         std::span<const std::size_t> candidates, std::size_t k) {
  check_query(query, rows, k);
  BoundedTopK top(std::min(k, candidates.size()));
  for (std::size_t i : candidates) top.offer(score_row(query, rows, i), i);
  return std::move(top).finish(k);
}

IvfIndex build_ivf(const EmbeddingMatrix& rows, std::size_t n_list, std::uint64_t seed,
                   const IvfBuildOptions& options) {
  if (rows.empty()) fail(ErrorCode::kEmptyBank, "cannot index an empty bank");
  if (n_list == 0 || n_list > rows.count()) {
    fail(ErrorCode::kInvalidArgument, "n_list must be in [1, " +
                                          std::to_string(rows.count()) + "]");
  }
  const std::size_t dim = rows.dim();
  std::mt19937_64 rng(seed);

  // Train on a seeded subsample when the bank is large.
  const std::size_t cap =
      options.max_train_per_list == 0 ? rows.count() : n_list * options.max_train_per_list;
  EmbeddingMatrix sampled;
  const EmbeddingMatrix* train = &rows;
  if (rows.count() > cap) {
    std::vector<std::size_t> ids(rows.count());
    std::iota(ids.begin(), ids.end(), std::size_t{0});
    std::shuffle(ids.begin(), ids.end(), rng);
    ids.resize(cap);
    std::sort(ids.begin(), ids.end());
    sampled = rows.select(ids);
    train = &sampled;
  }

  const auto seeds = kmeanspp_seeds(*train, n_list, rng);
  EmbeddingMatrix centroids = train->select(seeds);
  centroids.set_normalized(true);

  std::vector<std::size_t> assign(train->count(), 0);
  int iterations = 0;
  for (; iterations < options.max_iterations; ++iterations) {
    for (std::size_t i = 0; i < train->count(); ++i) {
      assign[i] = nearest_centroid(train->row(i), centroids);
    }
    std::vector<double> sums(n_list * dim, 0.0);
    std::vector<std::size_t> sizes(n_list, 0);
    for (std::size_t i = 0; i < train->count(); ++i) {
      auto r = train->row(i);
      double* s = sums.data() + assign[i] * dim;
      for (std::size_t j = 0; j < dim; ++j) s[j] += r[j];
      ++sizes[assign[i]];
    }
    EmbeddingMatrix next(dim, true);
    next.reserve(n_list);
    double max_move = 0.0;
    std::vector<float> c(dim);
    for (std::size_t l = 0; l < n_list; ++l) {
      const double* s = sums.data() + l * dim;
      double norm = 0.0;
      for (std::size_t j = 0; j < dim; ++j) norm += s[j] * s[j];
      norm = std::sqrt(norm);
      auto prev = centroids.row(l);
      if (sizes[l] == 0 || norm < 1e-12) {
        // Empty or cancelling cluster keeps its previous centroid.
        std::copy(prev.begin(), prev.end(), c.begin());
      } else {
        for (std::size_t j = 0; j < dim; ++j) c[j] = static_cast<float>(s[j] / norm);
      }
      double move = 0.0;
      for (std::size_t j = 0; j < dim; ++j) {
        const double d = static_cast<double>(c[j]) - prev[j];
        move += d * d;
      }
      max_move = std::max(max_move, std::sqrt(move));
      next.append(c);
    }
    centroids = std::move(next);
    if (max_move < options.movement_tol) {
      ++iterations;
      break;
    }
  }

  IvfIndex index;
  index.postings.assign(n_list, {});
  for (std::size_t i = 0; i < rows.count(); ++i) {
    index.postings[nearest_centroid(rows.row(i), centroids)].push_back(
        static_cast<std::uint32_t>(i));
  }
  index.centroids = std::move(centroids);
  index.seed = seed;
  index.iterations = iterations;
  index.n_probe = 1;
  return index;
}

RetrievalSet topk_ivf(std::span<const float> query, const EmbeddingMatrix& rows,
                      const IvfIndex& index, std::size_t k) {
  check_query(query, rows, k);
  if (index.n_probe < 1 || index.n_probe > index.n_list()) {
    fail(ErrorCode::kInvalidArgument, "n_probe must be in [1, n_list]");
  }
  const RetrievalSet lists = topk_exact(query, index.centroids, index.n_probe);
  std::vector<std::size_t> candidates;
  for (std::size_t l : lists.indices) {
    candidates.insert(candidates.end(), index.postings[l].begin(), index.postings[l].end());
  }
  if (candidates.empty()) {
    RetrievalSet out;
    out.k = k;
    return out;
  }
  return topk_subset(query, rows, candidates, k);
}

void save_ivf(const IvfIndex& index, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::size_t count = 0;
  for (const auto& p : index.postings) count += p.size();
  nlohmann::json manifest = {
      {"n_list", index.n_list()},     {"n_probe", index.n_probe},
      {"seed", index.seed},           {"dim", index.centroids.dim()},
      {"count", count},               {"iterations", index.iterations},
      {"centroid_file", "centroids.zcbm"}, {"postings_file", "postings.bin"},
  };
  std::ofstream(dir / "ivf.json") << manifest.dump(2) << '\n';
  save_matrix(index.centroids, dir / "centroids.zcbm");

  std::vector<std::uint8_t> bytes;
  auto put_u32 = [&bytes](std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  };
  for (const auto& list : index.postings) {
    put_u32(static_cast<std::uint32_t>(list.size()));
    for (auto id : list) put_u32(id);
  }
  write_file_bytes(dir / "postings.bin", bytes);
}

IvfIndex load_ivf(const std::filesystem::path& dir) {
  std::ifstream in(dir / "ivf.json");
  if (!in) fail(ErrorCode::kIo, "cannot open " + (dir / "ivf.json").string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kIo, std::string("bad ivf.json: ") + e.what());
  }
  IvfIndex index;
  index.centroids = load_matrix(dir / manifest.value("centroid_file", "centroids.zcbm"));
  const auto n_list = manifest.at("n_list").get<std::size_t>();
  if (index.centroids.count() != n_list ||
      index.centroids.dim() != manifest.at("dim").get<std::size_t>()) {
    fail(ErrorCode::kDimMismatch, "centroid matrix disagrees with ivf.json");
  }
  index.n_probe = manifest.value("n_probe", std::size_t{1});
  index.seed = manifest.value("seed", std::uint64_t{0});
  index.iterations = manifest.value("iterations", 0);

  const auto bytes = read_file_bytes(dir / manifest.value("postings_file", "postings.bin"));
  std::size_t pos = 0;
  auto get_u32 = [&]() {
    if (pos + 4 > bytes.size()) fail(ErrorCode::kTruncatedFile, "postings.bin truncated");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes[pos + i]) << (8 * i);
    pos += 4;
    return v;
  };
  index.postings.resize(n_list);
  for (auto& list : index.postings) {
    const std::uint32_t len = get_u32();
    list.reserve(len);
    for (std::uint32_t i = 0; i < len; ++i) list.push_back(get_u32());
  }
  if (pos != bytes.size()) fail(ErrorCode::kDimMismatch, "trailing bytes in postings.bin");
  return index;
}

double recall(const RetrievalSet& approx, const RetrievalSet& exact) {
  if (exact.indices.empty()) return 1.0;
  std::unordered_set<std::size_t> got(approx.indices.begin(), approx.indices.end());
  std::size_t hit = 0;
  for (auto i : exact.indices) hit += got.count(i);
  return static_cast<double>(hit) / static_cast<double>(exact.indices.size());
}

RetrievalSet Retriever::search(std::span<const float> query, std::size_t k) const {
  if (rows == nullptr) fail(ErrorCode::kEmptyBank, "retriever has no bank");
  if (ivf != nullptr) {
    if (k <= kMaxIvfK) return topk_ivf(query, *rows, *ivf, k);
    static std::once_flag warned;
    std::call_once(warned, [k] {
      std::cerr << "warning: k=" << k << " exceeds the IVF limit of " << kMaxIvfK
                << "; using exact search\n";
    });
  }
  return topk_exact(query, *rows, k);
}

}  // namespace zcbm
