#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "zcbm/vecstore.hpp"

namespace zcbm {

/// Default retrieval size K.
inline constexpr std::size_t kDefaultTopK = 2048;

/// Top-K candidates of a query: scores non-increasing, ties ordered by
/// ascending row index.
struct RetrievalSet {
  std::vector<std::size_t> indices;
  std::vector<float> scores;
  std::size_t k = 0;  // requested K; indices.size() == min(k, rows)

  std::size_t size() const { return indices.size(); }
  friend bool operator==(const RetrievalSet&, const RetrievalSet&) = default;
};

/// Exact top-k by cosine (dot product over normalized rows). Single pass with a
/// bounded heap. Throws DimensionMismatch, EmptyBank, InvalidArgument (k == 0).
RetrievalSet topk_exact(std::span<const float> query, const EmbeddingMatrix& rows,
                        std::size_t k);

/// Exact top-k restricted to the given candidate rows.
RetrievalSet topk_subset(std::span<const float> query, const EmbeddingMatrix& rows,
                         std::span<const std::size_t> candidates, std::size_t k);

/// Inverted-file index: spherical k-means centroids plus one posting list per
/// centroid. Every row appears in exactly one posting list.
struct IvfIndex {
  EmbeddingMatrix centroids;
  std::vector<std::vector<std::uint32_t>> postings;
  std::size_t n_probe = 1;
  std::uint64_t seed = 0;
  int iterations = 0;

  std::size_t n_list() const { return postings.size(); }
};

struct IvfBuildOptions {
  int max_iterations = 25;
  double movement_tol = 1e-4;
  // Training rows per list; larger banks are subsampled. 0 = use every row.
  std::size_t max_train_per_list = 256;
};

/// Spherical k-means (k-means++ seeding from `seed`); n_probe starts at 1.
IvfIndex build_ivf(const EmbeddingMatrix& rows, std::size_t n_list, std::uint64_t seed,
                   const IvfBuildOptions& options = {});

/// Exact top-k over the union of the index.n_probe nearest posting lists.
RetrievalSet topk_ivf(std::span<const float> query, const EmbeddingMatrix& rows,
                      const IvfIndex& index, std::size_t k);

/// Index on disk: ivf.json (n_list, n_probe, seed, dim, count),
/// centroids.zcbm, postings.bin (per list: u32 length, then u32 row ids).
void save_ivf(const IvfIndex& index, const std::filesystem::path& dir);
IvfIndex load_ivf(const std::filesystem::path& dir);

/// Fraction of `exact` indices present in `approx`.
double recall(const RetrievalSet& approx, const RetrievalSet& exact);

/// Above this K the IVF path is not used and retrieval falls back to exact
/// search.
inline constexpr std::size_t kMaxIvfK = 2048;

struct Retriever {
  const EmbeddingMatrix* rows = nullptr;
  const IvfIndex* ivf = nullptr;  // optional

  RetrievalSet search(std::span<const float> query, std::size_t k) const;
};

}  // namespace zcbm
