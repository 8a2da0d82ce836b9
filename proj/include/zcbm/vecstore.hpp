#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace zcbm {

/// A single embedding. Values are 32-bit; reductions over them use 64-bit
/// accumulators.
struct EmbeddingVector {
  std::vector<float> values;
  bool normalized = false;

  std::size_t dim() const { return values.size(); }
  std::span<const float> view() const { return values; }
};

/// Row-major N x d matrix of embeddings. Immutable once built or loaded;
/// shareable across threads.
class EmbeddingMatrix {
 public:
  EmbeddingMatrix() = default;
  explicit EmbeddingMatrix(std::size_t dim, bool normalized = false);
  EmbeddingMatrix(std::size_t dim, std::size_t count, std::vector<float> data,
                  bool normalized);

  std::size_t dim() const { return dim_; }
  std::size_t count() const { return count_; }
  bool normalized() const { return normalized_; }
  bool empty() const { return count_ == 0; }

  std::span<const float> row(std::size_t i) const {
    return {data_.data() + i * dim_, dim_};
  }
  const std::vector<float>& data() const { return data_; }

  EmbeddingVector row_vector(std::size_t i) const;

  /// Appends a row; its length must equal dim().
  void append(std::span<const float> values);
  void reserve(std::size_t rows) { data_.reserve(rows * dim_); }
  void set_normalized(bool normalized) { normalized_ = normalized; }

  /// New matrix holding the given rows, in the given order.
  EmbeddingMatrix select(std::span<const std::size_t> rows) const;

  friend bool operator==(const EmbeddingMatrix&, const EmbeddingMatrix&) = default;

 private:
  std::size_t dim_ = 0;
  std::size_t count_ = 0;
  std::vector<float> data_;
  bool normalized_ = false;
};

double dot(std::span<const float> a, std::span<const float> b);
double l2_norm(std::span<const float> v);

/// v / ||v||. Throws ZeroNorm when ||v|| < 1e-12 and NonFinite on NaN/Inf.
EmbeddingVector normalize(std::span<const float> v);

/// Normalizes every row; same error contract as normalize().
EmbeddingMatrix normalize_rows(const EmbeddingMatrix& m);

/// Cosine similarity. Reduces to the dot product when both inputs are
/// flagged normalized.
double cosine(const EmbeddingVector& a, const EmbeddingVector& b);
double cosine(std::span<const float> a, std::span<const float> b);

// ZCBM matrix file: "ZCBM" | version u8 | dtype u8 | flags u8 | pad u8 |
// dim u32 | count u64 | count*dim f32, all little-endian.
inline constexpr std::uint8_t kMatrixFormatVersion = 1;
inline constexpr std::size_t kMatrixHeaderSize = 20;

std::vector<std::uint8_t> encode_matrix(const EmbeddingMatrix& m);
EmbeddingMatrix decode_matrix(std::span<const std::uint8_t> bytes);

void save_matrix(const EmbeddingMatrix& m, const std::filesystem::path& path);
EmbeddingMatrix load_matrix(const std::filesystem::path& path);

/// Vocabulary sidecar: UTF-8, one entry per line, LF endings.
void save_vocab(const std::vector<std::string>& vocab,
                const std::filesystem::path& path);
std::vector<std::string> load_vocab(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path,
                      std::span<const std::uint8_t> bytes);

}  // namespace zcbm
