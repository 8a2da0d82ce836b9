#include "zcbm/vecstore.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include "zcbm/error.hpp"

namespace zcbm {

namespace {

constexpr char kMagic[4] = {'Z', 'C', 'B', 'M'};
constexpr std::uint8_t kDtypeF32 = 0;
constexpr std::uint8_t kFlagNormalized = 0x1;

void check_finite(std::span<const float> v) {
  for (float x : v) {
    if (!std::isfinite(x)) fail(ErrorCode::kNonFinite, "non-finite component");
  }
}

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T value) {
  using U = std::make_unsigned_t<T>;
  auto bits = static_cast<U>(value);
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
  }
}

template <typename T>
T get_le(const std::uint8_t* p) {
  std::make_unsigned_t<T> bits = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    bits |= static_cast<std::make_unsigned_t<T>>(p[i]) << (8 * i);
  }
  return static_cast<T>(bits);
}

}  // namespace

EmbeddingMatrix::EmbeddingMatrix(std::size_t dim, bool normalized)
    : dim_(dim), normalized_(normalized) {
  if (dim == 0) fail(ErrorCode::kInvalidArgument, "matrix dimension must be positive");
}

EmbeddingMatrix::EmbeddingMatrix(std::size_t dim, std::size_t count,
                                 std::vector<float> data, bool normalized)
    : dim_(dim), count_(count), data_(std::move(data)), normalized_(normalized) {
  if (dim == 0) fail(ErrorCode::kInvalidArgument, "matrix dimension must be positive");
  if (data_.size() != dim * count) {
    fail(ErrorCode::kDimMismatch, "matrix data length " + std::to_string(data_.size()) +
                                      " != " + std::to_string(count) + "x" +
                                      std::to_string(dim));
  }
}

EmbeddingVector EmbeddingMatrix::row_vector(std::size_t i) const {
  auto r = row(i);
  return {std::vector<float>(r.begin(), r.end()), normalized_};
}

void EmbeddingMatrix::append(std::span<const float> values) {
  if (values.size() != dim_) {
    fail(ErrorCode::kDimensionMismatch, "row has length " + std::to_string(values.size()) +
                                            ", expected " + std::to_string(dim_));
  }
  data_.insert(data_.end(), values.begin(), values.end());
  ++count_;
}

EmbeddingMatrix EmbeddingMatrix::select(std::span<const std::size_t> rows) const {
  EmbeddingMatrix out(dim_, normalized_);
  out.reserve(rows.size());
  for (std::size_t r : rows) out.append(row(r));
  return out;
}

double dot(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) {
    fail(ErrorCode::kDimensionMismatch, "dimension " + std::to_string(a.size()) +
                                            " vs " + std::to_string(b.size()));
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    acc += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  }
  return acc;
}

double l2_norm(std::span<const float> v) {
  double acc = 0.0;
  for (float x : v) acc += static_cast<double>(x) * x;
  return std::sqrt(acc);
}

EmbeddingVector normalize(std::span<const float> v) {
  if (v.empty()) fail(ErrorCode::kInvalidArgument, "cannot normalize an empty vector");
  check_finite(v);
  const double norm = l2_norm(v);
  if (norm < 1e-12) fail(ErrorCode::kZeroNorm, "vector norm below 1e-12");
  EmbeddingVector out;
  out.values.resize(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    out.values[i] = static_cast<float>(v[i] / norm);
  }
  out.normalized = true;
  return out;
}

EmbeddingMatrix normalize_rows(const EmbeddingMatrix& m) {
  EmbeddingMatrix out(m.dim(), true);
  out.reserve(m.count());
  for (std::size_t i = 0; i < m.count(); ++i) out.append(normalize(m.row(i)).values);
  return out;
}

double cosine(std::span<const float> a, std::span<const float> b) {
  // One square root over the product keeps cosine(a, a) exactly 1.
  const double denom = std::sqrt(dot(a, a) * dot(b, b));
  if (denom == 0.0) return 0.0;
  return std::clamp(dot(a, b) / denom, -1.0, 1.0);
}

double cosine(const EmbeddingVector& a, const EmbeddingVector& b) {
  return cosine(a.view(), b.view());
}

std::vector<std::uint8_t> encode_matrix(const EmbeddingMatrix& m) {
  std::vector<std::uint8_t> out;
  out.reserve(kMatrixHeaderSize + m.data().size() * 4);
  out.insert(out.end(), std::begin(kMagic), std::end(kMagic));
  out.push_back(kMatrixFormatVersion);
  out.push_back(kDtypeF32);
  out.push_back(m.normalized() ? kFlagNormalized : 0);
  out.push_back(0);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(m.dim()));
  put_le<std::uint64_t>(out, static_cast<std::uint64_t>(m.count()));
  for (float x : m.data()) put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(x));
  return out;
}

EmbeddingMatrix decode_matrix(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    fail(ErrorCode::kBadMagic, "missing ZCBM magic");
  }
  if (bytes.size() < kMatrixHeaderSize) {
    fail(ErrorCode::kTruncatedFile, "header truncated");
  }
  if (bytes[4] != kMatrixFormatVersion) {
    fail(ErrorCode::kUnsupportedVersion, "unsupported version " + std::to_string(bytes[4]));
  }
  if (bytes[5] != kDtypeF32) {
    fail(ErrorCode::kUnsupportedVersion, "unsupported dtype " + std::to_string(bytes[5]));
  }
  const bool normalized = (bytes[6] & kFlagNormalized) != 0;
  const auto dim = get_le<std::uint32_t>(bytes.data() + 8);
  const auto count = get_le<std::uint64_t>(bytes.data() + 12);
  if (dim == 0) fail(ErrorCode::kDimMismatch, "header dimension is zero");

  const std::size_t payload = bytes.size() - kMatrixHeaderSize;
  // Guard the multiplication: a corrupt count must not wrap around.
  if (count > payload / (4ull * dim) + 1) {
    fail(ErrorCode::kTruncatedFile, "header count " + std::to_string(count) +
                                        " exceeds payload of " + std::to_string(payload) +
                                        " bytes");
  }
  const std::size_t expected = static_cast<std::size_t>(count) * dim * 4;
  if (payload < expected) {
    fail(ErrorCode::kTruncatedFile, "payload holds " + std::to_string(payload) +
                                        " bytes, header implies " + std::to_string(expected));
  }
  if (payload > expected) {
    fail(ErrorCode::kDimMismatch, "payload holds " + std::to_string(payload) +
                                      " bytes, header implies " + std::to_string(expected));
  }

  std::vector<float> data(static_cast<std::size_t>(count) * dim);
  const std::uint8_t* p = bytes.data() + kMatrixHeaderSize;
  for (std::size_t i = 0; i < data.size(); ++i, p += 4) {
    data[i] = std::bit_cast<float>(get_le<std::uint32_t>(p));
  }
  return EmbeddingMatrix(dim, static_cast<std::size_t>(count), std::move(data), normalized);
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::kIo, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_bytes(const std::filesystem::path& path,
                      std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::kIo, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorCode::kIo, "write failed: " + path.string());
}

void save_matrix(const EmbeddingMatrix& m, const std::filesystem::path& path) {
  write_file_bytes(path, encode_matrix(m));
}

EmbeddingMatrix load_matrix(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  try {
    return decode_matrix(bytes);
  } catch (const Error& e) {
    throw Error(e.code(), path.string() + ": " + e.what());
  }
}

void save_vocab(const std::vector<std::string>& vocab,
                const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::kIo, "cannot write " + path.string());
  for (const auto& entry : vocab) {
    if (entry.find('\n') != std::string::npos) {
      fail(ErrorCode::kInvalidArgument, "vocab entry contains a newline");
    }
    out << entry << '\n';
  }
}

std::vector<std::string> load_vocab(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::kIo, "cannot open " + path.string());
  std::vector<std::string> vocab;
  std::string line;
  while (std::getline(in, line)) vocab.push_back(line);
  return vocab;
}

}  // namespace zcbm
