#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "zcbm/bank.hpp"
#include "zcbm/pipeline.hpp"

namespace zcbm::testing {

std::vector<float> random_unit(std::mt19937_64& rng, std::size_t dim);
EmbeddingMatrix random_unit_rows(std::size_t n, std::size_t dim, std::uint64_t seed);
ConceptBank random_bank(std::size_t n, std::size_t dim, std::uint64_t seed,
                        const std::string& prefix = "concept");

/// Rows 0..dim-1 of the bank are the standard basis; the rest are random unit
/// distractors. Each class owns a disjoint triple of basis concepts and its
/// prototype is their normalized sum. Image i is the normalized weighted sum
/// of its class triple.
struct OrthoFixture {
  std::size_t dim = 0;
  ConceptBank bank;
  ClassSet classes;
  std::vector<std::array<std::size_t, 3>> class_concepts;
  std::vector<EmbeddingVector> images;
  std::vector<int> truths;
  std::vector<std::array<double, 3>> raw_weights;  // before normalization
};

OrthoFixture make_ortho_fixture(std::uint64_t seed, std::size_t n_samples = 200,
                                std::size_t dim = 64, std::size_t n_distractors = 936,
                                std::size_t n_classes = 10);

/// Writes bank/, classes.json, class_embeddings.zcbm, images.zcbm, truths.txt.
void write_fixture_files(const OrthoFixture& fx, const std::filesystem::path& dir);

EmbeddingMatrix to_matrix(const std::vector<EmbeddingVector>& rows);

/// Fresh empty directory under the system temp dir.
std::filesystem::path temp_dir(const std::string& tag);

}  // namespace zcbm::testing
