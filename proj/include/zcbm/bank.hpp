#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "zcbm/provider.hpp"
#include "zcbm/retrieval.hpp"
#include "zcbm/vecstore.hpp"

namespace zcbm {

struct TaggedToken {
  std::string surface;
  std::string pos;  // Universal POS tag
};

struct TaggedCaption {
  std::vector<TaggedToken> tokens;
};

bool is_universal_pos(std::string_view tag);

/// Parses one line of a tagged caption file: space-separated `surface_TAG`
/// tokens, `\_` for a literal underscore in the surface.
TaggedCaption parse_tagged_caption(std::string_view line);

/// A named stream of tagged captions.
struct Corpus {
  std::string name;
  std::vector<TaggedCaption> captions;
};

Corpus load_tagged_corpus(const std::filesystem::path& path);

/// ASCII case folding plus whitespace trim/collapse.
std::string fold_concept(std::string_view text);

/// Maximal runs matching (ADJ|NOUN|PROPN)* (NOUN|PROPN), case-folded, in
/// caption order. Runs made only of stop words are dropped.
std::vector<std::string> extract_noun_phrases(const TaggedCaption& caption);

std::size_t utf8_length(std::string_view text);

/// Keeps concepts with at most max_chars code points and max_words words.
std::vector<std::string> filter_length(const std::vector<std::string>& concepts,
                                       std::size_t max_chars, std::size_t max_words);

struct FilterRecord {
  std::size_t max_chars = 30;
  std::size_t max_words = 5;
  double dedup_threshold = 0.9;
  std::size_t dedup_top_m = 64;
  std::optional<double> class_filter_threshold;
  std::size_t min_count = 1;
};

struct BankManifest {
  std::string name;
  std::size_t dim = 0;
  std::size_t count = 0;
  std::vector<std::string> sources;
  FilterRecord filters_applied;
  std::string embedding_file = "embeddings.zcbm";
  std::string vocab_file = "vocab.txt";
};

/// The concept bank: vocab[i] labels embeddings.row(i).
struct ConceptBank {
  std::vector<std::string> vocab;
  EmbeddingMatrix embeddings;
  BankManifest manifest;

  std::size_t size() const { return vocab.size(); }
  std::size_t dim() const { return embeddings.dim(); }
};

/// Builds a bank from parallel vocab/embeddings, checking the invariants.
ConceptBank make_bank(std::vector<std::string> vocab, EmbeddingMatrix embeddings,
                      std::string name = "bank");

ConceptBank subset_bank(const ConceptBank& bank, const std::vector<std::size_t>& keep);

/// Greedy near-duplicate removal in ascending index order: each surviving
/// concept removes later concepts among its top_m neighbours with cosine >=
/// threshold. Uses `index` for neighbour search when given, else exact search.
ConceptBank dedup_similar(const ConceptBank& bank, double threshold, std::size_t top_m,
                          const IvfIndex* index = nullptr);

/// Drops concepts whose best cosine to any class embedding is >= threshold.
ConceptBank filter_class_similar(const ConceptBank& bank,
                                 const EmbeddingMatrix& class_embeddings, double threshold);

struct BankBuildConfig {
  std::string name = "bank";
  FilterRecord filters;
  /// Class embeddings for the optional class filter; used when
  /// filters.class_filter_threshold is set.
  std::optional<EmbeddingMatrix> class_embeddings;
  /// Concepts (after folding) that are always excluded.
  std::vector<std::string> blocklist;
  /// Banks at least this large use an IVF index for the dedup neighbour
  /// search instead of exact search.
  std::size_t ivf_min_rows = 200000;
  std::uint64_t ivf_seed = 0;
};

struct BuildStats {
  std::size_t extracted = 0;        // noun phrases, with repeats
  std::size_t unique = 0;           // after string dedup and frequency floor
  std::size_t after_blocklist = 0;
  std::size_t after_length = 0;
  std::size_t after_similarity = 0;
  std::size_t after_class = 0;
};

ConceptBank build_bank(const std::vector<Corpus>& corpora, const BankBuildConfig& cfg,
                       const EmbedFn& embed, BuildStats* stats = nullptr);

/// Writes manifest.json, the embedding matrix and the vocab sidecar into dir.
std::filesystem::path save_bank(const ConceptBank& bank, const std::filesystem::path& dir);
ConceptBank load_bank(const std::filesystem::path& dir_or_manifest);

std::vector<std::string> load_blocklist(const std::filesystem::path& path);

}  // namespace zcbm
