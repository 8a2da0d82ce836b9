#include "zcbm/bank.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <unordered_map>
#include <unordered_set>

#include "zcbm/error.hpp"

namespace zcbm {

namespace {

constexpr std::array<std::string_view, 17> kUniversalPos = {
    "ADJ", "ADP", "ADV", "AUX", "CCONJ", "DET", "INTJ", "NOUN", "NUM",
    "PART", "PRON", "PROPN", "PUNCT", "SCONJ", "SYM", "VERB", "X"};

const std::unordered_set<std::string_view>& stop_words() {
  static const std::unordered_set<std::string_view> words = {
      "a", "an", "the", "this", "that", "these", "those", "some", "any", "other",
      "another", "such", "own", "same", "one", "ones", "thing", "things",
      "something", "someone", "somebody", "anything", "everything", "nothing",
      "lot", "lots", "kind", "sort", "type", "way", "bit", "many", "much", "more",
      "most", "few", "several", "each", "every", "all", "both", "either",
      "neither", "i", "me", "you", "he", "she", "it", "we", "they", "them",
      "there", "here", "what", "which", "who", "whom", "whose", "very", "s"};
  return words;
}

bool is_nominal(std::string_view pos) { return pos == "NOUN" || pos == "PROPN"; }

bool is_chunk_token(std::string_view pos) { return pos == "ADJ" || is_nominal(pos); }

std::size_t count_words(std::string_view text) {
  std::size_t words = 0;
  bool in_word = false;
  for (char c : text) {
    if (c == ' ') {
      in_word = false;
    } else if (!in_word) {
      in_word = true;
      ++words;
    }
  }
  return words;
}

nlohmann::json manifest_to_json(const BankManifest& m) {
  nlohmann::json filters = {
      {"max_chars", m.filters_applied.max_chars},
      {"max_words", m.filters_applied.max_words},
      {"dedup_threshold", m.filters_applied.dedup_threshold},
      {"dedup_top_m", m.filters_applied.dedup_top_m},
      {"min_count", m.filters_applied.min_count},
  };
  filters["class_filter_threshold"] =
      m.filters_applied.class_filter_threshold
          ? nlohmann::json(*m.filters_applied.class_filter_threshold)
          : nlohmann::json(nullptr);
  return {{"name", m.name},
          {"dim", m.dim},
          {"count", m.count},
          {"sources", m.sources},
          {"filters_applied", filters},
          {"embedding_file", m.embedding_file},
          {"vocab_file", m.vocab_file}};
}

BankManifest manifest_from_json(const nlohmann::json& j) {
  BankManifest m;
  m.name = j.at("name").get<std::string>();
  m.dim = j.at("dim").get<std::size_t>();
  m.count = j.at("count").get<std::size_t>();
  m.sources = j.value("sources", std::vector<std::string>{});
  const auto& f = j.at("filters_applied");
  m.filters_applied.max_chars = f.at("max_chars").get<std::size_t>();
  m.filters_applied.max_words = f.at("max_words").get<std::size_t>();
  m.filters_applied.dedup_threshold = f.at("dedup_threshold").get<double>();
  m.filters_applied.dedup_top_m = f.at("dedup_top_m").get<std::size_t>();
  m.filters_applied.min_count = f.value("min_count", std::size_t{1});
  if (f.contains("class_filter_threshold") && !f["class_filter_threshold"].is_null()) {
    m.filters_applied.class_filter_threshold = f["class_filter_threshold"].get<double>();
  }
  m.embedding_file = j.value("embedding_file", "embeddings.zcbm");
  m.vocab_file = j.value("vocab_file", "vocab.txt");
  return m;
}

void validate_filters(const FilterRecord& f) {
  if (f.max_chars < 1 || f.max_words < 1) {
    fail(ErrorCode::kInvalidArgument, "max_chars and max_words must be >= 1");
  }
  if (f.dedup_top_m < 1) fail(ErrorCode::kInvalidArgument, "dedup_top_m must be >= 1");
  if (!(f.dedup_threshold >= -1.0 && f.dedup_threshold <= 1.0)) {
    fail(ErrorCode::kInvalidArgument, "dedup_threshold must lie in [-1, 1]");
  }
  if (f.class_filter_threshold &&
      !(*f.class_filter_threshold >= -1.0 && *f.class_filter_threshold <= 1.0)) {
    fail(ErrorCode::kInvalidArgument, "class_filter_threshold must lie in [-1, 1]");
  }
  if (f.min_count < 1) fail(ErrorCode::kInvalidArgument, "min_count must be >= 1");
}

}  // namespace

bool is_universal_pos(std::string_view tag) {
  return std::find(kUniversalPos.begin(), kUniversalPos.end(), tag) != kUniversalPos.end();
}

TaggedCaption parse_tagged_caption(std::string_view line) {
  if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
  TaggedCaption caption;
  std::size_t pos = 0;
  while (pos < line.size()) {
    std::size_t end = line.find(' ', pos);
    if (end == std::string_view::npos) end = line.size();
    const std::string_view token = line.substr(pos, end - pos);
    pos = end + 1;
    if (token.empty()) continue;

    // The tag separator is the last underscore not escaped by a backslash.
    std::size_t sep = std::string_view::npos;
    for (std::size_t i = token.size(); i-- > 0;) {
      if (token[i] == '_' && (i == 0 || token[i - 1] != '\\')) {
        sep = i;
        break;
      }
    }
    if (sep == std::string_view::npos || sep == 0 || sep + 1 == token.size()) {
      fail(ErrorCode::kInvalidArgument, "malformed tagged token '" + std::string(token) + "'");
    }
    TaggedToken t;
    t.pos = std::string(token.substr(sep + 1));
    if (!is_universal_pos(t.pos)) {
      fail(ErrorCode::kInvalidArgument, "unknown POS tag '" + t.pos + "'");
    }
    const std::string_view raw = token.substr(0, sep);
    for (std::size_t i = 0; i < raw.size(); ++i) {
      if (raw[i] == '\\' && i + 1 < raw.size() && raw[i + 1] == '_') {
        t.surface.push_back('_');
        ++i;
      } else {
        t.surface.push_back(raw[i]);
      }
    }
    caption.tokens.push_back(std::move(t));
  }
  return caption;
}

Corpus load_tagged_corpus(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::kIo, "cannot open caption file " + path.string());
  Corpus corpus;
  corpus.name = path.filename().string();
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    try {
      auto caption = parse_tagged_caption(line);
      if (!caption.tokens.empty()) corpus.captions.push_back(std::move(caption));
    } catch (const Error& e) {
      throw Error(e.code(), path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return corpus;
}

std::string fold_concept(std::string_view text) {
  std::string out;
  out.reserve(text.size());
  bool pending_space = false;
  for (char c : text) {
    if (c == ' ' || c == '\t' || c == '\n' || c == '\r') {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) {
      out.push_back(' ');
      pending_space = false;
    }
    out.push_back((c >= 'A' && c <= 'Z') ? static_cast<char>(c - 'A' + 'a') : c);
  }
  return out;
}

std::vector<std::string> extract_noun_phrases(const TaggedCaption& caption) {
  std::vector<std::string> phrases;
  const auto& tokens = caption.tokens;
  std::size_t i = 0;
  while (i < tokens.size()) {
    if (!is_chunk_token(tokens[i].pos)) {
      ++i;
      continue;
    }
    std::size_t end = i;
    while (end < tokens.size() && is_chunk_token(tokens[end].pos)) ++end;
    // Trailing adjectives fall outside the pattern.
    std::size_t last = end;
    while (last > i && !is_nominal(tokens[last - 1].pos)) --last;
    if (last > i) {
      std::string phrase;
      bool all_stop = true;
      for (std::size_t t = i; t < last; ++t) {
        const std::string word = fold_concept(tokens[t].surface);
        if (word.empty()) continue;
        if (!stop_words().contains(word)) all_stop = false;
        if (!phrase.empty()) phrase.push_back(' ');
        phrase += word;
      }
      if (!phrase.empty() && !all_stop) phrases.push_back(std::move(phrase));
    }
    i = end;
  }
  return phrases;
}

std::size_t utf8_length(std::string_view text) {
  std::size_t n = 0;
  for (unsigned char c : text) n += (c & 0xC0) != 0x80;
  return n;
}

std::vector<std::string> filter_length(const std::vector<std::string>& concepts,
                                       std::size_t max_chars, std::size_t max_words) {
  std::vector<std::string> kept;
  for (const auto& c : concepts) {
    if (utf8_length(c) <= max_chars && count_words(c) <= max_words) kept.push_back(c);
  }
  return kept;
}

ConceptBank make_bank(std::vector<std::string> vocab, EmbeddingMatrix embeddings,
                      std::string name) {
  if (vocab.size() != embeddings.count()) {
    fail(ErrorCode::kDimMismatch, "vocab has " + std::to_string(vocab.size()) +
                                      " entries but embeddings have " +
                                      std::to_string(embeddings.count()) + " rows");
  }
  std::unordered_set<std::string> seen;
  for (const auto& v : vocab) {
    if (!seen.insert(fold_concept(v)).second) {
      fail(ErrorCode::kInvalidArgument, "duplicate vocab entry '" + v + "'");
    }
  }
  ConceptBank bank;
  bank.manifest.name = std::move(name);
  bank.manifest.dim = embeddings.dim();
  bank.manifest.count = embeddings.count();
  bank.vocab = std::move(vocab);
  bank.embeddings = std::move(embeddings);
  return bank;
}

ConceptBank subset_bank(const ConceptBank& bank, const std::vector<std::size_t>& keep) {
  ConceptBank out;
  out.manifest = bank.manifest;
  out.vocab.reserve(keep.size());
  for (auto i : keep) out.vocab.push_back(bank.vocab[i]);
  out.embeddings = bank.embeddings.select(keep);
  out.manifest.count = keep.size();
  return out;
}

ConceptBank dedup_similar(const ConceptBank& bank, double threshold, std::size_t top_m,
                          const IvfIndex* index) {
  if (top_m < 1) fail(ErrorCode::kInvalidArgument, "top_m must be >= 1");
  const std::size_t n = bank.size();
  std::vector<bool> removed(n, false);
  for (std::size_t i = 0; i < n; ++i) {
    if (removed[i]) continue;
    const auto query = bank.embeddings.row(i);
    const RetrievalSet neighbours =
        index != nullptr ? topk_ivf(query, bank.embeddings, *index, top_m + 1)
                         : topk_exact(query, bank.embeddings, top_m + 1);
    std::size_t taken = 0;
    for (std::size_t j : neighbours.indices) {
      if (j == i) continue;
      if (taken++ == top_m) break;
      // Only not-yet-visited concepts can be removed.
      if (j > i && !removed[j] && dot(query, bank.embeddings.row(j)) >= threshold) {
        removed[j] = true;
      }
    }
  }
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < n; ++i) {
    if (!removed[i]) keep.push_back(i);
  }
  ConceptBank out = subset_bank(bank, keep);
  out.manifest.filters_applied.dedup_threshold = threshold;
  out.manifest.filters_applied.dedup_top_m = top_m;
  return out;
}

ConceptBank filter_class_similar(const ConceptBank& bank,
                                 const EmbeddingMatrix& class_embeddings, double threshold) {
  if (!class_embeddings.empty() && class_embeddings.dim() != bank.dim()) {
    fail(ErrorCode::kDimensionMismatch, "class embedding dimension " +
                                            std::to_string(class_embeddings.dim()) +
                                            " != bank dimension " + std::to_string(bank.dim()));
  }
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < bank.size(); ++i) {
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < class_embeddings.count(); ++c) {
      best = std::max(best, cosine(bank.embeddings.row(i), class_embeddings.row(c)));
    }
    if (best < threshold) keep.push_back(i);
  }
  ConceptBank out = subset_bank(bank, keep);
  out.manifest.filters_applied.class_filter_threshold = threshold;
  return out;
}

ConceptBank build_bank(const std::vector<Corpus>& corpora, const BankBuildConfig& cfg,
                       const EmbedFn& embed, BuildStats* stats) {
  if (corpora.empty()) fail(ErrorCode::kInvalidArgument, "build_bank needs at least one corpus");
  validate_filters(cfg.filters);
  BuildStats local;

  std::vector<std::string> order;
  std::unordered_map<std::string, std::size_t> counts;
  for (const auto& corpus : corpora) {
    for (const auto& caption : corpus.captions) {
      for (auto& phrase : extract_noun_phrases(caption)) {
        ++local.extracted;
        auto [it, inserted] = counts.try_emplace(phrase, 0);
        if (inserted) order.push_back(phrase);
        ++it->second;
      }
    }
  }
  std::vector<std::string> concepts;
  for (auto& c : order) {
    if (counts[c] >= cfg.filters.min_count) concepts.push_back(std::move(c));
  }
  local.unique = concepts.size();

  if (!cfg.blocklist.empty()) {
    std::unordered_set<std::string> blocked;
    for (const auto& b : cfg.blocklist) blocked.insert(fold_concept(b));
    std::erase_if(concepts, [&](const std::string& c) { return blocked.contains(c); });
  }
  local.after_blocklist = concepts.size();

  concepts = filter_length(concepts, cfg.filters.max_chars, cfg.filters.max_words);
  local.after_length = concepts.size();
  if (concepts.empty()) {
    if (stats) *stats = local;
    fail(ErrorCode::kEmptyBank, "no concepts survived the length filter");
  }

  EmbeddingMatrix raw = embed(concepts);
  if (raw.count() != concepts.size()) {
    fail(ErrorCode::kProviderBadResponse, "embedder returned " + std::to_string(raw.count()) +
                                              " rows for " + std::to_string(concepts.size()) +
                                              " concepts");
  }
  ConceptBank bank = make_bank(std::move(concepts), normalize_rows(raw), cfg.name);

  std::optional<IvfIndex> index;
  if (bank.size() >= cfg.ivf_min_rows) {
    const auto n_list = static_cast<std::size_t>(4.0 * std::sqrt(static_cast<double>(bank.size())));
    index = build_ivf(bank.embeddings, n_list, cfg.ivf_seed);
    index->n_probe = std::max<std::size_t>(1, n_list / 8);
  }
  bank = dedup_similar(bank, cfg.filters.dedup_threshold, cfg.filters.dedup_top_m,
                       index ? &*index : nullptr);
  local.after_similarity = bank.size();

  if (cfg.filters.class_filter_threshold && cfg.class_embeddings) {
    bank = filter_class_similar(bank, *cfg.class_embeddings, *cfg.filters.class_filter_threshold);
  }
  local.after_class = bank.size();
  if (stats) *stats = local;
  if (bank.size() == 0) fail(ErrorCode::kEmptyBank, "no concepts survived filtering");

  bank.manifest.filters_applied = cfg.filters;
  for (const auto& corpus : corpora) bank.manifest.sources.push_back(corpus.name);
  bank.manifest.dim = bank.dim();
  bank.manifest.count = bank.size();
  return bank;
}

std::filesystem::path save_bank(const ConceptBank& bank, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  BankManifest m = bank.manifest;
  m.dim = bank.dim();
  m.count = bank.size();
  save_matrix(bank.embeddings, dir / m.embedding_file);
  save_vocab(bank.vocab, dir / m.vocab_file);
  const auto manifest_path = dir / "manifest.json";
  std::ofstream out(manifest_path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::kIo, "cannot write " + manifest_path.string());
  out << manifest_to_json(m).dump(2) << '\n';
  return manifest_path;
}

ConceptBank load_bank(const std::filesystem::path& dir_or_manifest) {
  const bool is_dir = std::filesystem::is_directory(dir_or_manifest);
  const auto manifest_path = is_dir ? dir_or_manifest / "manifest.json" : dir_or_manifest;
  const auto dir = manifest_path.parent_path();
  std::ifstream in(manifest_path);
  if (!in) fail(ErrorCode::kIo, "cannot open bank manifest " + manifest_path.string());
  BankManifest m;
  try {
    m = manifest_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kIo, manifest_path.string() + ": bad manifest: " + e.what());
  }
  ConceptBank bank;
  bank.embeddings = load_matrix(dir / m.embedding_file);
  bank.vocab = load_vocab(dir / m.vocab_file);
  if (bank.embeddings.count() != m.count || bank.vocab.size() != m.count ||
      bank.embeddings.dim() != m.dim) {
    fail(ErrorCode::kDimMismatch, "bank files disagree with " + manifest_path.string());
  }
  if (!bank.embeddings.normalized()) bank.embeddings = normalize_rows(bank.embeddings);
  bank.manifest = std::move(m);
  return bank;
}

std::vector<std::string> load_blocklist(const std::filesystem::path& path) {
  std::vector<std::string> out;
  for (auto& line : load_vocab(path)) {
    auto folded = fold_concept(line);
    if (!folded.empty()) out.push_back(std::move(folded));
  }
  return out;
}

}  // namespace zcbm
