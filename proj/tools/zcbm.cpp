// zcbm: command-line front end for bank construction, indexing, inference,
// evaluation, calibration, benchmarking and the HTTP service.

#include <algorithm>
#include <cmath>
#include <csignal>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>
#include <thread>

#include "zcbm/bank.hpp"
#include "zcbm/error.hpp"
#include "zcbm/metrics.hpp"
#include "zcbm/pipeline.hpp"
#include "zcbm/provider.hpp"
#include "zcbm/retrieval.hpp"
#include "zcbm/serialize.hpp"
#include "zcbm/service.hpp"
#include "zcbm/vecstore.hpp"

// After Eigen: <resolv.h> from httplib defines a macro that collides with
// Eigen parameter names.
#include <CLI11.hpp>
#include <httplib.h>
#include <json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitInput = 2;
constexpr int kExitProvider = 3;
constexpr int kExitInternal = 4;

// Reads a JSON object as CLI11 config. Top-level scalars and arrays apply to
// any subcommand that has a matching option; an object keyed by the
// subcommand name applies to that subcommand only.
class JsonConfig : public CLI::Config {
 public:
  // Items are routed to whichever subcommand was parsed: top-level scalars
  // first, then the object keyed by that subcommand's name.
  explicit JsonConfig(const CLI::App* root) : root_(root) {}

  std::string to_config(const CLI::App* app, bool default_also, bool, std::string) const override {
    json out = json::object();
    for (const CLI::Option* opt : app->get_options()) {
      if (!opt->get_configurable() || opt->get_lnames().empty()) continue;
      const std::string& name = opt->get_lnames().front();
      if (opt->count() > 0) {
        const auto& r = opt->results();
        out[name] = r.size() == 1 ? json(r.front()) : json(r);
      } else if (default_also && !opt->get_default_str().empty()) {
        out[name] = opt->get_default_str();
      }
    }
    return out.dump(2);
  }

  std::vector<CLI::ConfigItem> from_config(std::istream& input) const override {
    json doc;
    try {
      doc = json::parse(input);
    } catch (const json::exception& e) {
      throw CLI::ConversionError(std::string("config file: ") + e.what());
    }
    if (!doc.is_object()) throw CLI::ConversionError("config file must hold a JSON object");
    std::vector<CLI::ConfigItem> items;
    const auto subs = root_->get_subcommands();
    if (subs.empty()) return items;
    const std::string& section = subs.front()->get_name();
    add_items(doc, section, items);
    if (auto it = doc.find(section); it != doc.end() && it->is_object()) {
      add_items(*it, section, items);
    }
    return items;
  }

 private:
  static std::string scalar(const json& v) {
    return v.is_string() ? v.get<std::string>() : v.dump();
  }

  static void add_items(const json& obj, const std::string& section,
                        std::vector<CLI::ConfigItem>& items) {
    for (const auto& [key, value] : obj.items()) {
      if (value.is_object() || key == "config") continue;
      CLI::ConfigItem item;
      item.parents = {section};
      item.name = key;
      if (value.is_array()) {
        for (const auto& v : value) item.inputs.push_back(scalar(v));
      } else {
        item.inputs.push_back(scalar(value));
      }
      items.push_back(std::move(item));
    }
  }

  const CLI::App* root_;
};

struct ProviderFlags {
  zcbm::ProviderConfig cfg;
  double timeout = 30.0;
  int backoff_ms = 200;

  void add(CLI::App& app) {
    app.add_option("--provider-url", cfg.endpoint, "Embedding provider endpoint")
        ->envname("ZCBM_PROVIDER_URL");
    app.add_option("--provider-batch", cfg.batch_size, "Texts per provider request")
        ->check(CLI::PositiveNumber);
    app.add_option("--provider-timeout", timeout, "Provider timeout in seconds")
        ->check(CLI::PositiveNumber);
    app.add_option("--provider-retries", cfg.max_retries, "Retries on transient provider errors")
        ->check(CLI::NonNegativeNumber);
    app.add_option("--prompt-template", cfg.prompt_template,
                   "Prompt wrapped around every text; must contain [TEXT] once");
  }

  zcbm::EmbedFn embedder() {
    cfg.timeout_seconds = timeout;
    cfg.initial_backoff = std::chrono::milliseconds(backoff_ms);
    cfg.validate();
    return zcbm::make_provider_embedder(cfg);
  }
};

struct SolverFlags {
  std::string solver = "lasso";
  zcbm::SolverConfig cfg;

  void add(CLI::App& app) {
    app.add_option("--solver", solver, "Concept regression solver")
        ->check(CLI::IsMember({"lasso", "elastic_net", "htp", "least_squares", "similarity"}));
    app.add_option("--lambda", cfg.lambda, "L1 penalty for lasso and elastic net");
    app.add_option("--l2-weight", cfg.l2_weight, "L2 penalty for elastic net")
        ->check(CLI::NonNegativeNumber);
    app.add_option("--s", cfg.s, "Support size for htp");
    app.add_option("--step", cfg.step, "Gradient step for htp")->check(CLI::PositiveNumber);
    app.add_option("--max-iter", cfg.max_iter, "Iteration cap for iterative solvers")
        ->check(CLI::PositiveNumber);
    app.add_option("--tol", cfg.tol, "Convergence tolerance")->check(CLI::PositiveNumber);
  }

  zcbm::SolverConfig resolve() {
    cfg.kind = zcbm::parse_solver_kind(solver);
    if (cfg.kind == zcbm::SolverKind::kLasso && !(cfg.lambda > 0.0)) {
      zcbm::fail(zcbm::ErrorCode::kInvalidArgument, "--lambda must be > 0 for lasso");
    }
    if (cfg.kind == zcbm::SolverKind::kElasticNet && cfg.lambda < 0.0) {
      zcbm::fail(zcbm::ErrorCode::kInvalidArgument, "--lambda must be >= 0");
    }
    if (cfg.kind == zcbm::SolverKind::kHtp && cfg.s < 1) {
      zcbm::fail(zcbm::ErrorCode::kInvalidArgument, "--s must be >= 1 for htp");
    }
    return cfg;
  }
};

struct ClassFlags {
  std::string classes;
  std::string class_embeddings;

  void add(CLI::App& app) {
    app.add_option("--classes", classes, "Class set JSON: [{label_id, name, prompt?}]")
        ->required();
    app.add_option("--class-embeddings", class_embeddings,
                   "ZCBM matrix of class prompt embeddings, one row per class in file order; "
                   "skips the provider");
  }

  zcbm::ClassSet load(ProviderFlags& provider) const {
    auto labels = zcbm::load_class_labels(classes);
    if (!class_embeddings.empty()) {
      return zcbm::make_class_set(std::move(labels),
                                  zcbm::normalize_rows(zcbm::load_matrix(class_embeddings)));
    }
    return zcbm::embed_class_set(std::move(labels), provider.embedder());
  }
};

std::vector<zcbm::EmbeddingVector> load_samples(const std::string& path, std::size_t dim) {
  const zcbm::EmbeddingMatrix m = zcbm::load_matrix(path);
  if (m.dim() != dim) {
    zcbm::fail(zcbm::ErrorCode::kDimensionMismatch,
               path + ": embedding dimension " + std::to_string(m.dim()) +
                   " does not match bank dimension " + std::to_string(dim));
  }
  std::vector<zcbm::EmbeddingVector> out;
  out.reserve(m.count());
  for (std::size_t i = 0; i < m.count(); ++i) {
    try {
      out.push_back(zcbm::normalize(m.row(i)));
    } catch (const zcbm::Error& e) {
      zcbm::fail(e.code(), path + ": row " + std::to_string(i) + ": " + e.what());
    }
  }
  return out;
}

std::vector<int> load_truths(const std::string& path) {
  std::ifstream in(path);
  if (!in) zcbm::fail(zcbm::ErrorCode::kIo, "cannot open " + path);
  std::vector<int> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(std::stoi(line));
    } catch (const std::exception&) {
      zcbm::fail(zcbm::ErrorCode::kInvalidArgument,
                 path + ":" + std::to_string(n) + ": expected an integer label");
    }
  }
  return out;
}

template <typename T>
std::vector<T> parse_list(const std::string& text, const char* flag) {
  std::vector<T> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    std::istringstream is(item);
    T v{};
    if (!(is >> v) || !is.eof()) {
      zcbm::fail(zcbm::ErrorCode::kInvalidArgument,
                 std::string(flag) + ": cannot parse '" + item + "'");
    }
    out.push_back(v);
  }
  return out;
}

void parallel_for(std::size_t n, unsigned threads, const std::function<void(std::size_t)>& fn) {
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = static_cast<unsigned>(std::min<std::size_t>(threads, n));
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr first_error;
  std::mutex error_mu;
  std::vector<std::thread> pool;
  for (unsigned t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i; (i = next.fetch_add(1)) < n;) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mu);
          if (!first_error) first_error = std::current_exception();
          next = n;
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (first_error) std::rethrow_exception(first_error);
}

std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) zcbm::fail(zcbm::ErrorCode::kIo, "cannot write " + path.string());
  return out;
}

std::optional<zcbm::IvfIndex> load_index(const std::string& dir, std::size_t n_probe) {
  if (dir.empty()) return std::nullopt;
  zcbm::IvfIndex index = zcbm::load_ivf(dir);
  if (n_probe > 0) index.n_probe = std::min(n_probe, index.n_list());
  return index;
}

std::vector<zcbm::Prediction> run_inference(const std::vector<zcbm::EmbeddingVector>& samples,
                                            const zcbm::ConceptBank& bank,
                                            const zcbm::ClassSet& classes, std::size_t k,
                                            const zcbm::SolverConfig& solver,
                                            const zcbm::IvfIndex* index, unsigned threads) {
  std::vector<zcbm::Prediction> out(samples.size());
  parallel_for(samples.size(), threads, [&](std::size_t i) {
    out[i] = zcbm::infer(samples[i], bank, classes, k, solver, index);
  });
  return out;
}

// --------------------------------------------------------------------------

struct BuildBankCmd {
  std::vector<std::string> captions;
  std::string out;
  std::string name = "bank";
  zcbm::FilterRecord filters;
  std::string class_file;
  double class_threshold = 0.85;
  std::string class_embeddings;
  std::string blocklist;
  std::size_t ivf_min_rows = 200000;
  std::uint64_t seed = 0;
  ProviderFlags provider;

  void add(CLI::App& app) {
    app.add_option("--captions", captions, "POS-tagged caption files")->required();
    app.add_option("--out", out, "Output bank directory")->required();
    app.add_option("--name", name, "Bank name recorded in the manifest");
    app.add_option("--max-chars", filters.max_chars, "Drop concepts longer than this");
    app.add_option("--max-words", filters.max_words, "Drop concepts with more words");
    app.add_option("--dedup-threshold", filters.dedup_threshold,
                   "Cosine at or above which later concepts are dropped as near duplicates");
    app.add_option("--dedup-top-m", filters.dedup_top_m, "Neighbours checked per concept")
        ->check(CLI::PositiveNumber);
    app.add_option("--min-count", filters.min_count, "Minimum phrase frequency")
        ->check(CLI::PositiveNumber);
    app.add_option("--class-file", class_file,
                   "Class set JSON; enables the class-similarity filter");
    app.add_option("--class-threshold", class_threshold,
                   "Drop concepts at or above this cosine to any class prompt");
    app.add_option("--class-embeddings", class_embeddings,
                   "ZCBM matrix of class prompt embeddings for the class filter");
    app.add_option("--blocklist", blocklist, "File of concepts to exclude, one per line");
    app.add_option("--ivf-min-rows", ivf_min_rows,
                   "Use an IVF index for deduplication from this many concepts on");
    app.add_option("--seed", seed, "Seed for IVF training");
    provider.add(app);
  }

  int run() {
    std::vector<zcbm::Corpus> corpora;
    for (const auto& path : captions) corpora.push_back(zcbm::load_tagged_corpus(path));
    zcbm::BankBuildConfig cfg;
    cfg.name = name;
    cfg.filters = filters;
    cfg.ivf_min_rows = ivf_min_rows;
    cfg.ivf_seed = seed;
    if (!blocklist.empty()) cfg.blocklist = zcbm::load_blocklist(blocklist);
    zcbm::EmbedFn embed = provider.embedder();
    if (!class_file.empty()) {
      ClassFlags cf{class_file, class_embeddings};
      cfg.class_embeddings = cf.load(provider).embeddings;
      cfg.filters.class_filter_threshold = class_threshold;
    }
    zcbm::BuildStats stats;
    const zcbm::ConceptBank bank = zcbm::build_bank(corpora, cfg, embed, &stats);
    const fs::path manifest = zcbm::save_bank(bank, out);
    std::cout << "extracted " << stats.extracted << "\n"
              << "unique " << stats.unique << "\n"
              << "after_blocklist " << stats.after_blocklist << "\n"
              << "after_length " << stats.after_length << "\n"
              << "after_similarity " << stats.after_similarity << "\n"
              << "after_class " << stats.after_class << "\n"
              << "manifest " << manifest.string() << "\n";
    return kExitOk;
  }
};

struct IndexCmd {
  std::string bank;
  std::string out;
  std::size_t n_list = 0;
  std::size_t n_probe = 0;
  std::uint64_t seed = 0;
  std::size_t recall_queries = 100;
  std::size_t recall_k = 10;

  void add(CLI::App& app) {
    app.add_option("--bank", bank, "Bank directory or manifest")->required();
    app.add_option("--out", out, "Index directory (default: <bank>/ivf)");
    app.add_option("--n-list", n_list, "Number of lists; 0 picks 4*sqrt(N)");
    app.add_option("--n-probe", n_probe, "Lists probed per query; 0 picks n_list/8");
    app.add_option("--seed", seed, "k-means seed");
    app.add_option("--recall-queries", recall_queries,
                   "Perturbed bank rows used to report recall against exact search");
    app.add_option("--recall-k", recall_k, "k for the recall report")
        ->check(CLI::PositiveNumber);
  }

  int run() {
    const zcbm::ConceptBank b = zcbm::load_bank(bank);
    std::size_t lists = n_list;
    if (lists == 0) {
      lists = std::max<std::size_t>(1, static_cast<std::size_t>(
                                           std::lround(4.0 * std::sqrt(double(b.size())))));
    }
    lists = std::min(lists, b.size());
    zcbm::IvfIndex index = zcbm::build_ivf(b.embeddings, lists, seed);
    index.n_probe = n_probe > 0 ? std::min(n_probe, lists) : std::max<std::size_t>(1, lists / 8);
    fs::path dir = out;
    if (dir.empty()) {
      const fs::path p(bank);
      dir = (fs::is_directory(p) ? p : p.parent_path()) / "ivf";
    }
    zcbm::save_ivf(index, dir);

    std::mt19937_64 rng(seed);
    std::normal_distribution<float> noise(0.0f, 0.05f);
    std::uniform_int_distribution<std::size_t> pick(0, b.size() - 1);
    double total = 0.0;
    for (std::size_t q = 0; q < recall_queries; ++q) {
      auto row = b.embeddings.row(pick(rng));
      std::vector<float> v(row.begin(), row.end());
      for (auto& x : v) x += noise(rng);
      const auto query = zcbm::normalize(v);
      total += zcbm::recall(zcbm::topk_ivf(query.values, b.embeddings, index, recall_k),
                            zcbm::topk_exact(query.values, b.embeddings, recall_k));
    }
    json report = {{"index", dir.string()},
                   {"n_list", index.n_list()},
                   {"n_probe", index.n_probe},
                   {"iterations", index.iterations}};
    if (recall_queries > 0) {
      report["recall_k"] = recall_k;
      report["recall"] = zcbm::round9(total / double(recall_queries));
    }
    std::cout << report.dump() << "\n";
    return kExitOk;
  }
};

struct InferCmd {
  std::string bank;
  std::string images;
  std::string out = "-";
  std::size_t k = zcbm::kDefaultTopK;
  std::string index_dir;
  std::size_t n_probe = 0;
  bool class_scores = false;
  unsigned threads = 0;
  ClassFlags classes;
  SolverFlags solver;
  ProviderFlags provider;

  void add(CLI::App& app) {
    app.add_option("--bank", bank, "Bank directory or manifest")->required();
    classes.add(app);
    app.add_option("--images", images, "ZCBM matrix of image embeddings")->required();
    app.add_option("--out", out, "JSON-lines output file, - for stdout");
    app.add_option("--k", k, "Concepts retrieved per image")->check(CLI::PositiveNumber);
    solver.add(app);
    app.add_option("--index", index_dir, "IVF index directory; exact search when empty");
    app.add_option("--n-probe", n_probe, "Override the index's lists probed; 0 keeps it");
    app.add_flag("--class-scores", class_scores, "Include per-class scores in each record");
    app.add_option("--threads", threads, "Worker threads; 0 uses all cores");
    provider.add(app);
  }

  int run() {
    const auto cfg = solver.resolve();
    const zcbm::ConceptBank b = zcbm::load_bank(bank);
    const zcbm::ClassSet cs = classes.load(provider);
    const auto samples = load_samples(images, b.dim());
    const auto index = load_index(index_dir, n_probe);
    const auto preds =
        run_inference(samples, b, cs, k, cfg, index ? &*index : nullptr, threads);
    std::ofstream file;
    std::ostream* os = &std::cout;
    if (out != "-") {
      file = open_out(out);
      os = &file;
    }
    for (std::size_t i = 0; i < preds.size(); ++i) {
      *os << zcbm::prediction_record(i, preds[i], cs, class_scores).dump() << "\n";
    }
    return kExitOk;
  }
};

struct EvalCmd {
  std::string bank;
  std::string images;
  std::string truth;
  std::string out;
  std::string name = "dataset";
  std::size_t k = zcbm::kDefaultTopK;
  std::size_t top_n = 10;
  std::string scorer_embeddings;
  std::string scorer_url;
  std::string deletion_grid;
  std::string deletion_orders = "ascending,descending,random";
  std::string insertion_gt;
  std::string insertion_counts;
  bool pca = false;
  bool per_sample = false;
  std::uint64_t seed = 0;
  std::string index_dir;
  unsigned threads = 0;
  ClassFlags classes;
  SolverFlags solver;
  ProviderFlags provider;

  void add(CLI::App& app) {
    app.add_option("--bank", bank, "Bank directory or manifest")->required();
    classes.add(app);
    app.add_option("--images", images, "ZCBM matrix of image embeddings")->required();
    app.add_option("--truth", truth, "Ground-truth label ids, one per line")->required();
    app.add_option("--out", out, "Output directory for reports and curves")->required();
    app.add_option("--name", name, "Dataset name recorded in the report");
    app.add_option("--k", k, "Concepts retrieved per image")->check(CLI::PositiveNumber);
    solver.add(app);
    app.add_option("--top-n", top_n, "Concepts scored per image")->check(CLI::PositiveNumber);
    app.add_option("--scorer-embeddings", scorer_embeddings,
                   "ZCBM matrix of scorer-model image embeddings, aligned with --images");
    app.add_option("--scorer-url", scorer_url,
                   "Provider endpoint of the scorer model's text encoder");
    app.add_option("--deletion-grid", deletion_grid,
                   "Comma-separated deletion ratios; writes deletion.csv");
    app.add_option("--deletion-orders", deletion_orders, "Comma-separated deletion orders");
    app.add_option("--insertion-gt", insertion_gt,
                   "JSON array of ground-truth concept lists per image; writes insertion.csv");
    app.add_option("--insertion-counts", insertion_counts,
                   "Comma-separated insertion counts; empty means 0..longest list");
    app.add_flag("--pca", pca, "Write pca.csv of image, reconstruction and label embeddings");
    app.add_flag("--per-sample", per_sample, "Include per-sample records");
    app.add_option("--seed", seed, "Seed for random deletion order");
    app.add_option("--index", index_dir, "IVF index directory; exact search when empty");
    app.add_option("--threads", threads, "Worker threads; 0 uses all cores");
    provider.add(app);
  }

  int run() {
    const auto cfg = solver.resolve();
    const zcbm::ConceptBank b = zcbm::load_bank(bank);
    const zcbm::ClassSet cs = classes.load(provider);
    const auto samples = load_samples(images, b.dim());
    const auto truths = load_truths(truth);
    if (truths.size() != samples.size()) {
      zcbm::fail(zcbm::ErrorCode::kLengthMismatch,
                 "--truth has " + std::to_string(truths.size()) + " labels for " +
                     std::to_string(samples.size()) + " images");
    }
    const auto index = load_index(index_dir, 0);
    const auto preds = run_inference(samples, b, cs, k, cfg, index ? &*index : nullptr, threads);

    zcbm::EvalOptions opts;
    opts.dataset_name = name;
    opts.top_n = top_n;
    opts.per_sample = per_sample;
    std::vector<zcbm::EmbeddingVector> scorer_images;
    zcbm::EmbedFn scorer_text;
    if (!scorer_embeddings.empty()) {
      if (scorer_url.empty()) {
        zcbm::fail(zcbm::ErrorCode::kInvalidArgument,
                   "--scorer-embeddings needs --scorer-url for concept texts");
      }
      const auto m = zcbm::normalize_rows(zcbm::load_matrix(scorer_embeddings));
      for (std::size_t i = 0; i < m.count(); ++i) scorer_images.push_back(m.row_vector(i));
      zcbm::ProviderConfig scfg = provider.cfg;
      scfg.endpoint = scorer_url;
      scorer_text = zcbm::make_provider_embedder(scfg);
      opts.scorer_images = &scorer_images;
      opts.scorer_text = &scorer_text;
    }
    const zcbm::EvalReport report = zcbm::evaluate(preds, truths, cs, opts);
    const fs::path dir(out);
    open_out(dir / "report.json") << zcbm::to_json(report).dump(2) << "\n";
    {
      auto f = open_out(dir / "report.csv");
      zcbm::write_report_csv(f, report);
    }

    if (!deletion_grid.empty()) {
      std::vector<zcbm::DeletionOrder> orders;
      for (const auto& o : parse_list<std::string>(deletion_orders, "--deletion-orders")) {
        orders.push_back(zcbm::parse_deletion_order(o));
      }
      const auto rows = zcbm::deletion_curve(
          preds, truths, cs, orders, parse_list<double>(deletion_grid, "--deletion-grid"), seed);
      auto f = open_out(dir / "deletion.csv");
      zcbm::write_deletion_csv(f, rows);
    }

    if (!insertion_gt.empty()) {
      std::ifstream in(insertion_gt);
      if (!in) zcbm::fail(zcbm::ErrorCode::kIo, "cannot open " + insertion_gt);
      json doc;
      try {
        doc = json::parse(in);
      } catch (const json::exception& e) {
        zcbm::fail(zcbm::ErrorCode::kInvalidArgument, insertion_gt + ": " + e.what());
      }
      if (!doc.is_array() || doc.size() != preds.size()) {
        zcbm::fail(zcbm::ErrorCode::kLengthMismatch,
                   insertion_gt + ": expected one concept list per image");
      }
      std::vector<std::vector<std::string>> texts;
      std::vector<std::string> flat;
      std::size_t longest = 0;
      for (const auto& list : doc) {
        texts.push_back(list.get<std::vector<std::string>>());
        longest = std::max(longest, texts.back().size());
        flat.insert(flat.end(), texts.back().begin(), texts.back().end());
      }
      const zcbm::EmbeddingMatrix embedded = flat.empty()
                                                 ? zcbm::EmbeddingMatrix(b.dim(), true)
                                                 : provider.embedder()(flat);
      std::vector<std::vector<zcbm::InsertedConcept>> gt;
      std::size_t row = 0;
      for (const auto& list : texts) {
        auto& items = gt.emplace_back();
        for (const auto& t : list) items.push_back({t, zcbm::normalize(embedded.row(row++))});
      }
      std::vector<std::size_t> counts;
      if (insertion_counts.empty()) {
        for (std::size_t m = 0; m <= longest; ++m) counts.push_back(m);
      } else {
        counts = parse_list<std::size_t>(insertion_counts, "--insertion-counts");
      }
      const auto rows = zcbm::insertion_curve(preds, truths, gt, cs, counts);
      auto f = open_out(dir / "insertion.csv");
      zcbm::write_insertion_csv(f, rows);
    }

    if (pca) {
      std::vector<zcbm::EmbeddingMatrix> groups(3, zcbm::EmbeddingMatrix(b.dim(), true));
      for (const auto& p : preds) {
        groups[0].append(p.input.values);
        std::vector<float> r(p.reconstructed.begin(), p.reconstructed.end());
        if (zcbm::l2_norm(r) >= 1e-12) groups[1].append(zcbm::normalize(r).values);
      }
      groups[2] = cs.embeddings;
      auto f = open_out(dir / "pca.csv");
      zcbm::write_pca_csv(f, {"image", "reconstruction", "label"}, zcbm::pca2d(groups));
    }

    std::cout << zcbm::to_json(report).dump() << "\n";
    return kExitOk;
  }
};

struct CalibrateCmd {
  std::string bank;
  std::string images;
  std::string out;
  std::size_t k = zcbm::kDefaultTopK;
  std::string grid = "1e-2,1e-3,1e-4,1e-5,1e-6,1e-7,1e-8";
  double target_ratio = 0.10;
  std::string index_dir;
  SolverFlags solver;

  void add(CLI::App& app) {
    app.add_option("--bank", bank, "Bank directory or manifest")->required();
    app.add_option("--images", images, "ZCBM matrix of image embeddings")->required();
    app.add_option("--out", out, "Also write the result JSON here");
    app.add_option("--k", k, "Concepts retrieved per image")->check(CLI::PositiveNumber);
    app.add_option("--grid", grid, "Comma-separated lambda grid");
    app.add_option("--target-ratio", target_ratio, "Mean nonzero ratio to exceed")
        ->check(CLI::Range(0.0, 1.0));
    app.add_option("--index", index_dir, "IVF index directory; exact search when empty");
    solver.add(app);
  }

  int run() {
    const auto base = solver.resolve();
    const zcbm::ConceptBank b = zcbm::load_bank(bank);
    const auto samples = load_samples(images, b.dim());
    const auto index = load_index(index_dir, 0);
    const auto result = zcbm::calibrate_lambda(samples, b, k, parse_list<double>(grid, "--grid"),
                                               target_ratio, base, index ? &*index : nullptr);
    json ratios = json::array();
    for (double r : result.mean_ratios) ratios.push_back(zcbm::round9(r));
    const json doc = {{"lambda", result.lambda},
                      {"no_qualifier", result.no_qualifier},
                      {"target_ratio", target_ratio},
                      {"k", k},
                      {"grid", result.grid},
                      {"mean_ratios", ratios}};
    std::cerr << "lambda " << result.lambda << (result.no_qualifier ? " (no qualifier)" : "")
              << "\n";
    std::cout << doc.dump() << "\n";
    if (!out.empty()) open_out(out) << doc.dump(2) << "\n";
    return kExitOk;
  }
};

struct BenchCmd {
  std::string bank;
  std::string images;
  std::string truth;
  std::string out = "-";
  std::string k_grid = "128,256,512,1024,2048";
  std::size_t warmup = 3;
  std::string index_dir;
  ClassFlags classes;
  SolverFlags solver;
  ProviderFlags provider;

  void add(CLI::App& app) {
    app.add_option("--bank", bank, "Bank directory or manifest")->required();
    classes.add(app);
    app.add_option("--images", images, "ZCBM matrix of image embeddings")->required();
    app.add_option("--truth", truth, "Ground-truth label ids; adds an accuracy column");
    app.add_option("--out", out, "CSV output file, - for stdout");
    app.add_option("--k-grid", k_grid, "Comma-separated k values");
    app.add_option("--warmup", warmup, "Leading runs excluded from timing");
    app.add_option("--index", index_dir, "IVF index directory; exact search when empty");
    solver.add(app);
    provider.add(app);
  }

  int run() {
    zcbm::BenchmarkOptions opts;
    opts.solver = solver.resolve();
    opts.warmup = warmup;
    const zcbm::ConceptBank b = zcbm::load_bank(bank);
    const zcbm::ClassSet cs = classes.load(provider);
    const auto samples = load_samples(images, b.dim());
    const auto index = load_index(index_dir, 0);
    opts.index = index ? &*index : nullptr;
    std::vector<int> truths;
    if (!truth.empty()) truths = load_truths(truth);
    const auto rows = zcbm::benchmark_inference(b, samples, cs,
                                                parse_list<std::size_t>(k_grid, "--k-grid"), opts,
                                                truth.empty() ? nullptr : &truths);
    if (out == "-") {
      zcbm::write_benchmark_csv(std::cout, rows);
    } else {
      auto f = open_out(out);
      zcbm::write_benchmark_csv(f, rows);
    }
    return kExitOk;
  }
};

struct ServeCmd {
  std::string addr = "127.0.0.1:8080";
  std::string bank;
  std::size_t k = zcbm::kDefaultTopK;
  long session_ttl = 1800;
  std::string cors_origin;
  std::string snapshot;
  std::string ui_dir;
  std::string index_dir;
  ClassFlags classes;
  SolverFlags solver;
  ProviderFlags provider;

  void add(CLI::App& app) {
    app.add_option("--addr", addr, "Listen address host:port");
    app.add_option("--bank", bank, "Bank directory or manifest")->required();
    classes.add(app);
    app.add_option("--k", k, "Default concepts retrieved per request")
        ->check(CLI::PositiveNumber);
    app.add_option("--session-ttl", session_ttl, "Idle seconds before a session expires")
        ->check(CLI::PositiveNumber);
    app.add_option("--cors-origin", cors_origin, "Allowed CORS origin; empty disables CORS");
    app.add_option("--snapshot", snapshot, "Session snapshot file loaded at start, saved at exit");
    app.add_option("--ui-dir", ui_dir, "Static UI bundle served under /ui");
    app.add_option("--index", index_dir, "IVF index directory; exact search when empty");
    solver.add(app);
    provider.add(app);
  }

  int run() {
    const auto colon = addr.rfind(':');
    int port = 0;
    try {
      if (colon == std::string::npos) throw std::invalid_argument(addr);
      port = std::stoi(addr.substr(colon + 1));
    } catch (const std::exception&) {
      zcbm::fail(zcbm::ErrorCode::kInvalidArgument, "--addr must be host:port");
    }
    const std::string host = addr.substr(0, colon);

    zcbm::ServiceConfig cfg;
    cfg.default_k = k;
    cfg.solver = solver.resolve();
    cfg.session_ttl = std::chrono::seconds(session_ttl);
    cfg.cors_origin = cors_origin;
    if (!snapshot.empty()) cfg.snapshot_file = snapshot;
    if (!ui_dir.empty()) cfg.ui_dir = ui_dir;

    const zcbm::ConceptBank b = zcbm::load_bank(bank);
    const zcbm::ClassSet cs = classes.load(provider);
    const auto index = load_index(index_dir, 0);
    zcbm::Service service(b, cs, provider.embedder(), cfg, index ? &*index : nullptr);

    httplib::Server server;
    service.mount(server);

    sigset_t signals;
    sigemptyset(&signals);
    sigaddset(&signals, SIGINT);
    sigaddset(&signals, SIGTERM);
    pthread_sigmask(SIG_BLOCK, &signals, nullptr);
    std::thread waiter([&] {
      int sig = 0;
      sigwait(&signals, &sig);
      server.stop();
    });

    if (!server.bind_to_port(host, port)) {
      pthread_kill(waiter.native_handle(), SIGTERM);
      waiter.join();
      zcbm::fail(zcbm::ErrorCode::kIo, "cannot listen on " + addr);
    }
    std::cerr << "listening on " << addr << "\n";
    server.listen_after_bind();
    if (waiter.joinable()) {
      pthread_kill(waiter.native_handle(), SIGTERM);
      waiter.join();
    }
    service.save_snapshot();
    return kExitOk;
  }
};

int exit_code_for(const zcbm::Error& e) {
  switch (e.code()) {
    case zcbm::ErrorCode::kProviderUnreachable:
    case zcbm::ErrorCode::kProviderBadResponse:
    case zcbm::ErrorCode::kTimeout:
      return kExitProvider;
    default:
      return kExitInput;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Training-free concept bottleneck inference", "zcbm"};
  app.require_subcommand(1);
  app.option_defaults()->always_capture_default();
  app.set_version_flag("--version", "zcbm 1.0.0");

  BuildBankCmd build_bank;
  IndexCmd index;
  InferCmd infer;
  EvalCmd eval;
  CalibrateCmd calibrate;
  BenchCmd bench;
  ServeCmd serve;
  std::function<int()> action;

  // CLI11 reads config files only on the root app, so each subcommand's
  // --config forwards its value to a hidden root option.
  CLI::Option* root_config = app.set_config("--config-file");
  root_config->group("");
  app.config_formatter(std::make_shared<JsonConfig>(&app));

  auto subcommand = [&](const char* name, const char* description, auto& cmd) {
    CLI::App* sub = app.add_subcommand(name, description);
    sub->add_option_function<std::string>(
           "--config", [root_config](const std::string& path) { root_config->add_result(path); },
           "JSON config file; command-line flags take precedence")
        ->configurable(false)
        ->trigger_on_parse();
    cmd.add(*sub);
    sub->callback([&action, &cmd] { action = [&cmd] { return cmd.run(); }; });
  };
  subcommand("build-bank", "Extract, filter and embed a concept bank from tagged captions",
             build_bank);
  subcommand("index", "Build an IVF index over a bank", index);
  subcommand("infer", "Predict labels and concepts for image embeddings", infer);
  subcommand("eval", "Evaluate predictions and write reports and curves", eval);
  subcommand("calibrate", "Pick the lasso penalty from a grid by nonzero ratio", calibrate);
  subcommand("bench", "Time inference stages over a k grid", bench);
  subcommand("serve", "Run the HTTP inference and intervention service", serve);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitInput;
  }

  try {
    return action();
  } catch (const zcbm::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e);
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInput;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return kExitInternal;
  }
}
