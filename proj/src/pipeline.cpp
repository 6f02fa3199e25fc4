#include "mmtumor/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <exception>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <spdlog/sinks/basic_file_sink.h>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "mmtumor/checkpoint.hpp"
#include "mmtumor/errors.hpp"
#include "mmtumor/rng.hpp"

namespace fs = std::filesystem;

namespace mmtumor {

std::string to_string(FeatureMode m) { return m == FeatureMode::Shipped ? "shipped" : "regenerated"; }

std::string to_string(StandardizeScope s) { return s == StandardizeScope::Global ? "global" : "per-fold"; }

FeatureMode parse_feature_mode(const std::string& text) {
  if (text == "shipped") return FeatureMode::Shipped;
  if (text == "regenerated") return FeatureMode::Regenerated;
  throw ConfigError("feature mode must be 'shipped' or 'regenerated', got '" + text + "'");
}

StandardizeScope parse_standardize_scope(const std::string& text) {
  if (text == "global") return StandardizeScope::Global;
  if (text == "per-fold" || text == "per_fold") return StandardizeScope::PerFold;
  throw ConfigError("standardize must be 'global' or 'per-fold', got '" + text + "'");
}

void RunConfig::validate() const {
  if (folds < 2) throw ConfigError("cv.folds must be at least 2");
  if (parallel_folds < 1) throw ConfigError("parallel folds must be at least 1");
  if (features.levels < 2) throw ConfigError("features.levels must be at least 2");
  if (features.tamura_max_k < 1) throw ConfigError("features.tamura_max_k must be at least 1");
  try {
    model.validate();
  } catch (const BuildError& e) {
    throw ConfigError(std::string("model: ") + e.what());
  }
  train.validate();
}

// ---------------------------------------------------------------------------
// config text

namespace {

using Values = std::vector<std::string>;

std::string single(const std::string& key, const Values& v) {
  if (v.size() != 1) throw ConfigError(key + " expects a single value");
  return v.front();
}

double to_double(const std::string& key, const Values& v) {
  const std::string s = single(key, v);
  double out = 0.0;
  const char* first = s.data() + (!s.empty() && s.front() == '+' ? 1 : 0);
  const auto [ptr, ec] = std::from_chars(first, s.data() + s.size(), out);
  if (ec != std::errc() || ptr != s.data() + s.size()) throw ConfigError(key + ": '" + s + "' is not a number");
  return out;
}

std::uint64_t to_u64(const std::string& key, const std::string& s) {
  std::uint64_t out = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    throw ConfigError(key + ": '" + s + "' is not a non-negative integer");
  }
  return out;
}

std::uint64_t to_u64(const std::string& key, const Values& v) { return to_u64(key, single(key, v)); }

int to_int(const std::string& key, const Values& v) {
  const std::uint64_t x = to_u64(key, v);
  if (x > 1'000'000'000) throw ConfigError(key + " is out of range");
  return static_cast<int>(x);
}

std::vector<std::size_t> to_sizes(const std::string& key, const Values& v) {
  std::vector<std::size_t> out;
  for (const std::string& s : v) out.push_back(static_cast<std::size_t>(to_u64(key, s)));
  return out;
}

bool to_bool(const std::string& key, const Values& v) {
  const std::string s = single(key, v);
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw ConfigError(key + ": '" + s + "' is not true or false");
}

using Setter = std::function<void(RunConfig&, const std::string&, const Values&)>;

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = {
      {"data.image_dir", [](RunConfig& c, const std::string& k, const Values& v) { c.image_dir = single(k, v); }},
      {"data.features_table",
       [](RunConfig& c, const std::string& k, const Values& v) { c.features_table = single(k, v); }},
      {"data.id_column", [](RunConfig& c, const std::string& k, const Values& v) { c.id_column = single(k, v); }},
      {"data.label_column",
       [](RunConfig& c, const std::string& k, const Values& v) { c.label_column = single(k, v); }},
      {"data.feature_mode",
       [](RunConfig& c, const std::string& k, const Values& v) { c.feature_mode = parse_feature_mode(single(k, v)); }},
      {"data.balance", [](RunConfig& c, const std::string& k, const Values& v) { c.balance = to_bool(k, v); }},
      {"data.balance_before_standardize",
       [](RunConfig& c, const std::string& k, const Values& v) { c.balance_before_standardize = to_bool(k, v); }},
      {"data.standardize",
       [](RunConfig& c, const std::string& k, const Values& v) {
         c.standardize = parse_standardize_scope(single(k, v));
       }},
      {"cv.folds", [](RunConfig& c, const std::string& k, const Values& v) { c.folds = to_int(k, v); }},
      {"cv.seed", [](RunConfig& c, const std::string& k, const Values& v) { c.seed = to_u64(k, v); }},
      {"features.levels",
       [](RunConfig& c, const std::string& k, const Values& v) { c.features.levels = to_int(k, v); }},
      {"features.tamura_max_k",
       [](RunConfig& c, const std::string& k, const Values& v) { c.features.tamura_max_k = to_int(k, v); }},
      {"model.image_height",
       [](RunConfig& c, const std::string& k, const Values& v) { c.model.image_height = to_u64(k, v); }},
      {"model.image_width",
       [](RunConfig& c, const std::string& k, const Values& v) { c.model.image_width = to_u64(k, v); }},
      {"model.image_channels",
       [](RunConfig& c, const std::string& k, const Values& v) { c.model.image_channels = to_u64(k, v); }},
      {"model.initial_features",
       [](RunConfig& c, const std::string& k, const Values& v) { c.model.image_head.initial_features = to_u64(k, v); }},
      {"model.growth_rate",
       [](RunConfig& c, const std::string& k, const Values& v) { c.model.image_head.growth_rate = to_u64(k, v); }},
      {"model.block_layers",
       [](RunConfig& c, const std::string& k, const Values& v) { c.model.image_head.block_layers = to_sizes(k, v); }},
      {"model.compression",
       [](RunConfig& c, const std::string& k, const Values& v) { c.model.image_head.compression = to_double(k, v); }},
      {"model.bottleneck_width",
       [](RunConfig& c, const std::string& k, const Values& v) { c.model.image_head.bottleneck_width = to_u64(k, v); }},
      {"model.tabular_widths",
       [](RunConfig& c, const std::string& k, const Values& v) { c.model.tabular_widths = to_sizes(k, v); }},
      {"model.fusion_norm",
       [](RunConfig& c, const std::string& k, const Values& v) {
         const std::string s = single(k, v);
         if (s == "batch") c.model.fusion_norm = FusionNorm::Batch;
         else if (s == "layer") c.model.fusion_norm = FusionNorm::Layer;
         else throw ConfigError(k + " must be 'batch' or 'layer', got '" + s + "'");
       }},
      {"model.classifier_widths",
       [](RunConfig& c, const std::string& k, const Values& v) { c.model.classifier_widths = to_sizes(k, v); }},
      {"train.learning_rate",
       [](RunConfig& c, const std::string& k, const Values& v) { c.train.learning_rate = to_double(k, v); }},
      {"train.batch_size",
       [](RunConfig& c, const std::string& k, const Values& v) { c.train.batch_size = to_u64(k, v); }},
      {"train.max_epochs", [](RunConfig& c, const std::string& k, const Values& v) { c.train.max_epochs = to_int(k, v); }},
      {"train.early_stop_min_delta",
       [](RunConfig& c, const std::string& k, const Values& v) { c.train.early_stop_min_delta = to_double(k, v); }},
      {"train.early_stop_patience",
       [](RunConfig& c, const std::string& k, const Values& v) { c.train.early_stop_patience = to_int(k, v); }},
      {"train.restore_best",
       [](RunConfig& c, const std::string& k, const Values& v) { c.train.restore_best = to_bool(k, v); }},
      {"run.out", [](RunConfig& c, const std::string& k, const Values& v) { c.out_dir = single(k, v); }},
      {"run.parallel_folds",
       [](RunConfig& c, const std::string& k, const Values& v) { c.parallel_folds = to_int(k, v); }},
  };
  return table;
}

std::string fmt_double(double x) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, x);
  std::string s(buf, res.ptr);
  // keep it a float literal so TOML readers do not take it for an integer
  if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
  return s;
}

std::string fmt_list(const std::vector<std::size_t>& v) {
  std::string s = "[";
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + std::to_string(v[i]);
  return s + "]";
}

std::string quoted(const std::string& s) { return "\"" + s + "\""; }

}  // namespace

void apply_config(RunConfig& cfg, std::istream& in, const std::string& source) {
  std::vector<CLI::ConfigItem> items;
  try {
    items = CLI::ConfigTOML().from_config(in);
  } catch (const CLI::Error& e) {
    throw ConfigError(source + ": " + e.what());
  }
  for (const CLI::ConfigItem& item : items) {
    if (item.name == "++" || item.name == "--") continue;  // section markers
    std::string key;
    for (const std::string& p : item.parents) key += p + ".";
    key += item.name;
    const auto it = setters().find(key);
    if (it == setters().end()) throw ConfigError(source + ": unknown key '" + key + "'");
    it->second(cfg, key, item.inputs);
  }
}

RunConfig load_run_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  RunConfig cfg;
  apply_config(cfg, in, path.string());
  return cfg;
}

std::string render_config(const RunConfig& c, bool include_runtime) {
  const DenseNetConfig& d = c.model.image_head;
  std::ostringstream o;
  o << "# mmtumor run configuration\n\n"
    << "[data]\n"
    << "image_dir = " << quoted(c.image_dir.string()) << "\n"
    << "features_table = " << quoted(c.features_table.string()) << "\n"
    << "id_column = " << quoted(c.id_column) << "\n"
    << "label_column = " << quoted(c.label_column) << "\n"
    << "# shipped: use the table's feature columns; regenerated: recompute from the images\n"
    << "feature_mode = " << quoted(to_string(c.feature_mode)) << "\n"
    << "balance = " << (c.balance ? "true" : "false") << "\n"
    << "balance_before_standardize = " << (c.balance_before_standardize ? "true" : "false") << "\n"
    << "# global or per-fold (fit on the training part of each fold)\n"
    << "standardize = " << quoted(to_string(c.standardize)) << "\n\n"
    << "[cv]\n"
    << "folds = " << c.folds << "\n"
    << "seed = " << c.seed << "\n\n"
    << "[features]\n"
    << "# entropy is the co-occurrence matrix entropy, averaged over the four offsets\n"
    << "levels = " << c.features.levels << "\n"
    << "tamura_max_k = " << c.features.tamura_max_k << "\n\n"
    << "[model]\n"
    << "image_height = " << c.model.image_height << "\n"
    << "image_width = " << c.model.image_width << "\n"
    << "image_channels = " << c.model.image_channels << "\n"
    << "initial_features = " << d.initial_features << "\n"
    << "growth_rate = " << d.growth_rate << "\n"
    << "block_layers = " << fmt_list(d.block_layers) << "\n"
    << "compression = " << fmt_double(d.compression) << "\n"
    << "bottleneck_width = " << d.bottleneck_width << "\n"
    << "tabular_widths = " << fmt_list(c.model.tabular_widths) << "\n"
    << "# batch or layer\n"
    << "fusion_norm = " << quoted(c.model.fusion_norm == FusionNorm::Batch ? "batch" : "layer") << "\n"
    << "classifier_widths = " << fmt_list(c.model.classifier_widths) << "\n\n"
    << "[train]\n"
    << "learning_rate = " << fmt_double(c.train.learning_rate) << "\n"
    << "batch_size = " << c.train.batch_size << "\n"
    << "max_epochs = " << c.train.max_epochs << "\n"
    << "early_stop_min_delta = " << fmt_double(c.train.early_stop_min_delta) << "\n"
    << "early_stop_patience = " << c.train.early_stop_patience << "\n"
    << "restore_best = " << (c.train.restore_best ? "true" : "false") << "\n";
  if (include_runtime) {
    o << "\n[run]\n"
      << "out = " << quoted(c.out_dir.string()) << "\n"
      << "parallel_folds = " << c.parallel_folds << "\n";
  }
  return o.str();
}

// ---------------------------------------------------------------------------
// helpers

namespace {

std::shared_ptr<spdlog::logger> make_logger(const RunConfig& cfg, const fs::path& log_file = {}) {
  std::vector<spdlog::sink_ptr> sinks;
  auto console = std::make_shared<spdlog::sinks::stderr_color_sink_mt>();
  console->set_level(cfg.quiet ? spdlog::level::warn : spdlog::level::info);
  sinks.push_back(console);
  if (!log_file.empty()) sinks.push_back(std::make_shared<spdlog::sinks::basic_file_sink_mt>(log_file.string()));
  auto log = std::make_shared<spdlog::logger>("mmtumor", sinks.begin(), sinks.end());
  log->set_level(spdlog::level::info);
  log->set_pattern("[%Y-%m-%d %H:%M:%S] [%l] %v");
  return log;
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void write_text(const fs::path& p, const std::string& text) {
  const fs::path tmp = p.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw LoadError("cannot write " + p.string());
    out << text;
    if (!out) throw LoadError("failed writing " + p.string());
  }
  fs::rename(tmp, p);
}

fs::path fold_dir(const fs::path& out, int fold) { return out / ("fold_" + std::to_string(fold)); }

bool fold_done(const fs::path& out, int fold) {
  return fs::exists(fold_dir(out, fold) / "metrics.json") && fs::exists(fold_dir(out, fold) / "checkpoint.mmt");
}

const char* const kReportFiles[] = {"report.csv", "report.json", "plotdata.csv"};

void remove_run_outputs(const fs::path& out) {
  for (const auto& entry : fs::directory_iterator(out)) {
    const std::string name = entry.path().filename().string();
    if (entry.is_directory() && name.rfind("fold_", 0) == 0) fs::remove_all(entry.path());
  }
  for (const char* f : kReportFiles) fs::remove(out / f);
  fs::remove(out / "manifest.csv");
  fs::remove(out / "run.log");
}

enum class Scope { WholeRun, SingleFold };

// Enforces that an output directory never mixes runs.
void claim_output_dir(const RunConfig& cfg, Scope scope, int fold = 0) {
  const fs::path& out = cfg.out_dir;
  fs::create_directories(out);
  const fs::path stamp = out / "config.toml";
  const std::string protocol = render_config(cfg, false);
  if (fs::exists(stamp)) {
    const bool same = read_text(stamp) == protocol;
    if (!same && !cfg.force) {
      throw ConfigError(out.string() + " holds a run with a different configuration; choose another output "
                        "directory or pass --force to replace it");
    }
    if (!same) {
      remove_run_outputs(out);
    } else if (scope == Scope::WholeRun) {
      if (cfg.force) {
        remove_run_outputs(out);
      } else if (fs::exists(out / "report.csv")) {
        throw ConfigError(out.string() + " already holds a finished run; pass --force to recompute it");
      }
    } else {
      if (fold_done(out, fold) && !cfg.force) {
        throw ConfigError("fold " + std::to_string(fold) + " is already trained in " + out.string() +
                          "; pass --force to retrain it");
      }
      for (const char* f : kReportFiles) fs::remove(out / f);
    }
  } else {
    for (const auto& entry : fs::directory_iterator(out)) {
      const std::string name = entry.path().filename().string();
      if (name.rfind("fold_", 0) == 0 || name == "report.csv") {
        if (!cfg.force) {
          throw ConfigError(out.string() + " holds results without a config.toml; pass --force to replace them");
        }
        remove_run_outputs(out);
        break;
      }
    }
  }
  write_text(stamp, protocol);
}

// Re-raises with the fold number prefixed, keeping the error category.
[[noreturn]] void rethrow_with_fold(std::exception_ptr error, int fold) {
  const std::string prefix = "fold " + std::to_string(fold) + ": ";
  try {
    std::rethrow_exception(error);
  } catch (const DivergenceError& e) {
    throw DivergenceError(e.epoch(), prefix + e.what());
  } catch (const Error& e) {
    throw Error(e.category(), prefix + e.what());
  }
}

std::vector<FeatureVector> regenerate_features(const Dataset& ds, const FeatureConfig& fc) {
  std::vector<FeatureVector> out;
  out.reserve(ds.size());
  for (const Sample& s : ds.samples()) {
    FeatureVector v;
    try {
      v = extract_feature_vector(*s.image, fc);
    } catch (const ParameterError& e) {
      throw DataError("cannot extract features for id '" + s.id + "': " + e.what());
    }
    if (!v.all_finite()) throw DataError("non-finite features for id '" + s.id + "'");
    out.push_back(v);
  }
  return out;
}

FeatureConfig feature_config_for(const RunConfig& cfg) {
  FeatureConfig fc = cfg.features;
  fc.expected_height = cfg.model.image_height;
  fc.expected_width = cfg.model.image_width;
  return fc;
}

DatasetSchema schema_for(const RunConfig& cfg, const ModelSpec& spec, FeatureMode mode) {
  DatasetSchema schema;
  schema.id_column = cfg.id_column;
  schema.label_column = cfg.label_column;
  schema.features_required = mode == FeatureMode::Shipped;
  schema.image_height = spec.image_height;
  schema.image_width = spec.image_width;
  return schema;
}

bool both_classes(const std::vector<Label>& labels) {
  const auto ill = std::count(labels.begin(), labels.end(), Label::Ill);
  return ill > 0 && static_cast<std::size_t>(ill) < labels.size();
}

FoldMetrics metrics_of(int fold, const Evaluation& ev) {
  const ConfusionMatrix cm = confusion(ev.labels, ev.predictions);
  FoldMetrics m;
  m.fold = fold;
  m.accuracy = accuracy(cm);
  m.auc = both_classes(ev.labels) ? auc(ev.labels, ev.ill_probabilities) : 0.0;
  m.loss = ev.loss;
  m.precision = precision(cm);
  m.recall = recall(cm);
  m.f1 = f1(cm);
  return m;
}

std::string format_value(double x) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, res.ptr);
}

}  // namespace

// ---------------------------------------------------------------------------
// protocol

PreparedData prepare_data(const RunConfig& cfg) {
  cfg.validate();
  PreparedData data;
  Dataset ds = load_dataset(cfg.image_dir, cfg.features_table, schema_for(cfg, cfg.model, cfg.feature_mode));
  if (cfg.feature_mode == FeatureMode::Regenerated) {
    ds = ds.with_features(regenerate_features(ds, feature_config_for(cfg)));
  }
  const std::uint64_t balance_seed = derive_seed(cfg.seed, "balance");
  if (cfg.balance && cfg.balance_before_standardize) ds = balance_classes(ds, balance_seed);
  if (cfg.standardize == StandardizeScope::Global) {
    Standardized st = standardize_features(ds);
    ds = std::move(st.dataset);
    data.global_scaler = st.params;
  }
  if (cfg.balance && !cfg.balance_before_standardize) ds = balance_classes(ds, balance_seed);
  data.folds = stratified_kfold(ds, cfg.folds, derive_seed(cfg.seed, "split"));
  data.dataset = std::move(ds);
  return data;
}

namespace {

FoldMetrics run_fold_logged(const RunConfig& cfg, const PreparedData& data, int fold_index,
                            spdlog::logger& log) {
  if (fold_index < 1 || fold_index > static_cast<int>(data.folds.size())) {
    throw ConfigError("fold index " + std::to_string(fold_index) + " outside 1.." +
                      std::to_string(data.folds.size()));
  }
  const FoldSplit& fold = data.folds[static_cast<std::size_t>(fold_index - 1)];

  ScalerParams scaler = data.global_scaler;
  Dataset per_fold;
  const Dataset* ds = &data.dataset;
  if (cfg.standardize == StandardizeScope::PerFold) {
    scaler = fit_scaler(data.dataset.subset(fold.train));
    per_fold = apply_scaler(data.dataset, scaler);
    ds = &per_fold;
  }

  const fs::path dir = fold_dir(cfg.out_dir, fold_index);
  fs::create_directories(dir);
  fs::remove(dir / "metrics.json");
  std::ofstream history(dir / "history.jsonl", std::ios::trunc);
  if (!history) throw LoadError("cannot write " + (dir / "history.jsonl").string());

  TrainConfig tc = cfg.train;
  tc.seed = cfg.seed;
  log.info("fold {}: training on {} samples, validating on {}", fold_index, fold.train.size(),
           fold.validation.size());
  FoldResult result = train_fold(cfg.model, fold, *ds, tc, [&](const EpochRecord& r) {
    history << nlohmann::json(r).dump() << "\n" << std::flush;
    log.info("fold {} epoch {}: train_loss {:.6f} val_loss {:.6f} val_accuracy {:.4f}", fold_index, r.epoch,
             r.train_loss, r.val_loss, r.val_accuracy);
  });

  CheckpointInfo info;
  info.scaler = scaler;
  info.fold = fold_index;
  info.best_epoch = result.best_epoch;
  info.feature_mode = to_string(cfg.feature_mode);
  info.feature_levels = cfg.features.levels;
  info.tamura_max_k = cfg.features.tamura_max_k;
  for (std::size_t i : fold.validation) info.validation_ids.push_back((*ds)[i].id);
  info.metrics = result.metrics;
  save_checkpoint(dir / "checkpoint.mmt", result.model, info);

  nlohmann::json summary = result.metrics;
  summary["best_epoch"] = result.best_epoch;
  summary["epochs"] = result.history.size();
  write_text(dir / "metrics.json", summary.dump(2) + "\n");
  log.info("fold {}: best epoch {}, accuracy {:.4f}, auc {:.4f}, loss {:.6f}", fold_index, result.best_epoch,
           result.metrics.accuracy, result.metrics.auc, result.metrics.loss);
  return result.metrics;
}

}  // namespace

FoldMetrics run_fold(const RunConfig& cfg, const PreparedData& data, int fold_index) {
  auto log = make_logger(cfg);
  return run_fold_logged(cfg, data, fold_index, *log);
}

CvReport run_cv(const RunConfig& cfg) {
  cfg.validate();
  claim_output_dir(cfg, Scope::WholeRun);
  auto log = make_logger(cfg, cfg.out_dir / "run.log");
  log->info("configuration:\n{}", render_config(cfg));

  const PreparedData data = prepare_data(cfg);
  const ClassCounts& counts = data.dataset.class_counts();
  log->info("dataset: {} samples ({} healthy, {} ill), {} folds", data.dataset.size(), counts.healthy,
            counts.ill, data.folds.size());
  write_manifest(cfg.out_dir / "manifest.csv", data.dataset, data.folds);

  std::vector<int> pending;
  for (int f = 1; f <= cfg.folds; ++f) {
    if (fold_done(cfg.out_dir, f)) {
      log->info("fold {}: reusing finished results", f);
    } else {
      pending.push_back(f);
    }
  }

  std::vector<std::exception_ptr> errors(pending.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < pending.size(); i = next++) {
      try {
        run_fold_logged(cfg, data, pending[i], *log);
      } catch (...) {
        errors[i] = std::current_exception();
        log->error("fold {} failed", pending[i]);
      }
    }
  };
  const auto workers = std::min<std::size_t>(static_cast<std::size_t>(cfg.parallel_folds), pending.size());
  if (workers <= 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < workers; ++t) pool.emplace_back(worker);
  }
  for (std::size_t i = 0; i < pending.size(); ++i) {
    if (errors[i]) rethrow_with_fold(errors[i], pending[i]);
  }

  CvReport report = assemble_report(cfg.out_dir, cfg.folds);
  log->info("average: accuracy {:.4f}, auc {:.4f}, precision {:.4f}, recall {:.4f}, f1 {:.4f}",
            report.average.accuracy, report.average.auc, report.average.precision, report.average.recall,
            report.average.f1);
  return report;
}

FoldMetrics train_fold_cmd(const RunConfig& cfg, int fold_index) {
  cfg.validate();
  if (fold_index < 1 || fold_index > cfg.folds) {
    throw ConfigError("fold must be in 1.." + std::to_string(cfg.folds) + ", got " + std::to_string(fold_index));
  }
  claim_output_dir(cfg, Scope::SingleFold, fold_index);
  auto log = make_logger(cfg, cfg.out_dir / "run.log");
  log->info("configuration:\n{}", render_config(cfg));
  const PreparedData data = prepare_data(cfg);
  write_manifest(cfg.out_dir / "manifest.csv", data.dataset, data.folds);
  try {
    return run_fold_logged(cfg, data, fold_index, *log);
  } catch (const Error&) {
    rethrow_with_fold(std::current_exception(), fold_index);
  }
}

CvReport assemble_report(const fs::path& out_dir, int folds) {
  std::vector<FoldMetrics> per_fold;
  for (int f = 1; f <= folds; ++f) {
    const fs::path p = fold_dir(out_dir, f) / "metrics.json";
    if (!fs::exists(p)) throw DataError("fold " + std::to_string(f) + " has no results in " + out_dir.string());
    try {
      per_fold.push_back(nlohmann::json::parse(read_text(p)).get<FoldMetrics>());
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(p.string() + ": " + e.what());
    }
  }
  CvReport report = aggregate(per_fold);
  write_text(out_dir / "report.csv", report_table(report));
  write_text(out_dir / "report.json", report_json(report).dump(2) + "\n");
  write_text(out_dir / "plotdata.csv", plot_data(report));
  return report;
}

// ---------------------------------------------------------------------------
// feature extraction and evaluation

ExtractSummary extract_features_cmd(const fs::path& image_dir, const fs::path& out_table, const FeatureConfig& cfg,
                                    const std::optional<fs::path>& labels_path, bool quiet) {
  RunConfig log_cfg;
  log_cfg.quiet = quiet;
  auto log = make_logger(log_cfg);

  std::error_code ec;
  fs::directory_iterator it(image_dir, ec);
  if (ec) throw LoadError("cannot open image directory " + image_dir.string() + ": " + ec.message());
  std::vector<fs::path> files;
  for (const auto& entry : it) {
    if (entry.is_regular_file() && has_image_extension(entry.path())) files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());

  std::map<std::string, Label> labels;
  if (labels_path) labels = read_labels(*labels_path);

  std::string header = "id";
  if (labels_path) header += ",label";
  for (std::string_view name : kFeatureNames) header += "," + std::string(name);
  std::string text = header + "\n";

  ExtractSummary summary;
  std::map<std::string, std::string> rows;  // sorted by id
  for (const fs::path& file : files) {
    const std::string id = file.stem().string();
    auto fail = [&](const std::string& why) {
      ++summary.failed;
      log->warn("skipping {}: {}", file.string(), why);
    };
    if (rows.count(id)) {
      fail("another image already has id '" + id + "'");
      continue;
    }
    std::string row = id;
    if (labels_path) {
      const auto hit = labels.find(id);
      if (hit == labels.end()) {
        fail("no label for id '" + id + "'");
        continue;
      }
      row += hit->second == Label::Ill ? ",1" : ",0";
    }
    const auto image = read_gray_image(file);
    if (!image) {
      fail("unreadable image");
      continue;
    }
    FeatureVector v;
    try {
      v = extract_feature_vector(*image, cfg);
    } catch (const ParameterError& e) {
      fail(e.what());
      continue;
    }
    for (std::size_t f = 0; f < kFeatureCount; ++f) row += "," + format_value(v[f]);
    rows.emplace(id, row);
    ++summary.processed;
  }
  for (const auto& [id, row] : rows) text += row + "\n";
  if (out_table.has_parent_path()) fs::create_directories(out_table.parent_path());
  write_text(out_table, text);
  log->info("extracted features for {} images ({} failed) into {}", summary.processed, summary.failed,
            out_table.string());
  return summary;
}

FoldMetrics evaluate_cmd(const fs::path& checkpoint, const RunConfig& cfg, bool validation_only) {
  LoadedCheckpoint loaded = load_checkpoint(checkpoint);
  const ModelSpec& spec = loaded.model.spec();
  const CheckpointInfo& info = loaded.info;
  FeatureMode mode;
  try {
    mode = parse_feature_mode(info.feature_mode);
  } catch (const ConfigError& e) {
    throw EvaluationError(checkpoint.string() + ": " + e.what());
  }

  Dataset ds;
  try {
    ds = load_dataset(cfg.image_dir, cfg.features_table, schema_for(cfg, spec, mode));
  } catch (const SchemaError& e) {
    throw EvaluationError("dataset does not match the checkpoint: " + std::string(e.what()));
  }
  if (mode == FeatureMode::Regenerated) {
    FeatureConfig fc;
    fc.levels = info.feature_levels;
    fc.tamura_max_k = info.tamura_max_k;
    ds = ds.with_features(regenerate_features(ds, fc));
  }

  std::vector<std::size_t> indices;
  if (validation_only) {
    for (const std::string& id : info.validation_ids) {
      const std::size_t i = ds.find(id);
      if (i == ds.size()) throw EvaluationError("validation id '" + id + "' is not in the dataset");
      indices.push_back(i);
    }
  } else {
    indices.resize(ds.size());
    for (std::size_t i = 0; i < ds.size(); ++i) indices[i] = i;
  }
  if (indices.empty()) throw EvaluationError("nothing to evaluate: the dataset is empty");

  const Dataset scaled = apply_scaler(ds, info.scaler);
  const Evaluation ev = evaluate_model(loaded.model, scaled, indices, cfg.train.batch_size);
  return metrics_of(info.fold, ev);
}

}  // namespace mmtumor
