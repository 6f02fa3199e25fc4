// Command-line front end: extract-features, run-cv, train-fold, evaluate,
// report, show-config.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "mmtumor/errors.hpp"
#include "mmtumor/pipeline.hpp"

namespace fs = std::filesystem;
using namespace mmtumor;

namespace {

enum Exit { kOk = 0, kUsage = 1, kData = 2, kDivergence = 3 };

struct Flags {
  std::string config;
  std::uint64_t seed = 0;
  std::string out;
  int parallel_folds = 1;
  std::string feature_mode;
  std::string standardize;
  std::string images;
  std::string table;
  bool force = false;
  bool quiet = false;
  std::map<std::string, CLI::Option*> opts;
};

void add_run_flags(CLI::App& cmd, Flags& f) {
  f.opts["config"] = cmd.add_option("--config", f.config, "Config file (TOML-style key = value)");
  f.opts["seed"] = cmd.add_option("--seed", f.seed, "Master seed");
  f.opts["out"] = cmd.add_option("--out", f.out, "Output directory");
  f.opts["parallel"] = cmd.add_option("--parallel-folds", f.parallel_folds, "Folds trained concurrently")
                           ->check(CLI::PositiveNumber);
  f.opts["mode"] = cmd.add_option("--feature-mode", f.feature_mode, "Tabular features")
                       ->check(CLI::IsMember({"shipped", "regenerated"}));
  f.opts["std"] = cmd.add_option("--standardize", f.standardize, "Scaler scope")
                      ->check(CLI::IsMember({"global", "per-fold"}));
  f.opts["images"] = cmd.add_option("--images", f.images, "Image directory");
  f.opts["table"] = cmd.add_option("--table", f.table, "Feature table (CSV)");
  cmd.add_flag("--force", f.force, "Replace or recompute existing results in the output directory");
  cmd.add_flag("-q,--quiet", f.quiet, "Only log warnings and errors");
}

bool given(const Flags& f, const std::string& key) {
  const auto it = f.opts.find(key);
  return it != f.opts.end() && it->second->count() > 0;
}

RunConfig resolve(const Flags& f, const fs::path& fallback_config = {}) {
  RunConfig cfg;
  if (given(f, "config")) {
    cfg = load_run_config(f.config);
  } else if (!fallback_config.empty() && fs::exists(fallback_config)) {
    cfg = load_run_config(fallback_config);
  }
  if (given(f, "seed")) cfg.seed = f.seed;
  if (given(f, "out")) cfg.out_dir = f.out;
  if (given(f, "parallel")) cfg.parallel_folds = f.parallel_folds;
  if (given(f, "mode")) cfg.feature_mode = parse_feature_mode(f.feature_mode);
  if (given(f, "std")) cfg.standardize = parse_standardize_scope(f.standardize);
  if (given(f, "images")) cfg.image_dir = f.images;
  if (given(f, "table")) cfg.features_table = f.table;
  cfg.force = f.force;
  cfg.quiet = f.quiet;
  cfg.validate();
  return cfg;
}

void print_report(const CvReport& report) { std::cout << report_table(report); }

int run(int argc, char** argv) {
  CLI::App app{"Multimodal brain tumor classifier: texture features, DenseNet fusion model, k-fold CV"};
  app.require_subcommand(1);
  auto* extract = app.add_subcommand("extract-features", "Compute the 13 texture features for an image directory");
  std::string extract_images, extract_out, extract_labels, extract_config;
  int levels = 0, max_k = 0;
  extract->add_option("--images", extract_images, "Image directory")->required();
  extract->add_option("--output", extract_out, "Output feature table")->required();
  extract->add_option("--labels", extract_labels, "Table with id and label columns to merge in");
  auto* extract_cfg_opt = extract->add_option("--config", extract_config, "Config file ([features] section)");
  auto* levels_opt = extract->add_option("--levels", levels, "Gray levels for the co-occurrence matrix");
  auto* max_k_opt = extract->add_option("--tamura-max-k", max_k, "Largest coarseness window exponent");
  bool extract_quiet = false;
  extract->add_flag("-q,--quiet", extract_quiet, "Only log warnings and errors");

  auto* run_cv_cmd = app.add_subcommand("run-cv", "Run the full cross-validation protocol");
  Flags cv_flags;
  add_run_flags(*run_cv_cmd, cv_flags);

  auto* train = app.add_subcommand("train-fold", "Train a single fold of the protocol");
  Flags train_flags;
  add_run_flags(*train, train_flags);
  int fold = 0;
  train->add_option("--fold", fold, "Fold index (1-based)")->required();

  auto* evaluate = app.add_subcommand("evaluate", "Evaluate a checkpoint on a dataset");
  Flags eval_flags;
  add_run_flags(*evaluate, eval_flags);
  std::string checkpoint;
  std::string split = "all";
  evaluate->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  evaluate->add_option("--split", split, "Samples to evaluate")->check(CLI::IsMember({"all", "validation"}));

  auto* report = app.add_subcommand("report", "Rebuild the report files from finished folds");
  Flags report_flags;
  add_run_flags(*report, report_flags);

  auto* show = app.add_subcommand("show-config", "Print the resolved configuration");
  Flags show_flags;
  add_run_flags(*show, show_flags);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kUsage;
  }

  if (*extract) {
    RunConfig cfg;
    if (extract_cfg_opt->count()) cfg = load_run_config(extract_config);
    FeatureConfig fc = cfg.features;
    if (levels_opt->count()) fc.levels = levels;
    if (max_k_opt->count()) fc.tamura_max_k = max_k;
    std::optional<fs::path> labels;
    if (!extract_labels.empty()) labels = extract_labels;
    const ExtractSummary s = extract_features_cmd(extract_images, extract_out, fc, labels, extract_quiet);
    std::cout << "processed " << s.processed << ", failed " << s.failed << "\n";
    return kOk;
  }
  if (*run_cv_cmd) {
    print_report(run_cv(resolve(cv_flags)));
    return kOk;
  }
  if (*train) {
    const FoldMetrics m = train_fold_cmd(resolve(train_flags), fold);
    std::cout << nlohmann::json(m).dump(2) << "\n";
    return kOk;
  }
  if (*evaluate) {
    const FoldMetrics m = evaluate_cmd(checkpoint, resolve(eval_flags), split == "validation");
    std::cout << nlohmann::json(m).dump(2) << "\n";
    return kOk;
  }
  if (*report) {
    const fs::path out = given(report_flags, "out") ? fs::path(report_flags.out) : RunConfig{}.out_dir;
    const RunConfig cfg = resolve(report_flags, out / "config.toml");
    print_report(assemble_report(out, cfg.folds));
    return kOk;
  }
  if (*show) {
    std::cout << render_config(resolve(show_flags));
    return kOk;
  }
  return kUsage;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    switch (e.category()) {
      case Error::Category::Usage: return kUsage;
      case Error::Category::Data: return kData;
      case Error::Category::Divergence: return kDivergence;
    }
    return kData;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kData;
  }
}
