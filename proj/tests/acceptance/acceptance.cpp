// Acceptance suite. Prints one PASS/FAIL/SKIP line per criterion and exits
// nonzero if any criterion fails. Pass criterion numbers to run a subset.
//
// Criterion 10 needs the real dataset: set MMTUMOR_DATASET_DIR to a
// directory holding images/ and features.csv (MMTUMOR_DATASET_CONFIG may
// name a config file instead; its data paths are used as given).

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "gradcheck.hpp"
#include "mmtumor/data.hpp"
#include "mmtumor/features.hpp"
#include "mmtumor/metrics.hpp"
#include "mmtumor/model.hpp"
#include "mmtumor/pipeline.hpp"
#include "mmtumor/training.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace mmtumor;
namespace fs = std::filesystem;

namespace {

enum class Verdict { Pass, Fail, Skip };

struct Outcome {
  Verdict verdict = Verdict::Pass;
  std::string detail;
};

Outcome pass(std::string detail) { return {Verdict::Pass, std::move(detail)}; }
Outcome fail(std::string detail) { return {Verdict::Fail, std::move(detail)}; }

struct Criterion {
  int id;
  std::string name;
  double limit_seconds;  // 0: no limit
  std::function<Outcome()> run;
};

bool close(double a, double b, double tol) { return std::abs(a - b) <= tol * std::max(1.0, std::abs(b)); }

std::string num(double v) {
  std::ostringstream o;
  o << v;
  return o.str();
}

// 1 -------------------------------------------------------------------------

Outcome feature_oracles() {
  Rng rng(101);
  std::uniform_int_distribution<std::size_t> dim(4, 16);
  std::uniform_int_distribution<int> range_pick(0, 3);
  const int level_choices[] = {2, 4, 8};
  const int ranges[] = {255, 255, 15, 1};  // mostly full range, some low-entropy images
  double worst = 0.0;
  std::size_t images = 0;
  for (int n = 0; n < 150; ++n) {
    const std::size_t h = dim(rng), w = dim(rng);
    const GrayImage img = support::random_image(h, w, rng, ranges[range_pick(rng)]);
    FeatureConfig fc;
    fc.levels = level_choices[n % 3];
    fc.tamura_max_k = static_cast<int>(std::floor(std::log2(static_cast<double>(std::min(h, w))))) - 1;
    const FeatureVector got = extract_feature_vector(img, fc);
    const std::vector<double> want = oracle::features(img, fc.levels, fc.tamura_max_k);
    for (std::size_t f = 0; f < kFeatureCount; ++f) {
      const double err = std::abs(got[f] - want[f]) / std::max(1.0, std::abs(want[f]));
      worst = std::max(worst, err);
      if (err > 1e-9) {
        return fail("image " + std::to_string(n) + " (" + std::to_string(h) + "x" + std::to_string(w) + ", L=" +
                    std::to_string(fc.levels) + "): " + std::string(kFeatureNames[f]) + " = " + num(got[f]) +
                    ", oracle " + num(want[f]));
      }
    }
    ++images;
  }
  return pass(std::to_string(images) + " images, worst relative error " + num(worst));
}

// 2 -------------------------------------------------------------------------

Outcome glcm_laws() {
  Rng rng(202);
  std::uniform_int_distribution<std::size_t> dim(2, 24);
  std::uniform_int_distribution<int> level(2, 32);
  std::uniform_int_distribution<int> value(0, 255);
  std::size_t matrices = 0;
  for (int n = 0; n < 200; ++n) {
    const std::size_t h = dim(rng), w = dim(rng);
    const int L = level(rng);
    const bool constant = n % 4 == 0;
    const GrayImage img = constant ? support::constant_image(h, w, value(rng)) : support::random_image(h, w, rng);
    const QuantizedImage q = quantize(img, L);
    for (const Offset& off : kDefaultOffsets) {
      const Glcm g = compute_glcm(q, off);
      double sum = 0.0;
      for (int i = 0; i < L; ++i) {
        for (int j = 0; j < L; ++j) {
          sum += g.at(i, j);
          if (g.at(i, j) != g.at(j, i)) return fail("asymmetric matrix for image " + std::to_string(n));
          if (g.at(i, j) < 0.0) return fail("negative entry for image " + std::to_string(n));
        }
      }
      if (std::abs(sum - 1.0) > 1e-9) return fail("mass " + num(sum) + " for image " + std::to_string(n));
      if (constant) {
        const GlcmStats s = glcm_features(g);
        if (s.contrast != 0.0 || std::abs(s.homogeneity - 1.0) > 1e-12 || std::abs(s.entropy) > 1e-12 ||
            s.correlation != 1.0 || s.dissimilarity != 0.0 || std::abs(s.angular_second_moment - 1.0) > 1e-12) {
          return fail("degenerate values wrong for constant image " + std::to_string(n));
        }
      }
      ++matrices;
    }
  }
  return pass(std::to_string(matrices) + " matrices");
}

// 3 -------------------------------------------------------------------------

Outcome loss_oracle() {
  Rng rng(303);
  std::uniform_real_distribution<double> prob(0.0, 1.0);
  std::bernoulli_distribution coin(0.5);
  std::vector<Label> labels;
  std::vector<int> y;
  std::vector<double> p;
  for (int i = 0; i < 1000; ++i) {
    const bool ill = coin(rng);
    labels.push_back(ill ? Label::Ill : Label::Healthy);
    y.push_back(ill ? 1 : 0);
    // Include exact 0 and 1 to exercise the clamp.
    p.push_back(i % 100 == 0 ? 0.0 : i % 100 == 1 ? 1.0 : prob(rng));
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double got = binary_cross_entropy(std::span(&labels[i], 1), std::span(&p[i], 1));
    const double want = oracle::bce({y[i]}, {p[i]});
    worst = std::max(worst, std::abs(got - want));
    if (!close(got, want, 1e-9)) return fail("pair " + std::to_string(i) + ": " + num(got) + " vs " + num(want));
  }
  const double mean_got = binary_cross_entropy(labels, p);
  if (!close(mean_got, oracle::bce(y, p), 1e-9)) return fail("batch mean differs");
  const std::vector<Label> hand = {Label::Ill, Label::Healthy};
  const std::vector<double> half = {0.5, 0.5};
  const double ln2 = binary_cross_entropy(hand, half);
  if (std::abs(ln2 - std::log(2.0)) > 1e-9) return fail("y=[1,0], p=[0.5,0.5] gave " + num(ln2));
  return pass("1000 pairs, worst error " + num(worst) + "; ln 2 case ok");
}

// 4 -------------------------------------------------------------------------

Outcome metric_oracles() {
  {
    const std::vector<Label> y = {Label::Ill, Label::Ill, Label::Healthy, Label::Healthy};
    const std::vector<double> s = {0.9, 0.4, 0.6, 0.1};
    const double a = auc(y, s);
    if (std::abs(a - 0.75) > 1e-12) return fail("hand case AUC " + num(a));
  }
  Rng rng(404);
  std::uniform_int_distribution<std::size_t> size(2, 120);
  std::uniform_int_distribution<int> coarse(0, 9);
  std::uniform_real_distribution<double> fine(0.0, 1.0);
  std::bernoulli_distribution coin(0.5);
  std::size_t cases = 0;
  for (int n = 0; n < 500; ++n) {
    const std::size_t m = size(rng);
    std::vector<Label> y(m), yhat(m);
    std::vector<double> s(m);
    for (std::size_t i = 0; i < m; ++i) {
      y[i] = coin(rng) ? Label::Ill : Label::Healthy;
      yhat[i] = coin(rng) ? Label::Ill : Label::Healthy;
      s[i] = n % 2 ? coarse(rng) / 10.0 : fine(rng);  // odd cases are tie-heavy
    }
    y[0] = Label::Ill;
    y[1] = Label::Healthy;
    const double a = auc(y, s), b = oracle::auc(y, s);
    if (std::abs(a - b) > 1e-12) return fail("case " + std::to_string(n) + ": AUC " + num(a) + " vs " + num(b));

    const ConfusionMatrix cm = confusion(y, yhat), want = oracle::confusion(y, yhat);
    if (cm.tp != want.tp || cm.tn != want.tn || cm.fp != want.fp || cm.fn != want.fn)
      return fail("confusion differs in case " + std::to_string(n));
    const double tp = static_cast<double>(want.tp), fp = static_cast<double>(want.fp),
                 fn = static_cast<double>(want.fn), tn = static_cast<double>(want.tn);
    const double want_p = tp + fp > 0 ? tp / (tp + fp) : 0.0;
    const double want_r = tp + fn > 0 ? tp / (tp + fn) : 0.0;
    const double want_f = want_p + want_r > 0 ? 2 * want_p * want_r / (want_p + want_r) : 0.0;
    const double want_acc = (tp + tn) / static_cast<double>(m);
    if (precision(cm) != want_p || recall(cm) != want_r || f1(cm) != want_f || accuracy(cm) != want_acc)
      return fail("ratio metrics differ in case " + std::to_string(n));
    ++cases;
  }
  return pass(std::to_string(cases) + " random cases; hand case AUC 0.75");
}

// 5 -------------------------------------------------------------------------

Outcome cv_properties() {
  Rng rng(505);
  std::uniform_int_distribution<int> k_pick(2, 10);
  std::uniform_int_distribution<std::size_t> extra(0, 150);
  std::uniform_int_distribution<std::uint64_t> seed_pick;
  for (int n = 0; n < 200; ++n) {
    const int k = k_pick(rng);
    const auto uk = static_cast<std::size_t>(k);
    const std::size_t healthy = uk + extra(rng), ill = uk + extra(rng);
    const Dataset ds = support::label_dataset(healthy, ill, rng);
    const std::uint64_t seed = seed_pick(rng);
    const auto folds = stratified_kfold(ds, k, seed);
    if (folds.size() != uk) return fail("dataset " + std::to_string(n) + ": wrong fold count");
    std::vector<int> seen(ds.size(), 0);
    for (const FoldSplit& f : folds) {
      std::size_t vh = 0, vi = 0;
      for (std::size_t i : f.validation) {
        ++seen[i];
        (ds[i].label == Label::Ill ? vi : vh) += 1;
      }
      if (f.train.size() + f.validation.size() != ds.size())
        return fail("dataset " + std::to_string(n) + ": train and validation do not cover the data");
      std::vector<int> in_fold(ds.size(), 0);
      for (std::size_t i : f.train) ++in_fold[i];
      for (std::size_t i : f.validation) ++in_fold[i];
      for (int c : in_fold)
        if (c != 1) return fail("dataset " + std::to_string(n) + ": train and validation overlap");
      const double eh = static_cast<double>(healthy) / k, ei = static_cast<double>(ill) / k;
      if (std::abs(static_cast<double>(vh) - eh) > 1.0 || std::abs(static_cast<double>(vi) - ei) > 1.0)
        return fail("dataset " + std::to_string(n) + ": class counts off by more than one");
    }
    for (int c : seen)
      if (c != 1) return fail("dataset " + std::to_string(n) + ": validation sets do not partition the data");
    const auto again = stratified_kfold(ds, k, seed);
    for (std::size_t f = 0; f < uk; ++f)
      if (again[f].validation != folds[f].validation || again[f].train != folds[f].train)
        return fail("dataset " + std::to_string(n) + ": split is not seed-deterministic");
  }
  const Dataset full = support::label_dataset(1683, 1683, rng);
  for (const FoldSplit& f : stratified_kfold(full, 10, 42)) {
    if (f.validation.size() != 336 && f.validation.size() != 337)
      return fail("3366/k=10: fold " + std::to_string(f.fold_index) + " has " +
                  std::to_string(f.validation.size()) + " samples");
  }
  return pass("200 random datasets; 3366 samples, k=10 -> 336/337");
}

// 6 -------------------------------------------------------------------------

Outcome architecture_shapes() {
  const ModelSpec spec;
  if (!spec.is_default()) return fail("default spec does not report itself as default");
  Model model(spec, 1);
  Rng rng(606);
  const Batch batch = gradcheck::random_batch(spec, 2, rng);
  const Tensor head = model.image_head_output(batch.images);
  if (head.shape() != std::vector<std::size_t>{2, 1024, 7, 7}) {
    std::string got;
    for (std::size_t d : head.shape()) got += std::to_string(d) + " ";
    return fail("image head output shape " + got);
  }
  if (spec.image_feature_width() != 50176) return fail("flattened width " + std::to_string(spec.image_feature_width()));
  const Tensor probs = model.forward(batch, nn::Mode::Infer);
  if (probs.shape() != std::vector<std::size_t>{2, 2}) return fail("output is not B x 2");
  for (std::size_t i = 0; i < 2; ++i) {
    const auto row = probs.sample(i);
    if (std::abs(row[0] + row[1] - 1.0) > 1e-6) return fail("row " + std::to_string(i) + " does not sum to 1");
  }
  return pass("240x240x3 -> 7x7x1024 (50176) -> 2x2, " + std::to_string(model.parameter_count()) + " parameters");
}

// 7 -------------------------------------------------------------------------

Outcome gradient_check() {
  Rng rng(707);
  const ModelSpec spec = gradcheck::tiny_spec();
  Model model(spec, 7);
  const Batch batch = gradcheck::random_batch(spec, 4, rng);
  const gradcheck::Result r = gradcheck::check_model(model, batch, rng, 8, 1e-3, 1e-2);
  const std::string summary =
      std::to_string(r.checked) + " parameter entries, worst relative error " + num(r.worst);
  if (r.checked == 0) return fail("no parameters checked");
  if (r.failed > 0) return fail(std::to_string(r.failed) + " of " + summary);
  return pass(summary);
}

// 8 -------------------------------------------------------------------------

// First epoch at which training stops, 0 if it never does.
int stop_epoch(const std::vector<double>& val) {
  std::vector<EpochRecord> h;
  for (std::size_t i = 0; i < val.size(); ++i) {
    EpochRecord r;
    r.epoch = static_cast<int>(i + 1);
    r.val_loss = val[i];
    h.push_back(r);
    if (should_stop(h, 1e-4, 5)) return r.epoch;
  }
  return 0;
}

// Literal rule: the best value only moves on an improvement larger than the
// delta; stop once five epochs in a row have not produced one.
int oracle_stop_epoch(const std::vector<double>& val) {
  double best = std::numeric_limits<double>::infinity();
  int waited = 0;
  for (std::size_t i = 0; i < val.size(); ++i) {
    if (val[i] < best - 1e-4) {
      best = val[i];
      waited = 0;
    } else if (++waited >= 5) {
      return static_cast<int>(i + 1);
    }
  }
  return 0;
}

Outcome early_stopping() {
  struct Script {
    std::vector<double> val;
    int expected;
  };
  const std::vector<Script> scripts = {
      {{1.0, 0.9, 0.91, 0.92, 0.93, 0.94, 0.95, 0.5}, 7},
      {{1.0, 0.99995, 0.99992, 0.99991, 0.99993, 0.99994, 0.5}, 6},  // sub-delta gains do not reset
      {{1.0, 1.0, 1.0, 1.0, 0.8, 0.8, 0.8, 0.8, 0.8, 0.8}, 10},
      {{1.0, 0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3}, 0},
      {{0.5, 0.5, 0.5, 0.5, 0.5}, 0},
      {{0.5, 0.5, 0.5, 0.5, 0.5, 0.5}, 6},
  };
  for (std::size_t s = 0; s < scripts.size(); ++s) {
    const int got = stop_epoch(scripts[s].val);
    if (got != scripts[s].expected)
      return fail("script " + std::to_string(s + 1) + ": stopped at " + std::to_string(got) + ", expected " +
                  std::to_string(scripts[s].expected));
  }
  Rng rng(808);
  std::uniform_real_distribution<double> step(-3e-4, 1e-4);
  for (int n = 0; n < 500; ++n) {
    std::vector<double> val = {1.0};
    for (int e = 1; e < 40; ++e) val.push_back(val.back() + step(rng));
    const int got = stop_epoch(val), want = oracle_stop_epoch(val);
    if (got != want)
      return fail("random sequence " + std::to_string(n) + ": stopped at " + std::to_string(got) + ", oracle " +
                  std::to_string(want));
  }
  return pass(std::to_string(scripts.size()) + " scripted and 500 random sequences");
}

// 9 -------------------------------------------------------------------------

Outcome smoke_run() {
  support::TempDir dir("acceptance_smoke");
  const support::SyntheticSet set = support::write_blob_dataset(dir / "data", 200, 64, 909, false);
  RunConfig cfg = support::smoke_config(set, dir / "run_a");
  const CvReport a = run_cv(cfg);
  cfg.out_dir = dir / "run_b";
  const CvReport b = run_cv(cfg);
  const std::string table_a = support::read_file(dir / "run_a" / "report.csv");
  const std::string table_b = support::read_file(dir / "run_b" / "report.csv");
  const std::string summary = "average accuracy " + num(a.average.accuracy) + ", AUC " + num(a.average.auc);
  if (a.average.accuracy < 0.95) return fail(summary + " (accuracy below 0.95)");
  if (a.average.auc < 0.98) return fail(summary + " (AUC below 0.98)");
  if (table_a.empty() || table_a != table_b ||
      support::read_file(dir / "run_a" / "report.json") != support::read_file(dir / "run_b" / "report.json"))
    return fail(summary + "; rerun report differs");
  (void)b;
  return pass(summary + "; rerun byte-identical");
}

// 10 ------------------------------------------------------------------------

Outcome full_dataset() {
  const char* dir = std::getenv("MMTUMOR_DATASET_DIR");
  const char* config = std::getenv("MMTUMOR_DATASET_CONFIG");
  if ((dir == nullptr || *dir == '\0') && (config == nullptr || *config == '\0'))
    return {Verdict::Skip, "dataset not present (set MMTUMOR_DATASET_DIR)"};
  RunConfig cfg;
  if (config != nullptr && *config != '\0') {
    cfg = load_run_config(config);
  } else {
    cfg.image_dir = fs::path(dir) / "images";
    cfg.features_table = fs::path(dir) / "features.csv";
  }
  const char* out = std::getenv("MMTUMOR_DATASET_OUT");
  cfg.out_dir = out != nullptr && *out != '\0' ? fs::path(out) : fs::temp_directory_path() / "mmtumor_acceptance_full";
  cfg.force = true;
  const CvReport report = run_cv(cfg);
  double worst = 1.0;
  for (const FoldMetrics& m : report.folds) worst = std::min(worst, m.accuracy);
  const std::string summary = std::to_string(report.folds.size()) + " folds, lowest fold accuracy " + num(worst) +
                              ", average " + num(report.average.accuracy);
  if (worst < 0.95) return fail(summary + " (a fold is below 0.95)");
  if (report.average.accuracy < 0.97) return fail(summary + " (average below 0.97)");
  return pass(summary);
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> criteria = {
      {1, "feature oracles", 10, feature_oracles},
      {2, "GLCM laws", 5, glcm_laws},
      {3, "loss oracle", 1, loss_oracle},
      {4, "metric oracles", 5, metric_oracles},
      {5, "stratified CV properties", 5, cv_properties},
      {6, "architecture shapes", 60, architecture_shapes},
      {7, "gradient check", 120, gradient_check},
      {8, "early stopping", 1, early_stopping},
      {9, "end-to-end smoke run", 600, smoke_run},
      {10, "full dataset", 0, full_dataset},
  };
  std::set<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));

  int failures = 0;
  for (const Criterion& c : criteria) {
    if (!wanted.empty() && !wanted.contains(c.id)) continue;
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = fail(std::string("exception: ") + e.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (o.verdict == Verdict::Pass && c.limit_seconds > 0 && secs > c.limit_seconds) {
      o = fail(o.detail + "; took longer than " + num(c.limit_seconds) + " s");
    }
    const char* tag = o.verdict == Verdict::Pass ? "PASS" : o.verdict == Verdict::Fail ? "FAIL" : "SKIP";
    std::printf("criterion %2d %s  %-26s %8.2f s  %s\n", c.id, tag, c.name.c_str(), secs, o.detail.c_str());
    std::fflush(stdout);
    if (o.verdict == Verdict::Fail) ++failures;
  }
  return failures == 0 ? 0 : 1;
}
