#include <doctest.h>

#include <cmath>
#include <limits>

#include "gradcheck.hpp"
#include "mmtumor/errors.hpp"
#include "mmtumor/training.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace mmtumor;

namespace {

std::vector<EpochRecord> history_of(const std::vector<double>& losses) {
  std::vector<EpochRecord> h;
  for (std::size_t i = 0; i < losses.size(); ++i) {
    EpochRecord r;
    r.epoch = static_cast<int>(i + 1);
    r.val_loss = losses[i];
    h.push_back(r);
  }
  return h;
}

// Epoch at which a training loop calling should_stop after every epoch halts.
int stop_epoch(const std::vector<double>& losses) {
  const auto h = history_of(losses);
  for (std::size_t n = 1; n <= h.size(); ++n) {
    if (should_stop(std::span(h.data(), n), 1e-4, 5)) return static_cast<int>(n);
  }
  return 0;
}

Dataset blob_memory_dataset(std::size_t n, std::size_t size, std::uint64_t seed) {
  Rng rng(seed);
  FeatureConfig fc;
  fc.tamura_max_k = 3;
  std::vector<Sample> samples(n);
  for (std::size_t i = 0; i < n; ++i) {
    samples[i].id = "m" + std::to_string(i);
    samples[i].label = i % 2 ? Label::Ill : Label::Healthy;
    const GrayImage img = support::blob_image(size, i % 2 == 1, rng);
    samples[i].features = extract_feature_vector(img, fc);
    samples[i].image = std::make_shared<const GrayImage>(img);
  }
  return standardize_features(Dataset(std::move(samples))).dataset;
}

FoldSplit split_half(std::size_t n) {
  FoldSplit f;
  f.fold_index = 1;
  for (std::size_t i = 0; i < n; ++i) (i % 4 == 0 ? f.validation : f.train).push_back(i);
  return f;
}

}  // namespace

TEST_CASE("binary cross-entropy") {
  SUBCASE("ln 2 at p = 0.5") {
    const std::vector<Label> y{Label::Ill, Label::Healthy};
    const std::vector<double> p{0.5, 0.5};
    CHECK(std::abs(binary_cross_entropy(y, p) - std::log(2.0)) < 1e-9);
  }
  SUBCASE("matches the scalar oracle") {
    Rng rng(1);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int t = 0; t < 50; ++t) {
      std::vector<Label> y;
      std::vector<int> yi;
      std::vector<double> p;
      for (int i = 0; i < 20; ++i) {
        yi.push_back(u(rng) < 0.5);
        y.push_back(yi.back() ? Label::Ill : Label::Healthy);
        p.push_back(u(rng));
      }
      CHECK(std::abs(binary_cross_entropy(y, p) - oracle::bce(yi, p)) < 1e-9);
    }
  }
  SUBCASE("saturated probabilities stay finite and non-negative") {
    const std::vector<Label> y{Label::Ill, Label::Healthy, Label::Ill, Label::Healthy};
    const std::vector<double> p{0.0, 1.0, 1.0, 0.0};
    const double l = binary_cross_entropy(y, p);
    CHECK(std::isfinite(l));
    CHECK(l >= 0);
    CHECK(l == doctest::Approx(-std::log(1e-7) / 2));
  }
  SUBCASE("length mismatch") {
    const std::vector<Label> y{Label::Ill};
    const std::vector<double> p{0.5, 0.5};
    CHECK_THROWS_AS(binary_cross_entropy(y, p), ShapeError);
  }
}

TEST_CASE("BCE logit gradient matches finite differences") {
  Rng rng(2);
  const Tensor logits = gradcheck::random_tensor({5, 2}, rng, 2.0);
  const std::vector<Label> y{Label::Ill, Label::Healthy, Label::Ill, Label::Ill, Label::Healthy};
  auto loss = [&](const Tensor& z) {
    const Tensor p = softmax_rows(z);
    std::vector<double> ill(5);
    for (std::size_t i = 0; i < 5; ++i) ill[i] = p.sample(i)[1];
    return binary_cross_entropy(y, ill);
  };
  const Tensor g = bce_logit_gradient(softmax_rows(logits), y);
  for (std::size_t i = 0; i < logits.size(); ++i) {
    Tensor up = logits, down = logits;
    up[i] += 1e-5;
    down[i] -= 1e-5;
    CHECK(g[i] == doctest::Approx((loss(up) - loss(down)) / 2e-5).epsilon(1e-6));
  }
}

TEST_CASE("early stopping") {
  SUBCASE("five epochs without improvement") {
    CHECK(stop_epoch({1.0, 0.9, 0.91, 0.92, 0.93, 0.94, 0.95, 0.5}) == 7);
  }
  SUBCASE("sub-delta improvements do not reset patience") {
    CHECK(stop_epoch({1.0, 0.99995, 0.99992, 0.99991, 0.99993, 0.99994}) == 6);
  }
  SUBCASE("an improvement larger than delta resets patience") {
    CHECK(stop_epoch({1.0, 1.1, 1.1, 1.1, 1.1, 0.9, 1.0, 1.0, 1.0, 1.0, 1.0}) == 11);
  }
  SUBCASE("steady improvement never stops") {
    CHECK(stop_epoch({1.0, 0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1}) == 0);
  }
  SUBCASE("best epoch follows the same rule") {
    const auto h = history_of({1.0, 0.8, 0.79995, 0.7, 0.69999});
    CHECK(best_epoch(h, 1e-4) == 4);
    CHECK(best_epoch(std::span<const EpochRecord>{}, 1e-4) == 0);
  }
}

TEST_CASE("Adam") {
  Tensor init({3});
  init[0] = 1;
  init[1] = -2;
  init[2] = 0.5;
  nn::Parameter p("p", init);
  SUBCASE("zero gradient leaves parameters unchanged") {
    Adam opt({&p}, 1e-3);
    opt.step();
    for (std::size_t i = 0; i < 3; ++i) CHECK(p.value[i] == init[i]);
  }
  SUBCASE("first step moves by lr * g / (|g| + eps)") {
    Adam opt({&p}, 1e-3);
    p.grad[0] = 0.3;
    p.grad[1] = -4.0;
    p.grad[2] = 0.0;
    opt.step();
    CHECK(p.value[0] == doctest::Approx(1 - 1e-3 * 0.3 / (0.3 + 1e-8)).epsilon(1e-12));
    CHECK(p.value[1] == doctest::Approx(-2 + 1e-3 * 4.0 / (4.0 + 1e-8)).epsilon(1e-12));
    CHECK(p.value[2] == 0.5);
    CHECK(opt.steps() == 1);
  }
}

TEST_CASE("one Adam step lowers the first-batch loss") {
  const Dataset ds = blob_memory_dataset(32, 32, 4);
  std::vector<std::size_t> idx(32);
  for (std::size_t i = 0; i < 32; ++i) idx[i] = i;
  const ModelSpec spec = support::smoke_spec(32);
  int decreased = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Model model(spec, seed);
    const Batch batch = make_batch(ds, idx, spec.image_channels);
    auto loss = [&] {
      const Tensor p = model.forward(batch, nn::Mode::Train);
      std::vector<double> ill(32);
      for (std::size_t i = 0; i < 32; ++i) ill[i] = p.sample(i)[1];
      return binary_cross_entropy(batch.labels, ill);
    };
    Adam opt(model.parameters(), 1e-3);
    model.zero_grad();
    const Tensor p = model.forward(batch, nn::Mode::Train);
    std::vector<double> ill(32);
    for (std::size_t i = 0; i < 32; ++i) ill[i] = p.sample(i)[1];
    const double before = binary_cross_entropy(batch.labels, ill);
    model.backward(bce_logit_gradient(p, batch.labels));
    opt.step();
    decreased += loss() < before;
  }
  CHECK(decreased >= 4);
}

TEST_CASE("train_fold") {
  const Dataset ds = blob_memory_dataset(48, 32, 5);
  const ModelSpec spec = support::smoke_spec(32);
  const FoldSplit fold = split_half(ds.size());
  TrainConfig cfg;
  cfg.max_epochs = 8;
  cfg.batch_size = 8;
  cfg.seed = 3;

  SUBCASE("deterministic histories and best-epoch restore") {
    std::vector<EpochRecord> seen;
    const FoldResult a = train_fold(spec, fold, ds, cfg, [&](const EpochRecord& r) { seen.push_back(r); });
    const FoldResult b = train_fold(spec, fold, ds, cfg);
    REQUIRE(a.history.size() == b.history.size());
    CHECK(seen.size() == a.history.size());
    for (std::size_t i = 0; i < a.history.size(); ++i) {
      CHECK(a.history[i].train_loss == b.history[i].train_loss);
      CHECK(a.history[i].val_loss == b.history[i].val_loss);
    }
    CHECK(a.metrics == b.metrics);
    REQUIRE(a.best_epoch >= 1);
    CHECK(a.best_epoch == best_epoch(a.history, cfg.early_stop_min_delta));
    CHECK(a.metrics.loss == a.history[static_cast<std::size_t>(a.best_epoch - 1)].val_loss);
    CHECK(a.metrics.fold == 1);
  }
  SUBCASE("learns the separable task") {
    cfg.max_epochs = 15;
    const FoldResult r = train_fold(spec, fold, ds, cfg);
    CHECK(r.metrics.accuracy >= 0.9);
    CHECK(r.history.back().train_loss < r.history.front().train_loss);
  }
  SUBCASE("empty sets") {
    FoldSplit empty = fold;
    empty.validation.clear();
    CHECK_THROWS_AS(train_fold(spec, empty, ds, cfg), TrainingError);
    empty = fold;
    empty.train.clear();
    CHECK_THROWS_AS(train_fold(spec, empty, ds, cfg), TrainingError);
  }
  SUBCASE("non-finite loss is a divergence") {
    std::vector<FeatureVector> features;
    for (const Sample& s : ds.samples()) features.push_back(s.features);
    features[fold.train[0]][0] = std::numeric_limits<double>::infinity();
    features[fold.train[1]][0] = -std::numeric_limits<double>::infinity();
    CHECK_THROWS_AS(train_fold(spec, fold, ds.with_features(features), cfg), DivergenceError);
  }
  SUBCASE("invalid config") {
    cfg.learning_rate = 0;
    CHECK_THROWS_AS(train_fold(spec, fold, ds, cfg), ConfigError);
  }
}
