#include <doctest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "mmtumor/errors.hpp"
#include "mmtumor/metrics.hpp"
#include "oracles.hpp"

using namespace mmtumor;

namespace {

constexpr Label I = Label::Ill;
constexpr Label H = Label::Healthy;

std::vector<Label> random_labels(std::size_t n, std::mt19937_64& rng) {
  std::bernoulli_distribution b(0.4);
  std::vector<Label> y(n);
  for (auto& l : y) l = b(rng) ? I : H;
  y[0] = I;
  y[1] = H;
  return y;
}

}  // namespace

TEST_CASE("confusion counts") {
  CHECK(confusion(std::vector{I, I, H, H}, std::vector{I, I, H, H}) == ConfusionMatrix{2, 2, 0, 0});
  CHECK(confusion(std::vector{I, H}, std::vector{H, I}) == ConfusionMatrix{0, 0, 1, 1});
  CHECK_THROWS_AS(confusion(std::vector{I}, std::vector{I, H}), ShapeError);

  std::mt19937_64 rng(1);
  for (int t = 0; t < 100; ++t) {
    const auto y = random_labels(30, rng), yhat = random_labels(30, rng);
    const ConfusionMatrix cm = confusion(y, yhat);
    CHECK(cm == oracle::confusion(y, yhat));
    CHECK(cm.total() == 30);
  }
}

TEST_CASE("ratio metrics") {
  const ConfusionMatrix perfect{2, 2, 0, 0};
  CHECK(accuracy(perfect) == 1);
  CHECK(precision(perfect) == 1);
  CHECK(recall(perfect) == 1);
  CHECK(f1(perfect) == 1);

  const ConfusionMatrix negatives{0, 4, 0, 0};
  CHECK(precision(negatives) == 0);
  CHECK(recall(negatives) == 0);
  CHECK(f1(negatives) == 0);

  const ConfusionMatrix mixed{3, 1, 1, 1};
  CHECK(accuracy(mixed) == doctest::Approx(4.0 / 6));
  CHECK(precision(mixed) == doctest::Approx(0.75));
  CHECK(recall(mixed) == doctest::Approx(0.75));
  CHECK(f1(mixed) == doctest::Approx(0.75));

  CHECK_THROWS_AS(accuracy(ConfusionMatrix{}), MetricError);

  std::mt19937_64 rng(2);
  std::uniform_int_distribution<std::size_t> c(0, 20);
  for (int t = 0; t < 200; ++t) {
    const ConfusionMatrix cm{c(rng), c(rng), c(rng), c(rng) + 1};
    const double p = precision(cm), r = recall(cm);
    CHECK(p == (cm.tp + cm.fp ? double(cm.tp) / double(cm.tp + cm.fp) : 0.0));
    CHECK(r == double(cm.tp) / double(cm.tp + cm.fn));
    if (p + r > 0) CHECK(std::abs(f1(cm) - 2 * p * r / (p + r)) < 1e-9);
  }
}

TEST_CASE("AUC") {
  CHECK(auc(std::vector{I, I, H, H}, std::vector{0.9, 0.4, 0.6, 0.1}) == 0.75);
  CHECK(auc(std::vector{I, H, I, H}, std::vector{0.9, 0.1, 0.8, 0.2}) == 1.0);
  CHECK(auc(std::vector{I, H, I, H}, std::vector{0.3, 0.3, 0.3, 0.3}) == 0.5);
  CHECK_THROWS_AS(auc(std::vector{I, I}, std::vector{0.1, 0.2}), MetricError);
  CHECK_THROWS_AS(auc(std::vector{I, H}, std::vector{0.1}), ShapeError);

  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> coarse(0, 9);  // plenty of ties
  for (int t = 0; t < 200; ++t) {
    const auto y = random_labels(40, rng);
    std::vector<double> s(40);
    for (double& v : s) v = coarse(rng) / 10.0;
    const double a = auc(y, s);
    CHECK(std::abs(a - oracle::auc(y, s)) <= 1e-12);

    std::vector<double> transformed(s), negated(s);
    for (std::size_t i = 0; i < s.size(); ++i) {
      transformed[i] = std::exp(3 * s[i]) - 7;
      negated[i] = -s[i];
    }
    CHECK(auc(y, transformed) == a);
    CHECK(std::abs(auc(y, negated) - (1 - a)) < 1e-12);  // ties count one half on both sides

    std::vector<std::size_t> perm(40);
    for (std::size_t i = 0; i < 40; ++i) perm[i] = i;
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<Label> yp(40);
    std::vector<double> sp(40);
    for (std::size_t i = 0; i < 40; ++i) {
      yp[i] = y[perm[i]];
      sp[i] = s[perm[i]];
    }
    CHECK(std::abs(auc(yp, sp) - a) < 1e-12);
  }
}

TEST_CASE("aggregation and report formats") {
  const double acc[10] = {0.99, 0.97, 0.99, 0.98, 0.97, 0.99, 0.99, 0.98, 0.99, 0.99};
  std::vector<FoldMetrics> folds;
  for (int i = 0; i < 10; ++i) {
    FoldMetrics m;
    m.fold = i + 1;
    m.accuracy = acc[i];
    m.auc = 0.5 + i * 0.01;
    m.loss = 1.0 / (i + 1);
    m.precision = 0.9;
    m.recall = 0.8;
    m.f1 = 2 * 0.9 * 0.8 / 1.7;
    folds.push_back(m);
  }
  const CvReport r = aggregate(folds);
  CHECK(r.average.accuracy == doctest::Approx(0.984).epsilon(1e-12));
  CHECK(r.average.precision == doctest::Approx(0.9));
  CHECK(aggregate({folds[3]}).average.accuracy == folds[3].accuracy);
  CHECK_THROWS_AS(aggregate({}), MetricError);

  const std::string table = report_table(r);
  std::istringstream in(table);
  std::string line;
  std::getline(in, line);
  CHECK(line == "CV Fold,Accuracy,AUC,Loss,Precision,Recall,F1-Score");
  std::vector<std::vector<double>> rows;
  std::string last;
  while (std::getline(in, line)) {
    last = line;
    std::vector<double> cells;
    std::stringstream ss(line.substr(line.find(',') + 1));
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(std::stod(cell));
    rows.push_back(cells);
  }
  REQUIRE(rows.size() == 11);
  CHECK(last.rfind("Avg.,", 0) == 0);
  for (std::size_t c = 0; c < 6; ++c) {
    double mean = 0;
    for (std::size_t i = 0; i < 10; ++i) mean += rows[i][c] / 10;
    CHECK(std::abs(rows[10][c] - mean) <= 1e-6);  // rows carry six decimals
  }

  const nlohmann::json j = report_json(r);
  CHECK(j["folds"].size() == 10);
  CHECK(j["average"]["accuracy"].get<double>() == r.average.accuracy);
  CHECK(!j["average"].contains("fold"));
  CHECK(j["folds"][2].get<FoldMetrics>() == folds[2]);

  const std::string plot = plot_data(r);
  CHECK(plot.rfind("fold,accuracy,auc,loss,precision,recall,f1\n", 0) == 0);
  CHECK(std::count(plot.begin(), plot.end(), '\n') == 11);
}

TEST_CASE("evaluate_predictions") {
  const std::vector<Label> y{I, I, H, H};
  const std::vector<Label> yhat{I, H, H, H};
  const std::vector<double> s{0.9, 0.4, 0.3, 0.1};
  const FoldMetrics m = evaluate_predictions(2, y, yhat, s, 0.25);
  CHECK(m.fold == 2);
  CHECK(m.accuracy == 0.75);
  CHECK(m.auc == 1.0);
  CHECK(m.loss == 0.25);
  CHECK(m.precision == 1.0);
  CHECK(m.recall == 0.5);
}
