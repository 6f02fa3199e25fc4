#include "mmtumor/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>

#include "mmtumor/errors.hpp"

namespace mmtumor {

ConfusionMatrix confusion(std::span<const Label> labels, std::span<const Label> predictions) {
  if (labels.size() != predictions.size()) {
    throw ShapeError("confusion: " + std::to_string(labels.size()) + " labels vs " +
                     std::to_string(predictions.size()) + " predictions");
  }
  ConfusionMatrix cm;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const bool ill = labels[i] == Label::Ill;
    const bool flagged = predictions[i] == Label::Ill;
    if (ill && flagged) ++cm.tp;
    else if (!ill && !flagged) ++cm.tn;
    else if (flagged) ++cm.fp;
    else ++cm.fn;
  }
  return cm;
}

namespace {

void require_nonempty(const ConfusionMatrix& cm) {
  if (cm.total() == 0) throw MetricError("metric of an empty confusion matrix");
}

double ratio(std::size_t num, std::size_t den) {
  return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace

double accuracy(const ConfusionMatrix& cm) {
  require_nonempty(cm);
  return ratio(cm.tp + cm.tn, cm.total());
}

double precision(const ConfusionMatrix& cm) {
  require_nonempty(cm);
  return ratio(cm.tp, cm.tp + cm.fp);
}

double recall(const ConfusionMatrix& cm) {
  require_nonempty(cm);
  return ratio(cm.tp, cm.tp + cm.fn);
}

double f1(const ConfusionMatrix& cm) {
  const double p = precision(cm);
  const double r = recall(cm);
  return p + r == 0.0 ? 0.0 : 2.0 * p * r / (p + r);
}

double auc(std::span<const Label> labels, std::span<const double> scores) {
  if (labels.size() != scores.size()) {
    throw ShapeError("auc: " + std::to_string(labels.size()) + " labels vs " +
                     std::to_string(scores.size()) + " scores");
  }
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  double rank_sum_ill = 0.0;
  std::size_t n_ill = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double mid_rank = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1 .. j
    for (std::size_t t = i; t < j; ++t) {
      if (labels[order[t]] == Label::Ill) {
        rank_sum_ill += mid_rank;
        ++n_ill;
      }
    }
    i = j;
  }
  const std::size_t n_healthy = labels.size() - n_ill;
  if (n_ill == 0 || n_healthy == 0) {
    throw MetricError("AUC is undefined without both classes present");
  }
  const double pos = static_cast<double>(n_ill);
  const double u = rank_sum_ill - pos * (pos + 1.0) / 2.0;
  return u / (pos * static_cast<double>(n_healthy));
}

void to_json(nlohmann::json& j, const FoldMetrics& m) {
  j = nlohmann::json{{"fold", m.fold},         {"accuracy", m.accuracy}, {"auc", m.auc},
                     {"loss", m.loss},         {"precision", m.precision},
                     {"recall", m.recall},     {"f1", m.f1}};
}

void from_json(const nlohmann::json& j, FoldMetrics& m) {
  j.at("fold").get_to(m.fold);
  j.at("accuracy").get_to(m.accuracy);
  j.at("auc").get_to(m.auc);
  j.at("loss").get_to(m.loss);
  j.at("precision").get_to(m.precision);
  j.at("recall").get_to(m.recall);
  j.at("f1").get_to(m.f1);
}

FoldMetrics evaluate_predictions(int fold, std::span<const Label> labels,
                                 std::span<const Label> predictions,
                                 std::span<const double> ill_probabilities, double loss) {
  const ConfusionMatrix cm = confusion(labels, predictions);
  FoldMetrics m;
  m.fold = fold;
  m.accuracy = accuracy(cm);
  m.auc = auc(labels, ill_probabilities);
  m.loss = loss;
  m.precision = precision(cm);
  m.recall = recall(cm);
  m.f1 = f1(cm);
  return m;
}

CvReport aggregate(const std::vector<FoldMetrics>& per_fold) {
  if (per_fold.empty()) throw MetricError("cannot aggregate zero folds");
  CvReport r;
  r.folds = per_fold;
  const auto n = static_cast<double>(per_fold.size());
  auto mean = [&](double FoldMetrics::*field) {
    double s = 0.0;
    for (const FoldMetrics& m : per_fold) s += m.*field;
    return s / n;
  };
  r.average.accuracy = mean(&FoldMetrics::accuracy);
  r.average.auc = mean(&FoldMetrics::auc);
  r.average.loss = mean(&FoldMetrics::loss);
  r.average.precision = mean(&FoldMetrics::precision);
  r.average.recall = mean(&FoldMetrics::recall);
  r.average.f1 = mean(&FoldMetrics::f1);
  return r;
}

namespace {

std::string format_row(const std::string& label, const FoldMetrics& m, char sep) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%s%c%.6f%c%.6f%c%.6f%c%.6f%c%.6f%c%.6f\n", label.c_str(), sep,
                m.accuracy, sep, m.auc, sep, m.loss, sep, m.precision, sep, m.recall, sep, m.f1);
  return buf;
}

}  // namespace

std::string report_table(const CvReport& report) {
  std::string out = "CV Fold,Accuracy,AUC,Loss,Precision,Recall,F1-Score\n";
  for (const FoldMetrics& m : report.folds) out += format_row(std::to_string(m.fold), m, ',');
  out += format_row("Avg.", report.average, ',');
  return out;
}

nlohmann::json report_json(const CvReport& report) {
  nlohmann::json j;
  j["folds"] = report.folds;
  nlohmann::json avg = report.average;
  avg.erase("fold");
  j["average"] = avg;
  return j;
}

std::string plot_data(const CvReport& report) {
  std::string out = "fold,accuracy,auc,loss,precision,recall,f1\n";
  for (const FoldMetrics& m : report.folds) out += format_row(std::to_string(m.fold), m, ',');
  return out;
}

}  // namespace mmtumor
