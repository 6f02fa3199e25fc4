#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mmtumor/data.hpp"

namespace mmtumor {

/// Positive class is Ill.
struct ConfusionMatrix {
  std::size_t tp = 0;
  std::size_t tn = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;

  std::size_t total() const noexcept { return tp + tn + fp + fn; }
  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;
};

ConfusionMatrix confusion(std::span<const Label> labels, std::span<const Label> predictions);

// A zero denominator yields 0. An empty matrix is a MetricError.
double accuracy(const ConfusionMatrix& cm);
double precision(const ConfusionMatrix& cm);
double recall(const ConfusionMatrix& cm);
double f1(const ConfusionMatrix& cm);

/// Mann-Whitney estimate of P(score_ill > score_healthy), ties counted as
/// one half, computed from mid-ranks in O(n log n).
double auc(std::span<const Label> labels, std::span<const double> scores);

struct FoldMetrics {
  int fold = 0;
  double accuracy = 0.0;
  double auc = 0.0;
  double loss = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;

  friend bool operator==(const FoldMetrics&, const FoldMetrics&) = default;
};

void to_json(nlohmann::json& j, const FoldMetrics& m);
void from_json(const nlohmann::json& j, FoldMetrics& m);

/// Metrics for one evaluated set; `loss` is supplied by the caller.
FoldMetrics evaluate_predictions(int fold, std::span<const Label> labels,
                                 std::span<const Label> predictions,
                                 std::span<const double> ill_probabilities, double loss);

struct CvReport {
  std::vector<FoldMetrics> folds;
  FoldMetrics average;  // fold = 0
};

/// Appends the column means. Empty input is a MetricError.
CvReport aggregate(const std::vector<FoldMetrics>& per_fold);

/// Table with columns CV Fold, Accuracy, AUC, Loss, Precision, Recall,
/// F1-Score; one row per fold then an "Avg." row; six decimals.
std::string report_table(const CvReport& report);
nlohmann::json report_json(const CvReport& report);

/// Per-fold metric series, comma-separated with a header row (gnuplot:
/// `set datafile separator ","`).
std::string plot_data(const CvReport& report);

}  // namespace mmtumor
