#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "mmtumor/data.hpp"
#include "mmtumor/metrics.hpp"
#include "mmtumor/model.hpp"

namespace mmtumor {

struct TrainConfig {
  double learning_rate = 1e-3;
  std::size_t batch_size = 32;
  int max_epochs = 100;
  double early_stop_min_delta = 1e-4;
  int early_stop_patience = 5;
  std::uint64_t seed = 0;
  /// Restore the parameters of the best-validation-loss epoch at the end.
  bool restore_best = true;

  void validate() const;
};

struct EpochRecord {
  int epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_accuracy = 0.0;
  double val_auc = 0.0;
};

void to_json(nlohmann::json& j, const EpochRecord& r);
void from_json(const nlohmann::json& j, EpochRecord& r);

/// Probabilities are clamped to [eps, 1 - eps] before taking logs.
inline constexpr double kProbabilityClamp = 1e-7;

/// Mean binary cross-entropy (natural log) of ill-class probabilities.
double binary_cross_entropy(std::span<const Label> labels, std::span<const double> probs);

/// Gradient of the mean BCE of p = probabilities[:, 1] with respect to the
/// two softmax logits. Zero for samples whose probability sits outside the
/// clamp interval.
Tensor bce_logit_gradient(const Tensor& probabilities, std::span<const Label> labels);

/// True iff the last `patience` epochs all failed to beat the best-so-far
/// validation loss by more than `min_delta`. The best only moves on a
/// qualifying improvement.
bool should_stop(std::span<const EpochRecord> history, double min_delta, int patience);

/// Epoch (1-based) holding the best validation loss under the same
/// improvement rule as should_stop.
int best_epoch(std::span<const EpochRecord> history, double min_delta);

class Adam {
 public:
  Adam(std::vector<nn::Parameter*> params, double learning_rate, double beta1 = 0.9,
       double beta2 = 0.999, double eps = 1e-8);

  void step();
  long steps() const noexcept { return t_; }

 private:
  std::vector<nn::Parameter*> params_;
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
  std::vector<Tensor> m_, v_;
};

struct Evaluation {
  std::vector<Label> labels;
  std::vector<Label> predictions;
  std::vector<double> ill_probabilities;
  double loss = 0.0;
};

/// Inference-mode pass over the given samples in chunks of `batch_size`.
Evaluation evaluate_model(Model& model, const Dataset& ds, const std::vector<std::size_t>& indices,
                          std::size_t batch_size);

struct FoldResult {
  Model model;
  std::vector<EpochRecord> history;
  int best_epoch = 0;
  FoldMetrics metrics;  // validation metrics of the returned parameters
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Seeded mini-batch Adam on fold.train, validation loss every epoch, early
/// stopping, optional best-weight restoration.
FoldResult train_fold(const ModelSpec& spec, const FoldSplit& fold, const Dataset& ds,
                      const TrainConfig& cfg, const EpochCallback& on_epoch = {});

}  // namespace mmtumor
