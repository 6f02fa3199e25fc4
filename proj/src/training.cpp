#include "mmtumor/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "mmtumor/errors.hpp"
#include "mmtumor/rng.hpp"

namespace mmtumor {

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (max_epochs < 1) throw ConfigError("max_epochs must be at least 1");
  if (!(early_stop_min_delta >= 0.0)) throw ConfigError("early_stop_min_delta must be non-negative");
  if (early_stop_patience < 1) throw ConfigError("early_stop_patience must be at least 1");
}

void to_json(nlohmann::json& j, const EpochRecord& r) {
  j = nlohmann::json{{"epoch", r.epoch},
                     {"train_loss", r.train_loss},
                     {"val_loss", r.val_loss},
                     {"val_accuracy", r.val_accuracy},
                     {"val_auc", r.val_auc}};
}

void from_json(const nlohmann::json& j, EpochRecord& r) {
  j.at("epoch").get_to(r.epoch);
  j.at("train_loss").get_to(r.train_loss);
  j.at("val_loss").get_to(r.val_loss);
  j.at("val_accuracy").get_to(r.val_accuracy);
  r.val_auc = j.value("val_auc", 0.0);
}

double binary_cross_entropy(std::span<const Label> labels, std::span<const double> probs) {
  if (labels.size() != probs.size()) {
    throw ShapeError("binary_cross_entropy: " + std::to_string(labels.size()) + " labels vs " +
                     std::to_string(probs.size()) + " probabilities");
  }
  if (labels.empty()) throw ShapeError("binary_cross_entropy of an empty batch");
  double sum = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double p = std::clamp(probs[i], kProbabilityClamp, 1.0 - kProbabilityClamp);
    sum -= labels[i] == Label::Ill ? std::log(p) : std::log(1.0 - p);
  }
  return sum / static_cast<double>(labels.size());
}

Tensor bce_logit_gradient(const Tensor& probabilities, std::span<const Label> labels) {
  const std::size_t n = probabilities.dim(0);
  if (labels.size() != n) throw ShapeError("bce_logit_gradient: label count mismatch");
  Tensor grad({n, 2});
  for (std::size_t i = 0; i < n; ++i) {
    const double p = probabilities.sample(i)[1];
    if (p < kProbabilityClamp || p > 1.0 - kProbabilityClamp) continue;
    // d/dz1 of -(y ln p + (1 - y) ln(1 - p)) with p = softmax(z)_1 is p - y.
    const double y = labels[i] == Label::Ill ? 1.0 : 0.0;
    const double g = (p - y) / static_cast<double>(n);
    grad.sample(i)[0] = -g;
    grad.sample(i)[1] = g;
  }
  return grad;
}

namespace {

// Replays the improvement rule; returns (best epoch index, epochs since).
std::pair<std::size_t, std::size_t> scan_history(std::span<const EpochRecord> history,
                                                 double min_delta) {
  std::size_t best_idx = 0;
  double best = history.front().val_loss;
  std::size_t wait = 0;
  for (std::size_t i = 1; i < history.size(); ++i) {
    if (best - history[i].val_loss > min_delta) {
      best = history[i].val_loss;
      best_idx = i;
      wait = 0;
    } else {
      ++wait;
    }
  }
  return {best_idx, wait};
}

}  // namespace

bool should_stop(std::span<const EpochRecord> history, double min_delta, int patience) {
  if (history.empty()) return false;
  return scan_history(history, min_delta).second >= static_cast<std::size_t>(patience);
}

int best_epoch(std::span<const EpochRecord> history, double min_delta) {
  if (history.empty()) return 0;
  return history[scan_history(history, min_delta).first].epoch;
}

Adam::Adam(std::vector<nn::Parameter*> params, double learning_rate, double beta1, double beta2,
           double eps)
    : params_(std::move(params)), lr_(learning_rate), beta1_(beta1), beta2_(beta2), eps_(eps) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const nn::Parameter* p : params_) {
    m_.emplace_back(p->value.shape());
    v_.emplace_back(p->value.shape());
  }
}

void Adam::step() {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    nn::Parameter& p = *params_[k];
    double* m = m_[k].data();
    double* v = v_[k].data();
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = p.grad[i];
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g;
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * g * g;
      p.value[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
    }
  }
}

Evaluation evaluate_model(Model& model, const Dataset& ds, const std::vector<std::size_t>& indices,
                          std::size_t batch_size) {
  if (indices.empty()) throw EvaluationError("nothing to evaluate: empty sample set");
  Evaluation ev;
  ev.labels.reserve(indices.size());
  ev.ill_probabilities.reserve(indices.size());
  for (std::size_t start = 0; start < indices.size(); start += batch_size) {
    const std::size_t end = std::min(indices.size(), start + batch_size);
    const std::vector<std::size_t> chunk(indices.begin() + static_cast<std::ptrdiff_t>(start),
                                         indices.begin() + static_cast<std::ptrdiff_t>(end));
    const Batch batch = make_batch(ds, chunk, model.spec().image_channels);
    const Tensor probs = model.forward(batch, nn::Mode::Infer);
    const std::vector<Label> predicted = predict_class(probs);
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      ev.labels.push_back(batch.labels[i]);
      ev.predictions.push_back(predicted[i]);
      ev.ill_probabilities.push_back(probs.sample(i)[1]);
    }
  }
  ev.loss = binary_cross_entropy(ev.labels, ev.ill_probabilities);
  return ev;
}

namespace {

std::vector<Tensor> snapshot(Model& model) {
  std::vector<Tensor> out;
  for (const nn::StateRef& s : model.state()) out.push_back(*s.second);
  return out;
}

void restore(Model& model, const std::vector<Tensor>& saved) {
  const auto state = model.state();
  for (std::size_t i = 0; i < state.size(); ++i) *state[i].second = saved[i];
}

bool has_both_classes(const std::vector<Label>& labels) {
  const auto ill = std::count(labels.begin(), labels.end(), Label::Ill);
  return ill > 0 && static_cast<std::size_t>(ill) < labels.size();
}

}  // namespace

FoldResult train_fold(const ModelSpec& spec, const FoldSplit& fold, const Dataset& ds,
                      const TrainConfig& cfg, const EpochCallback& on_epoch) {
  cfg.validate();
  if (fold.train.empty()) throw TrainingError("fold " + std::to_string(fold.fold_index) + " has no training samples");
  if (fold.validation.empty()) {
    throw TrainingError("fold " + std::to_string(fold.fold_index) + " has no validation samples");
  }
  for (const auto* set : {&fold.train, &fold.validation}) {
    for (std::size_t i : *set) {
      if (i >= ds.size()) throw TrainingError("fold index " + std::to_string(i) + " outside the dataset");
    }
  }

  const auto fold_stream = static_cast<std::uint64_t>(fold.fold_index);
  FoldResult result{Model(spec, derive_seed(cfg.seed, "init", fold_stream)), {}, 0, {}};
  Model& model = result.model;
  Adam optimizer(model.parameters(), cfg.learning_rate);
  Rng shuffle_rng = make_rng(cfg.seed, "shuffle", fold_stream);

  std::vector<std::size_t> order = fold.train;
  std::vector<Tensor> best_state;
  double best_loss = 0.0;

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const std::vector<std::size_t> chunk(order.begin() + static_cast<std::ptrdiff_t>(start),
                                           order.begin() + static_cast<std::ptrdiff_t>(end));
      const Batch batch = make_batch(ds, chunk, spec.image_channels);
      model.zero_grad();
      const Tensor probs = model.forward(batch, nn::Mode::Train);
      std::vector<double> p(chunk.size());
      for (std::size_t i = 0; i < chunk.size(); ++i) p[i] = probs.sample(i)[1];
      const double loss = binary_cross_entropy(batch.labels, p);
      if (!std::isfinite(loss)) {
        throw DivergenceError(epoch, "training loss became non-finite in epoch " + std::to_string(epoch) +
                                         " of fold " + std::to_string(fold.fold_index));
      }
      model.backward(bce_logit_gradient(probs, batch.labels));
      optimizer.step();
      loss_sum += loss * static_cast<double>(chunk.size());
    }
    model.clear_cache();

    const Evaluation ev = evaluate_model(model, ds, fold.validation, cfg.batch_size);
    if (!std::isfinite(ev.loss)) {
      throw DivergenceError(epoch, "validation loss became non-finite in epoch " + std::to_string(epoch) +
                                       " of fold " + std::to_string(fold.fold_index));
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(order.size());
    rec.val_loss = ev.loss;
    rec.val_accuracy = accuracy(confusion(ev.labels, ev.predictions));
    rec.val_auc = has_both_classes(ev.labels) ? auc(ev.labels, ev.ill_probabilities) : 0.0;
    result.history.push_back(rec);
    if (on_epoch) on_epoch(rec);

    if (epoch == 1 || best_loss - rec.val_loss > cfg.early_stop_min_delta) {
      best_loss = rec.val_loss;
      if (cfg.restore_best) best_state = snapshot(model);
    }
    if (should_stop(result.history, cfg.early_stop_min_delta, cfg.early_stop_patience)) break;
  }

  if (cfg.restore_best) {
    restore(model, best_state);
    result.best_epoch = best_epoch(result.history, cfg.early_stop_min_delta);
  } else {
    result.best_epoch = result.history.back().epoch;
  }

  const Evaluation final_eval = evaluate_model(model, ds, fold.validation, cfg.batch_size);
  result.metrics.fold = fold.fold_index;
  result.metrics.loss = final_eval.loss;
  const ConfusionMatrix cm = confusion(final_eval.labels, final_eval.predictions);
  result.metrics.accuracy = accuracy(cm);
  result.metrics.precision = precision(cm);
  result.metrics.recall = recall(cm);
  result.metrics.f1 = f1(cm);
  result.metrics.auc =
      has_both_classes(final_eval.labels) ? auc(final_eval.labels, final_eval.ill_probabilities) : 0.0;
  return result;
}

}  // namespace mmtumor
