#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "json.hpp"
#include "vitforge/metrics.hpp"
#include "vitforge/preprocess.hpp"
#include "vitforge/tape.hpp"
#include "vitforge/vit.hpp"

namespace vitforge {

struct TrainConfig {
  std::size_t epochs = 50;
  std::size_t batch_size = 32;
  double learning_rate = 1e-4;
  std::size_t patience = 10;
  std::uint64_t seed = 0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  // Minimum decrease of the test loss that counts as an improvement.
  double min_delta = 1e-6;

  void validate() const {
    if (epochs < 1) throw ConfigError("epochs must be at least 1");
    if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
    if (patience < 1) throw ConfigError("patience must be at least 1");
    if (!(learning_rate > 0) || !std::isfinite(learning_rate))
      throw ConfigError("lr must be positive");
    if (!(adam_beta1 >= 0 && adam_beta1 < 1)) throw ConfigError("adam beta1 must lie in [0, 1)");
    if (!(adam_beta2 >= 0 && adam_beta2 < 1)) throw ConfigError("adam beta2 must lie in [0, 1)");
    if (!(adam_eps > 0)) throw ConfigError("adam eps must be positive");
  }
};

// Scalar cross-entropy of logits against labels (mean over rows).
template <typename T>
T cross_entropy(const Tensor<T>& logits, std::span<const std::int64_t> labels) {
  Tape<T> tape;
  return tape.value(ops::cross_entropy(tape, tape.leaf(logits), labels)).item();
}

// First/second moment estimates per parameter tensor plus the step counter.
template <typename T>
struct AdamState {
  std::vector<Tensor<T>> m, v;
  std::uint64_t t = 0;

  static AdamState zeros_like(std::span<const Tensor<T>* const> params) {
    AdamState s;
    for (const auto* p : params) {
      s.m.emplace_back(p->shape());
      s.v.emplace_back(p->shape());
    }
    return s;
  }
};

template <typename T>
void adam_step(std::span<Tensor<T>* const> params, std::span<const Tensor<T>* const> grads,
               AdamState<T>& state, const TrainConfig& cfg) {
  if (params.size() != grads.size() || params.size() != state.m.size())
    throw DimensionError("adam_step: " + std::to_string(params.size()) + " params, " +
                         std::to_string(grads.size()) + " grads, " +
                         std::to_string(state.m.size()) + " moment slots");
  for (std::size_t i = 0; i < params.size(); ++i) {
    require_same_shape(params[i]->shape(), grads[i]->shape(), "adam_step gradient");
    require_same_shape(params[i]->shape(), state.m[i].shape(), "adam_step state");
  }
  state.t += 1;
  const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<T>& p = *params[i];
    const Tensor<T>& g = *grads[i];
    Tensor<T>& m = state.m[i];
    Tensor<T>& v = state.v[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = static_cast<T>(b1 * m[j] + (1 - b1) * g[j]);
      v[j] = static_cast<T>(b2 * v[j] + (1 - b2) * g[j] * g[j]);
      const double mhat = m[j] / c1;
      const double vhat = v[j] / c2;
      p[j] = static_cast<T>(p[j] - cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.adam_eps));
    }
  }
}

template <typename T>
std::vector<Tensor<T>*> param_pointers(ViTParams<T>& p) {
  std::vector<Tensor<T>*> out;
  for_each_param([&](const std::string&, Tensor<T>& t) { out.push_back(&t); }, p);
  return out;
}

template <typename T>
std::vector<const Tensor<T>*> param_pointers(const ViTParams<T>& p) {
  std::vector<const Tensor<T>*> out;
  for_each_param([&](const std::string&, const Tensor<T>& t) { out.push_back(&t); }, p);
  return out;
}

struct EpochLog {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0;
  double train_accuracy = 0;
  double test_loss = 0;
  double test_accuracy = 0;
  double wall_time_s = 0;
};

// Deterministic fields only; wall time is reported separately.
inline nlohmann::json to_json(const EpochLog& e) {
  return {{"epoch", e.epoch},
          {"train_loss", e.train_loss},
          {"train_accuracy", e.train_accuracy},
          {"test_loss", e.test_loss},
          {"test_accuracy", e.test_accuracy}};
}

// Patience-based stopping on a loss that should decrease.
class EarlyStopping {
 public:
  EarlyStopping(std::size_t patience, double min_delta)
      : patience_(patience), min_delta_(min_delta) {}

  // Records the loss of `epoch`; returns true when it is a new best.
  bool observe(std::size_t epoch, double loss) {
    if (loss < best_loss_ - min_delta_) {
      best_loss_ = loss;
      best_epoch_ = epoch;
      stale_ = 0;
      return true;
    }
    ++stale_;
    return false;
  }

  bool should_stop() const { return stale_ >= patience_; }
  double best_loss() const { return best_loss_; }
  std::size_t best_epoch() const { return best_epoch_; }

 private:
  std::size_t patience_;
  double min_delta_;
  double best_loss_ = std::numeric_limits<double>::infinity();
  std::size_t best_epoch_ = 0;
  std::size_t stale_ = 0;
};

struct EpochLoopResult {
  std::vector<EpochLog> logs;
  std::size_t best_epoch = 0;
  bool stopped_early = false;
};

// Runs run_epoch(epoch) for epochs 1..E until the test loss has failed to
// improve for `patience` consecutive epochs. after_epoch receives each log and
// whether that epoch set a new best.
inline EpochLoopResult run_epochs(
    const TrainConfig& cfg, const std::function<EpochLog(std::size_t)>& run_epoch,
    const std::function<void(const EpochLog&, bool)>& after_epoch = {}) {
  EarlyStopping stopper(cfg.patience, cfg.min_delta);
  EpochLoopResult r;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    EpochLog log = run_epoch(epoch);
    log.epoch = epoch;
    r.logs.push_back(log);
    const bool improved = stopper.observe(epoch, log.test_loss);
    if (after_epoch) after_epoch(log, improved);
    if (stopper.should_stop()) {
      r.stopped_early = epoch < cfg.epochs;
      break;
    }
  }
  r.best_epoch = stopper.best_epoch();
  return r;
}

struct EvalResult {
  double loss = 0;
  metrics::MetricsReport report;
  std::vector<std::int64_t> predictions;
  Tensor<double> probabilities;  // n x C
};

// Loss and metrics of `params` over a dataset; parameters are not modified.
template <typename T>
EvalResult evaluate(const ViTConfig& cfg, const ViTParams<T>& params, const LabeledDataset& ds,
                    std::size_t batch_size, std::size_t positive_class = 1) {
  if (ds.empty()) throw ConfigError("evaluate: empty dataset");
  EvalResult r;
  r.probabilities = Tensor<double>({ds.size(), cfg.num_classes});
  std::vector<std::int64_t> truth;
  double loss_sum = 0;
  std::size_t row = 0;
  BatchPrefetcher<T> batches(ds, batch_size, cfg.image_size, std::nullopt, 0);
  while (auto b = batches.next()) {
    Tensor<T> logits = forward(cfg, params, b->images);
    loss_sum += static_cast<double>(cross_entropy(logits, b->labels)) *
                static_cast<double>(b->size());
    Tensor<T> probs = kernels::softmax(logits, 1);
    for (std::size_t i = 0; i < b->size(); ++i, ++row)
      for (std::size_t c = 0; c < cfg.num_classes; ++c)
        r.probabilities.at(row, c) = static_cast<double>(probs.at(i, c));
    auto pred = predict(logits);
    r.predictions.insert(r.predictions.end(), pred.begin(), pred.end());
    truth.insert(truth.end(), b->labels.begin(), b->labels.end());
  }
  r.loss = loss_sum / static_cast<double>(ds.size());
  r.report = metrics::make_report(truth, r.predictions, r.probabilities, cfg.num_classes,
                                  cfg.num_classes == 2 ? positive_class : 0);
  return r;
}

struct TrainStepResult {
  double loss = 0;
  std::size_t correct = 0;
};

// forward -> cross_entropy -> backward -> adam_step on one batch.
template <typename T>
TrainStepResult train_step(const ViTConfig& cfg, ViTParams<T>& params, AdamState<T>& adam,
                           const Batch<T>& batch, const TrainConfig& tcfg) {
  Tape<T> tape;
  auto vars = bind_params(tape, params, true);
  Var<T> logits = forward(tape, vars, cfg, batch.images);
  Var<T> loss = ops::cross_entropy(tape, logits, batch.labels);
  TrainStepResult r;
  r.loss = static_cast<double>(tape.value(loss).item());
  if (!std::isfinite(r.loss)) throw NumericalError("training loss became non-finite");
  const auto pred = predict(tape.value(logits));
  for (std::size_t i = 0; i < pred.size(); ++i) r.correct += pred[i] == batch.labels[i];
  tape.backward(loss);
  ViTParams<T> grads = gradients(tape, vars);
  auto p = param_pointers(params);
  auto g = param_pointers(std::as_const(grads));
  adam_step<T>(p, g, adam, tcfg);
  return r;
}

template <typename T>
struct FitResult {
  ViTParams<T> best_params;
  ViTParams<T> last_params;
  std::vector<EpochLog> logs;
  std::size_t best_epoch = 0;
  bool stopped_early = false;
};

// Called after every epoch with the log, the current parameters and whether
// the epoch is the best so far.
template <typename T>
using EpochObserver = std::function<void(const EpochLog&, const ViTParams<T>&, bool)>;

// Training loop with per-epoch evaluation on `test` and early stopping on
// the test loss. Returns the parameters from the best epoch.
template <typename T>
FitResult<T> fit(const ViTConfig& cfg, ViTParams<T> params, const LabeledDataset& train,
                 const LabeledDataset& test, const TrainConfig& tcfg,
                 const std::type_identity_t<EpochObserver<T>>& observer = {}) {
  cfg.validate();
  tcfg.validate();
  if (train.empty() || test.empty()) throw ConfigError("fit: train and test sets must be non-empty");
  if (train.num_classes != cfg.num_classes || test.num_classes != cfg.num_classes)
    throw ConfigError("fit: dataset has " + std::to_string(train.num_classes) +
                      " classes, model expects " + std::to_string(cfg.num_classes));
  auto adam = AdamState<T>::zeros_like(param_pointers(std::as_const(params)));
  FitResult<T> result;
  result.best_params = params;
  auto run_epoch = [&](std::size_t epoch) {
    const auto start = std::chrono::steady_clock::now();
    EpochLog log;
    double loss_sum = 0;
    std::size_t correct = 0;
    BatchPrefetcher<T> batches(train, tcfg.batch_size, cfg.image_size, tcfg.seed, epoch);
    while (auto b = batches.next()) {
      auto step = train_step(cfg, params, adam, *b, tcfg);
      loss_sum += step.loss * static_cast<double>(b->size());
      correct += step.correct;
    }
    log.train_loss = loss_sum / static_cast<double>(train.size());
    log.train_accuracy = 100.0 * static_cast<double>(correct) / static_cast<double>(train.size());
    auto ev = evaluate(cfg, params, test, tcfg.batch_size);
    log.test_loss = ev.loss;
    log.test_accuracy = ev.report.accuracy;
    log.wall_time_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return log;
  };
  auto after_epoch = [&](const EpochLog& log, bool improved) {
    if (improved) result.best_params = params;
    if (observer) observer(log, params, improved);
  };
  auto loop = run_epochs(tcfg, run_epoch, after_epoch);
  result.logs = std::move(loop.logs);
  result.best_epoch = loop.best_epoch;
  result.stopped_early = loop.stopped_early;
  result.last_params = std::move(params);
  return result;
}

}  // namespace vitforge
