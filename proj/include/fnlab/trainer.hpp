#pragma once

// SGD training in offline (shuffled multi-epoch) and continuous (single pass
// in event order, periodic snapshots) modes.

#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fnlab/core.hpp"
#include "fnlab/errors.hpp"
#include "fnlab/losses.hpp"
#include "fnlab/models.hpp"
#include "fnlab/random.hpp"
#include "fnlab/stream.hpp"

namespace fnlab {

// Everything a snapshot needs to make predictions.
template <typename Model>
struct ModelBundle {
  Model ctr;
  std::optional<DelayModel> delay;
  bool fn_calibrated = false;

  double logit(const SparseVector& x) const { return predict_logit(ctr, x); }

  // Probability of an (eventual) engagement; applies the fake-negative
  // calibration when the bundle was trained for it.
  double probability(const SparseVector& x) const {
    const double b = sigmoid(logit(x));
    if (!fn_calibrated) return b;
    return fn_calibrate(std::min(b, std::nextafter(1.0, 0.0)));
  }

  bool operator==(const ModelBundle&) const = default;
};

template <typename Model>
using Snapshot = ModelSnapshot<ModelBundle<Model>>;

template <typename Model>
struct TrainerState {
  ModelBundle<Model> params;
  LossKind loss = LossKind::kLog;
  Hyperparams hyper;
  std::uint64_t step = 0;
  std::uint64_t snapshots_emitted = 0;
  // The L2 penalty of the delayed-feedback objective is defined against a
  // loss summed over the dataset; batch gradients are means, so the penalty
  // gradient is divided by the dataset size. Trainers set this; 1 means the
  // raw 2*alpha*params.
  double l2_normalizer = 1.0;
  Rng rng;
  std::vector<double> loss_trace;  // mean batch loss per step

  typename Model::Gradient grad;
  typename Model::Trace trace;
  SparseGradient delay_grad;

  TrainerState(Model model, LossKind loss_kind, Hyperparams h, std::optional<DelayModel> delay = std::nullopt)
      : loss(loss_kind), hyper(std::move(h)), rng(derive_seed(hyper.seed, seed_tag::kShuffle)) {
    hyper.validate();
    params.ctr = std::move(model);
    params.delay = std::move(delay);
    params.fn_calibrated = applies_fn_calibration(loss);
    if (training_loss(loss) == LossKind::kDelayedFeedback && !params.delay) {
      throw ConfigError("delayed feedback loss needs a delay model");
    }
    grad = params.ctr.make_gradient();
  }
};

// Pairs a CTR model with a Glorot-initialized delay model when the loss
// needs one.
template <typename Model>
TrainerState<Model> make_trainer(Model model, LossKind loss, const Hyperparams& hyper, std::size_t dimension) {
  std::optional<DelayModel> delay;
  if (training_loss(loss) == LossKind::kDelayedFeedback) {
    delay = DelayModel::glorot(dimension, derive_seed(hyper.seed, seed_tag::kInit) + 1);
  }
  return TrainerState<Model>(std::move(model), loss, hyper, std::move(delay));
}

namespace detail {

inline void check_df_fields(const TrainingExample& ex) {
  if (ex.label == 1 && !ex.time_to_click) throw ContractError("delayed feedback positive without time_to_click");
  if (ex.label == 0 && !ex.elapsed) throw ContractError("delayed feedback negative without elapsed");
}

// One SGD step over `n` examples produced by `get(i)`.
template <typename Model, typename Get>
double sgd_step_impl(TrainerState<Model>& s, std::size_t n, Get&& get) {
  if (n == 0) throw ContractError("empty batch");
  const LossKind kind = training_loss(s.loss);
  const bool df = kind == LossKind::kDelayedFeedback;
  const std::uint64_t step_no = s.step + 1;
  const double inv_n = 1.0 / static_cast<double>(n);

  s.grad.clear();
  s.delay_grad.clear();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const TrainingExample& ex = get(i);
    LossInput in;
    in.label = ex.label;
    in.weight = ex.weight;
    if (df) {
      check_df_fields(ex);
      in.elapsed = ex.elapsed;
      in.time_to_click = ex.time_to_click;
      in.delay_logit = s.params.delay->delay_logit(ex.features);
    }
    in.logit = s.params.ctr.forward(ex.features, s.trace);
    const LossOutput out = loss_by_kind(kind, in);
    if (!std::isfinite(out.value) || !std::isfinite(out.d_logit) || !std::isfinite(out.d_delay_logit)) {
      throw DivergenceError(step_no, "non-finite loss or gradient");
    }
    total += out.value;
    s.params.ctr.backward(ex.features, s.trace, out.d_logit * inv_n, s.grad);
    if (df) s.delay_grad.add(ex.features, out.d_delay_logit * inv_n);
  }
  const double mean = total * inv_n;
  if (!std::isfinite(mean)) throw DivergenceError(step_no, "non-finite batch loss");

  const bool clamped = kind == LossKind::kPu && s.hyper.pu_clamp_risk && mean < 0.0;
  if (!clamped) {
    const double base = df ? s.hyper.df_learning_rate : s.hyper.learning_rate;
    const double eta = base / (1.0 + s.hyper.decay * static_cast<double>(s.step));
    if (df && s.hyper.df_l2_alpha > 0.0) {
      const double shrink = 1.0 - eta * 2.0 * s.hyper.df_l2_alpha / s.l2_normalizer;
      s.params.ctr.scale(shrink);
      s.params.delay->scale(shrink);
    }
    bool finite = s.params.ctr.apply(s.grad, eta);
    if (df) finite = s.params.delay->apply(s.delay_grad, eta) && finite;
    if (!finite) throw DivergenceError(step_no, "non-finite parameter");
  }
  s.step = step_no;
  s.loss_trace.push_back(mean);
  return mean;
}

}  // namespace detail

// Mean-gradient SGD step with inverse-time learning-rate decay
// eta_t = eta_0 / (1 + decay * t). Returns the mean batch loss.
template <typename Model>
double sgd_step(TrainerState<Model>& s, std::span<const TrainingExample> batch) {
  return detail::sgd_step_impl(s, batch.size(), [&](std::size_t i) -> const TrainingExample& { return batch[i]; });
}

template <typename Model>
void train_offline(TrainerState<Model>& s, std::span<const TrainingExample> dataset, std::size_t epochs) {
  if (dataset.empty()) throw ContractError("empty training set");
  if (epochs == 0) return;
  s.l2_normalizer = static_cast<double>(dataset.size());
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const std::size_t bs = s.hyper.batch_size;
  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    s.rng.shuffle(std::span(order));
    for (std::size_t start = 0; start < order.size(); start += bs) {
      const std::size_t n = std::min(bs, order.size() - start);
      detail::sgd_step_impl(s, n, [&](std::size_t i) -> const TrainingExample& { return dataset[order[start + i]]; });
    }
  }
}

inline void check_stream_order(std::span<const StreamEvent> stream) {
  for (std::size_t i = 1; i < stream.size(); ++i) {
    if (stream[i].emit_time < stream[i - 1].emit_time) {
      throw ContractError("stream is not ordered by emit time at event " + std::to_string(i));
    }
  }
}

// Single pass in emit order over micro-batches of consecutive events; the
// trailing partial batch is trained as a short batch. A snapshot is emitted
// whenever the global step count reaches a multiple of `snapshot_every`.
template <typename Model>
std::vector<Snapshot<Model>> train_continuous(TrainerState<Model>& s, std::span<const StreamEvent> stream,
                                              std::size_t snapshot_every) {
  if (snapshot_every == 0) throw ConfigError("snapshot_every must be positive");
  check_stream_order(stream);
  std::vector<Snapshot<Model>> snapshots;
  if (stream.empty()) return snapshots;
  s.l2_normalizer = static_cast<double>(stream.size());
  const std::size_t bs = s.hyper.batch_size;
  for (std::size_t start = 0; start < stream.size(); start += bs) {
    const std::size_t n = std::min(bs, stream.size() - start);
    detail::sgd_step_impl(s, n, [&](std::size_t i) -> const TrainingExample& { return stream[start + i].example; });
    if (s.step % snapshot_every == 0) snapshots.emplace_back(++s.snapshots_emitted, s.step, s.params);
  }
  return snapshots;
}

// Snapshot of the current parameters outside the continuous cadence.
template <typename Model>
Snapshot<Model> take_snapshot(TrainerState<Model>& s) {
  return Snapshot<Model>(++s.snapshots_emitted, s.step, s.params);
}

}  // namespace fnlab
