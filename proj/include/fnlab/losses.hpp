#pragma once

// Per-example losses under fake-negative training, each returning the value
// and its derivatives with respect to the CTR logit (and the delay logit for
// the delayed-feedback loss). Every loss is scaled by the example weight.

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <string_view>

#include "fnlab/errors.hpp"
#include "fnlab/models.hpp"

namespace fnlab {

struct LossInput {
  double logit = 0.0;
  int label = 0;
  double weight = 1.0;
  std::optional<double> elapsed;
  std::optional<double> time_to_click;
  std::optional<double> delay_logit;  // w_d . x, delayed feedback only
};

struct LossOutput {
  double value = 0.0;
  double d_logit = 0.0;
  double d_delay_logit = 0.0;
};

enum class LossKind { kLog, kDelayedFeedback, kPu, kFnWeighted, kFnCalibration };

inline constexpr LossKind kAllLosses[] = {LossKind::kLog, LossKind::kDelayedFeedback, LossKind::kPu,
                                          LossKind::kFnWeighted, LossKind::kFnCalibration};

inline std::string_view loss_name(LossKind k) {
  switch (k) {
    case LossKind::kLog: return "log";
    case LossKind::kDelayedFeedback: return "delayed_feedback";
    case LossKind::kPu: return "pu";
    case LossKind::kFnWeighted: return "fn_weighted";
    case LossKind::kFnCalibration: return "fn_calibration";
  }
  return "?";
}

inline LossKind parse_loss(std::string_view name) {
  for (auto k : kAllLosses) {
    if (loss_name(k) == name) return k;
  }
  throw ConfigError("unknown loss '" + std::string(name) + "'");
}

// fn_calibration trains the biased model with log loss; the transform is
// applied at prediction time.
inline LossKind training_loss(LossKind k) { return k == LossKind::kFnCalibration ? LossKind::kLog : k; }
inline bool applies_fn_calibration(LossKind k) { return k == LossKind::kFnCalibration; }

inline LossOutput log_loss(const LossInput& in) {
  const double z = in.logit;
  const double w = in.weight;
  // -log sigma(z) = softplus(-z), -log(1 - sigma(z)) = softplus(z)
  const double value = in.label == 1 ? softplus(-z) : softplus(z);
  return {w * value, w * (sigmoid(z) - in.label), 0.0};
}

// log(e^a + e^b)
inline double log_sum_exp(double a, double b) {
  const double m = std::max(a, b);
  if (m == -std::numeric_limits<double>::infinity()) return m;
  return m + std::log1p(std::exp(-std::abs(a - b)));
}

// Joint CTR / exponential-delay likelihood. For an unobserved engagement,
// 1 - f + f e^{-lambda e} = f (e^{-z} + e^{-lambda e}) with f = sigma(z), which
// gives the overflow-free form -log sigma(z) - logsumexp(-z, -lambda e).
inline LossOutput delayed_feedback_loss(const LossInput& in) {
  if (!in.delay_logit) throw ContractError("delayed feedback loss requires a delay logit");
  const double z = in.logit;
  const double u = *in.delay_logit;
  const double rate = std::exp(u);
  const double w = in.weight;
  if (in.label == 1) {
    if (!in.time_to_click) throw ContractError("delayed feedback positive requires time_to_click");
    const double d = *in.time_to_click;
    const double value = softplus(-z) - u + rate * d;
    return {w * value, w * (sigmoid(z) - 1.0), w * (rate * d - 1.0)};
  }
  if (!in.elapsed) throw ContractError("delayed feedback negative requires elapsed");
  const double e = *in.elapsed;
  const double hazard = e == 0.0 ? 0.0 : rate * e;
  const double value = softplus(-z) - log_sum_exp(-z, -hazard);
  const double d_logit = sigmoid(hazard - z) - sigmoid(-z);
  const double d_delay = hazard * sigmoid(z - hazard);
  return {w * value, w * d_logit, w * d_delay};
}

// Unbiased PU risk with unlabeled = observed negatives; positives contribute
// log f - log(1 - f) = z, which is unbounded below.
inline LossOutput pu_loss(const LossInput& in) {
  const double z = in.logit;
  const double w = in.weight;
  if (in.label == 1) return {-w * z, -w, 0.0};
  return {w * softplus(z), w * sigmoid(z), 0.0};
}

// Importance-weighted log loss with the weights evaluated at a fixed
// probability `f_fixed` (no gradient flows through the weight).
inline LossOutput fn_weighted_loss_at(const LossInput& in, double f_fixed) {
  const double z = in.logit;
  const double w = in.weight;
  if (in.label == 1) {
    const double iw = 1.0 + f_fixed;
    return {w * iw * softplus(-z), w * iw * (sigmoid(z) - 1.0), 0.0};
  }
  const double iw = (1.0 - f_fixed) * (1.0 + f_fixed);
  return {w * iw * softplus(z), w * iw * sigmoid(z), 0.0};
}

inline LossOutput fn_weighted_loss(const LossInput& in) { return fn_weighted_loss_at(in, sigmoid(in.logit)); }

// Maps the biased-distribution probability b back to p = b / (1 - b), capped at 1.
inline double fn_calibrate(double b) {
  if (!(b >= 0.0 && b < 1.0)) throw DomainError("fn_calibrate needs b in [0, 1)");
  return std::min(b / (1.0 - b), 1.0);
}

inline LossOutput loss_by_kind(LossKind k, const LossInput& in) {
  switch (training_loss(k)) {
    case LossKind::kLog: return log_loss(in);
    case LossKind::kDelayedFeedback: return delayed_feedback_loss(in);
    case LossKind::kPu: return pu_loss(in);
    case LossKind::kFnWeighted: return fn_weighted_loss(in);
    case LossKind::kFnCalibration: break;
  }
  throw ConfigError("unhandled loss");
}

inline LossOutput loss_by_name(std::string_view name, const LossInput& in) { return loss_by_kind(parse_loss(name), in); }

}  // namespace fnlab
