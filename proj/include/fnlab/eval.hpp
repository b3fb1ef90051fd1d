#pragma once

// Offline metrics: cross entropy, RCE, PR-AUC, pooled RCE and calibration
// bins.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <boost/math/distributions/students_t.hpp>
#include <nlohmann/json.hpp>

#include "fnlab/core.hpp"
#include "fnlab/errors.hpp"

namespace fnlab {

inline constexpr double kPredictionClip = 1e-7;

inline double clip_probability(double p) { return std::clamp(p, kPredictionClip, 1.0 - kPredictionClip); }

namespace detail {

inline double weight_at(std::span<const double> weights, std::size_t i) { return weights.empty() ? 1.0 : weights[i]; }

inline void check_lengths(std::size_t preds, std::size_t labels, std::span<const double> weights) {
  if (preds != labels) throw ContractError("predictions and labels differ in length");
  if (!weights.empty() && weights.size() != labels) throw ContractError("weights and labels differ in length");
}

}  // namespace detail

// Weighted mean negative log-likelihood. Empty `weights` means unit weights.
inline double cross_entropy(std::span<const double> preds, std::span<const int> labels,
                            std::span<const double> weights = {}) {
  detail::check_lengths(preds.size(), labels.size(), weights);
  if (preds.empty()) throw ContractError("cross entropy of an empty set");
  double total = 0.0;
  double weight_sum = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const double w = detail::weight_at(weights, i);
    const double p = clip_probability(preds[i]);
    total -= w * (labels[i] == 1 ? std::log(p) : std::log1p(-p));
    weight_sum += w;
  }
  return total / weight_sum;
}

// Constant predictor: the weighted mean label.
inline double naive_baseline(std::span<const int> labels, std::span<const double> weights = {}) {
  detail::check_lengths(labels.size(), labels.size(), weights);
  if (labels.empty()) throw ContractError("naive baseline of an empty set");
  double pos = 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double w = detail::weight_at(weights, i);
    pos += w * labels[i];
    total += w;
  }
  return clip_probability(pos / total);
}

// Relative cross entropy in percent; higher is better.
inline double rce(double ce_pred, double ce_naive) {
  if (!(ce_naive > 0.0)) throw DomainError("rce needs a positive baseline cross entropy");
  return (ce_naive - ce_pred) * 100.0 / ce_naive;
}

// Area under the precision-recall step curve. Examples are swept in
// descending score order, tied scores forming a single threshold, and each
// threshold adds precision * (recall gain).
inline double pr_auc(std::span<const double> preds, std::span<const int> labels, std::span<const double> weights = {}) {
  detail::check_lengths(preds.size(), labels.size(), weights);
  double positives = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == 1) positives += detail::weight_at(weights, i);
  }
  if (!(positives > 0.0)) throw DomainError("pr_auc needs at least one positive");

  std::vector<std::size_t> order(preds.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return preds[a] > preds[b]; });

  double tp = 0.0;
  double fp = 0.0;
  double area = 0.0;
  double prev_recall = 0.0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && preds[order[j]] == preds[order[i]]) {
      const std::size_t k = order[j];
      (labels[k] == 1 ? tp : fp) += detail::weight_at(weights, k);
      ++j;
    }
    const double recall = tp / positives;
    if (recall > prev_recall) area += (tp / (tp + fp)) * (recall - prev_recall);
    prev_recall = recall;
    i = j;
  }
  return std::clamp(area, 0.0, 1.0);
}

struct CalibrationBin {
  double lower = 0.0;
  double upper = 0.0;
  std::size_t count = 0;
  std::optional<double> mean_prediction;  // absent for empty bins
  std::optional<double> positive_rate;

  bool operator==(const CalibrationBin&) const = default;
};

// Equal-width bins over [0, 1]; means are weighted, counts are raw.
inline std::vector<CalibrationBin> calibration_report(std::span<const double> preds, std::span<const int> labels,
                                                      std::span<const double> weights = {}, std::size_t n_bins = 20) {
  detail::check_lengths(preds.size(), labels.size(), weights);
  if (n_bins == 0) throw ContractError("calibration needs at least one bin");
  std::vector<CalibrationBin> bins(n_bins);
  std::vector<double> wsum(n_bins, 0.0), psum(n_bins, 0.0), ysum(n_bins, 0.0);
  for (std::size_t b = 0; b < n_bins; ++b) {
    bins[b].lower = static_cast<double>(b) / static_cast<double>(n_bins);
    bins[b].upper = static_cast<double>(b + 1) / static_cast<double>(n_bins);
  }
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const double p = std::clamp(preds[i], 0.0, 1.0);
    const auto b = std::min(static_cast<std::size_t>(p * static_cast<double>(n_bins)), n_bins - 1);
    const double w = detail::weight_at(weights, i);
    bins[b].count += 1;
    wsum[b] += w;
    psum[b] += w * preds[i];
    ysum[b] += w * labels[i];
  }
  for (std::size_t b = 0; b < n_bins; ++b) {
    if (bins[b].count == 0) continue;
    bins[b].mean_prediction = psum[b] / wsum[b];
    bins[b].positive_rate = ysum[b] / wsum[b];
  }
  return bins;
}

// Scores every model on one shared evaluation set against one shared naive
// baseline (by default the weighted mean label of that set).
inline std::vector<double> pooled_rce(std::span<const std::function<double(const SparseVector&)>> models,
                                      std::span<const TrainingExample> shared_eval,
                                      std::optional<double> baseline = std::nullopt) {
  std::vector<int> labels;
  std::vector<double> weights;
  for (const auto& ex : shared_eval) {
    labels.push_back(ex.label);
    weights.push_back(ex.weight);
  }
  const double naive = clip_probability(baseline.value_or(naive_baseline(labels, weights)));
  const std::vector<double> naive_preds(labels.size(), naive);
  const double ce_naive = cross_entropy(naive_preds, labels, weights);
  std::vector<double> out;
  std::vector<double> preds(labels.size());
  for (const auto& model : models) {
    for (std::size_t i = 0; i < shared_eval.size(); ++i) preds[i] = model(shared_eval[i].features);
    out.push_back(rce(cross_entropy(preds, labels, weights), ce_naive));
  }
  return out;
}

struct MetricsReport {
  std::string model_id;
  std::string model_kind;
  std::string loss;
  std::uint64_t version = 0;
  std::uint64_t step = 0;
  std::size_t n_examples = 0;
  double ce = 0.0;
  double rce = 0.0;
  double pr_auc = 0.0;
  std::vector<CalibrationBin> bins;
};

inline nlohmann::ordered_json to_json(const MetricsReport& r) {
  nlohmann::ordered_json bins = nlohmann::ordered_json::array();
  for (const auto& b : r.bins) {
    nlohmann::ordered_json jb;
    jb["lower"] = b.lower;
    jb["upper"] = b.upper;
    jb["count"] = b.count;
    jb["mean_prediction"] = b.mean_prediction ? nlohmann::ordered_json(*b.mean_prediction) : nlohmann::ordered_json();
    jb["positive_rate"] = b.positive_rate ? nlohmann::ordered_json(*b.positive_rate) : nlohmann::ordered_json();
    bins.push_back(std::move(jb));
  }
  nlohmann::ordered_json j;
  j["model_id"] = r.model_id;
  j["model"] = r.model_kind;
  j["loss"] = r.loss;
  j["version"] = r.version;
  j["step"] = r.step;
  j["n_examples"] = r.n_examples;
  j["ce"] = r.ce;
  j["rce"] = r.rce;
  j["pr_auc"] = r.pr_auc;
  j["calibration"] = std::move(bins);
  return j;
}

// Scores predictions against labels with a given naive baseline probability.
inline MetricsReport evaluate_predictions(std::span<const double> preds, std::span<const int> labels,
                                          std::span<const double> weights, double naive, std::size_t n_bins = 20) {
  MetricsReport r;
  r.n_examples = preds.size();
  r.ce = cross_entropy(preds, labels, weights);
  const std::vector<double> naive_preds(labels.size(), naive);
  r.rce = rce(r.ce, cross_entropy(naive_preds, labels, weights));
  r.pr_auc = pr_auc(preds, labels, weights);
  r.bins = calibration_report(preds, labels, weights, n_bins);
  return r;
}

struct WelchResult {
  double t = 0.0;
  double df = 0.0;
  double p_value = 1.0;  // two-sided
};

// Unequal-variance two-sample t-test, used to compare per-run metrics.
inline WelchResult welch_t_test(std::span<const double> a, std::span<const double> b) {
  if (a.size() < 2 || b.size() < 2) throw ContractError("welch t-test needs two samples per group");
  auto moments = [](std::span<const double> x) {
    const double mean = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
    double ss = 0.0;
    for (double v : x) ss += (v - mean) * (v - mean);
    return std::pair{mean, ss / static_cast<double>(x.size() - 1)};
  };
  const auto [ma, va] = moments(a);
  const auto [mb, vb] = moments(b);
  const double na = static_cast<double>(a.size());
  const double nb = static_cast<double>(b.size());
  const double se2 = va / na + vb / nb;
  WelchResult r;
  if (se2 == 0.0) {
    r.t = ma == mb ? 0.0 : std::copysign(std::numeric_limits<double>::infinity(), ma - mb);
    r.df = na + nb - 2.0;
    r.p_value = ma == mb ? 1.0 : 0.0;
    return r;
  }
  r.t = (ma - mb) / std::sqrt(se2);
  r.df = se2 * se2 / ((va / na) * (va / na) / (na - 1.0) + (vb / nb) * (vb / nb) / (nb - 1.0));
  const boost::math::students_t dist(r.df);
  r.p_value = 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(r.t)));
  return r;
}

}  // namespace fnlab
