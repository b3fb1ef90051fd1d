#pragma once

// Synthetic ground truth, fake-negative stream construction, snapshot
// labeling and downsampling.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "fnlab/core.hpp"
#include "fnlab/errors.hpp"
#include "fnlab/models.hpp"
#include "fnlab/random.hpp"

namespace fnlab {

inline constexpr double kAttributionWindow = 9.0 * 3600.0;

// Independent categorical fields, one active id (value 1) per field.
struct FeatureGen {
  std::vector<std::size_t> cardinalities;
  // Optional per-field category probabilities; uniform when empty.
  std::vector<std::vector<double>> category_probs;

  FeatureLayout layout() const { return FeatureLayout::from_cardinalities(cardinalities); }
};

struct GroundTruth {
  std::vector<double> w_star;    // true CTR weights, p*(x) = sigmoid(w_star . x)
  std::vector<double> w_d_star;  // true delay weights, lambda*(x) = exp(w_d_star . x)
  FeatureGen feature_gen;
  double horizon = 86400.0;
  double start_time = 0.0;

  double ctr(const SparseVector& x) const { return sigmoid(dot(x, w_star)); }
  double delay_rate(const SparseVector& x) const { return std::exp(dot(x, w_d_star)); }
};

struct StreamEvent {
  double emit_time = 0.0;
  TrainingExample example;
  std::uint64_t impression_id = 0;

  bool operator==(const StreamEvent&) const = default;
};

inline SparseVector draw_features(const FeatureGen& gen, const FeatureLayout& layout, Rng& rng) {
  std::vector<FeatureEntry> entries;
  entries.reserve(gen.cardinalities.size());
  for (std::size_t f = 0; f < gen.cardinalities.size(); ++f) {
    std::size_t c = 0;
    if (f < gen.category_probs.size() && !gen.category_probs[f].empty()) {
      const auto& probs = gen.category_probs[f];
      double u = rng.uniform();
      c = probs.size() - 1;
      for (std::size_t k = 0; k < probs.size(); ++k) {
        if (u < probs[k]) {
          c = k;
          break;
        }
        u -= probs[k];
      }
    } else {
      c = static_cast<std::size_t>(rng.index(gen.cardinalities[f]));
    }
    entries.push_back({static_cast<FeatureId>(layout.offset(f) + c), 1.0});
  }
  return SparseVector::from_sorted(std::move(entries));
}

// n impressions with uniform times over [start, start + horizon], sorted by
// time and numbered from `first_id`.
inline std::vector<ImpressionEvent> gen_synthetic(const GroundTruth& gt, std::size_t n, std::uint64_t seed,
                                                  std::uint64_t first_id = 0) {
  if (n == 0) throw ConfigError("impression count must be positive");
  if (gt.feature_gen.cardinalities.empty()) throw ConfigError("feature generator has no fields");
  for (std::size_t f = 0; f < gt.feature_gen.category_probs.size(); ++f) {
    const auto& probs = gt.feature_gen.category_probs[f];
    if (!probs.empty() && probs.size() != gt.feature_gen.cardinalities.at(f)) {
      throw ConfigError("category_probs size must match the field cardinality");
    }
  }
  const auto layout = gt.feature_gen.layout();
  if (gt.w_star.size() < layout.dimension() || gt.w_d_star.size() < layout.dimension()) {
    throw ConfigError("ground-truth weights shorter than the feature layout");
  }
  if (!(gt.horizon > 0.0)) throw ConfigError("horizon must be positive");

  Rng rng(seed);
  std::vector<double> times(n);
  for (auto& t : times) t = gt.start_time + rng.uniform() * gt.horizon;
  std::sort(times.begin(), times.end());

  std::vector<ImpressionEvent> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    ImpressionEvent ev;
    ev.impression_id = first_id + i;
    ev.impression_time = times[i];
    ev.features = draw_features(gt.feature_gen, layout, rng);
    ev.converts = rng.bernoulli(gt.ctr(ev.features));
    const double delay = rng.exponential(gt.delay_rate(ev.features));
    if (ev.converts) ev.delay = std::max(delay, std::numeric_limits<double>::min());
    out.push_back(std::move(ev));
  }
  return out;
}

inline bool stream_order_less(const StreamEvent& a, const StreamEvent& b) {
  return std::tie(a.emit_time, a.impression_id, a.example.label) <
         std::tie(b.emit_time, b.impression_id, b.example.label);
}

// Every impression enters as a negative at its impression time; converting
// impressions are duplicated as positives when the engagement happens.
inline std::vector<StreamEvent> to_fake_negative_stream(std::span<const ImpressionEvent> impressions) {
  std::vector<StreamEvent> out;
  out.reserve(impressions.size() * 2);
  for (const auto& imp : impressions) {
    imp.validate();
    StreamEvent neg;
    neg.emit_time = imp.impression_time;
    neg.impression_id = imp.impression_id;
    neg.example.features = imp.features;
    neg.example.label = 0;
    neg.example.elapsed = 0.0;
    out.push_back(neg);
    if (imp.converts) {
      StreamEvent pos;
      pos.emit_time = imp.impression_time + *imp.delay;
      pos.impression_id = imp.impression_id;
      pos.example.features = imp.features;
      pos.example.label = 1;
      pos.example.elapsed = *imp.delay;
      pos.example.time_to_click = *imp.delay;
      out.push_back(std::move(pos));
    }
  }
  std::stable_sort(out.begin(), out.end(), stream_order_less);
  return out;
}

// Labels as observed at `snapshot_time`: positive iff the engagement happened
// before the snapshot and within the attribution window.
inline std::vector<TrainingExample> snapshot_label(std::span<const ImpressionEvent> impressions, double snapshot_time,
                                                   double window = kAttributionWindow) {
  std::vector<TrainingExample> out;
  out.reserve(impressions.size());
  for (const auto& imp : impressions) {
    imp.validate();
    if (imp.impression_time > snapshot_time) throw ContractError("impression after snapshot time");
    TrainingExample ex;
    ex.features = imp.features;
    ex.elapsed = snapshot_time - imp.impression_time;
    if (imp.converts && imp.impression_time + *imp.delay <= snapshot_time && *imp.delay <= window) {
      ex.label = 1;
      ex.time_to_click = *imp.delay;
    }
    out.push_back(std::move(ex));
  }
  return out;
}

inline TrainingExample& example_of(TrainingExample& ex) { return ex; }
inline TrainingExample& example_of(StreamEvent& ev) { return ev.example; }

// Keeps each negative with probability `rate` and scales kept negatives'
// weight by 1/rate. Positives pass through.
template <typename T>
std::vector<T> downsample_negatives(std::vector<T> items, double rate, std::uint64_t seed) {
  if (!(rate > 0.0 && rate <= 1.0)) throw ConfigError("downsample rate must be in (0, 1]");
  if (rate == 1.0) return items;
  Rng rng(seed);
  std::vector<T> out;
  out.reserve(items.size());
  for (auto& item : items) {
    auto& ex = example_of(item);
    if (ex.label == 1) {
      out.push_back(std::move(item));
    } else if (rng.uniform() < rate) {
      ex.weight /= rate;
      out.push_back(std::move(item));
    }
  }
  return out;
}

// Same, applied to both classes (evaluation sets).
template <typename T>
std::vector<T> downsample_all(std::vector<T> items, double rate, std::uint64_t seed) {
  if (!(rate > 0.0 && rate <= 1.0)) throw ConfigError("downsample rate must be in (0, 1]");
  if (rate == 1.0) return items;
  Rng rng(seed);
  std::vector<T> out;
  for (auto& item : items) {
    if (rng.uniform() < rate) {
      example_of(item).weight /= rate;
      out.push_back(std::move(item));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Text encodings

// emit_time \t impression_id \t <canonical example fields>
inline std::string format_stream_event(const StreamEvent& ev) {
  return format_double(ev.emit_time) + '\t' + std::to_string(ev.impression_id) + '\t' + format_example(ev.example);
}

inline StreamEvent parse_stream_event(std::string_view line, std::size_t line_no = 0) {
  const auto fields = split(line, '\t');
  if (fields.size() < 6) throw ParseError(line_no, "stream event needs at least 6 fields");
  StreamEvent ev;
  auto t = parse_double(fields[0]);
  auto id = parse_int<std::uint64_t>(fields[1]);
  if (!t || !id) throw ParseError(line_no, "bad emit time or impression id");
  ev.emit_time = *t;
  ev.impression_id = *id;
  ev.example = parse_example_fields(std::span(fields).subspan(2), line_no);
  return ev;
}

// impression_id \t time \t converts \t delay \t id:value...
inline std::string format_impression(const ImpressionEvent& imp) {
  std::string out = std::to_string(imp.impression_id) + '\t' + format_double(imp.impression_time) + '\t' +
                    (imp.converts ? "1" : "0");
  append_optional(out, imp.delay);
  append_features(out, imp.features);
  return out;
}

inline ImpressionEvent parse_impression(std::string_view line, std::size_t line_no = 0) {
  const auto fields = split(line, '\t');
  if (fields.size() < 4) throw ParseError(line_no, "impression needs at least 4 fields");
  ImpressionEvent imp;
  auto id = parse_int<std::uint64_t>(fields[0]);
  auto t = parse_double(fields[1]);
  if (!id || !t || (fields[2] != "0" && fields[2] != "1")) throw ParseError(line_no, "bad impression header");
  imp.impression_id = *id;
  imp.impression_time = *t;
  imp.converts = fields[2] == "1";
  imp.delay = parse_optional(fields[3], line_no, "delay");
  imp.features = parse_features(std::span(fields).subspan(4), line_no);
  try {
    imp.validate();
  } catch (const ContractError& e) {
    throw ParseError(line_no, e.what());
  }
  return imp;
}

}  // namespace fnlab
