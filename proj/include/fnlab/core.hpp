#pragma once

// Domain types shared by every module: sparse features, impressions, labeled
// examples, snapshots and hyperparameters, plus the canonical text format for
// training examples.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <system_error>
#include <utility>
#include <vector>

#include "fnlab/errors.hpp"

namespace fnlab {

using FeatureId = std::uint32_t;

inline constexpr std::size_t kDefaultDimension = std::size_t{1} << 18;

struct FeatureEntry {
  FeatureId id = 0;
  double value = 0.0;

  bool operator==(const FeatureEntry&) const = default;
};

// Sorted, duplicate-free list of non-zero finite feature values.
class SparseVector {
 public:
  SparseVector() = default;

  // Accepts only canonical input (strictly increasing ids, finite non-zero
  // values).
  static SparseVector from_sorted(std::vector<FeatureEntry> entries) {
    for (std::size_t i = 0; i < entries.size(); ++i) {
      if (!std::isfinite(entries[i].value)) throw ContractError("sparse vector value is not finite");
      if (entries[i].value == 0.0) throw ContractError("sparse vector holds an explicit zero");
      if (i > 0 && entries[i - 1].id >= entries[i].id) {
        throw ContractError("sparse vector ids must be strictly increasing");
      }
    }
    SparseVector v;
    v.entries_ = std::move(entries);
    return v;
  }

  // Sorts by id, sums duplicates and drops zeros. Non-finite values are
  // rejected.
  static SparseVector canonicalize(std::vector<FeatureEntry> entries) {
    for (const auto& e : entries) {
      if (!std::isfinite(e.value)) throw ContractError("sparse vector value is not finite");
    }
    std::stable_sort(entries.begin(), entries.end(),
                     [](const FeatureEntry& a, const FeatureEntry& b) { return a.id < b.id; });
    std::vector<FeatureEntry> out;
    out.reserve(entries.size());
    for (const auto& e : entries) {
      if (!out.empty() && out.back().id == e.id) {
        out.back().value += e.value;
      } else {
        out.push_back(e);
      }
    }
    std::erase_if(out, [](const FeatureEntry& e) { return e.value == 0.0; });
    SparseVector v;
    v.entries_ = std::move(out);
    return v;
  }

  std::span<const FeatureEntry> entries() const noexcept { return entries_; }
  std::size_t size() const noexcept { return entries_.size(); }
  bool empty() const noexcept { return entries_.empty(); }
  auto begin() const noexcept { return entries_.begin(); }
  auto end() const noexcept { return entries_.end(); }

  bool operator==(const SparseVector&) const = default;

 private:
  std::vector<FeatureEntry> entries_;
};

inline double dot(const SparseVector& v, std::span<const double> w) {
  double sum = 0.0;
  for (const auto& e : v) {
    if (e.id >= w.size()) {
      throw IndexError("feature id " + std::to_string(e.id) + " outside weight range " +
                       std::to_string(w.size()));
    }
    sum += e.value * w[e.id];
  }
  return sum;
}

// Partition of [0, dimension) into contiguous per-field id ranges.
class FeatureLayout {
 public:
  FeatureLayout() = default;

  // One range per field, sized by the field's cardinality.
  static FeatureLayout from_cardinalities(std::span<const std::size_t> cardinalities) {
    FeatureLayout layout;
    std::size_t offset = 0;
    for (auto c : cardinalities) {
      if (c == 0) throw ConfigError("field cardinality must be positive");
      layout.offsets_.push_back(offset);
      offset += c;
    }
    layout.dimension_ = offset;
    return layout;
  }

  // `fields` equal buckets covering [0, dimension).
  static FeatureLayout uniform(std::size_t fields, std::size_t dimension) {
    if (fields == 0 || dimension < fields) throw ConfigError("dimension too small for field count");
    FeatureLayout layout;
    const std::size_t bucket = dimension / fields;
    for (std::size_t f = 0; f < fields; ++f) layout.offsets_.push_back(f * bucket);
    layout.dimension_ = dimension;
    return layout;
  }

  std::size_t fields() const noexcept { return offsets_.size(); }
  std::size_t dimension() const noexcept { return dimension_; }
  std::size_t offset(std::size_t field) const { return offsets_.at(field); }
  std::size_t field_size(std::size_t field) const {
    return (field + 1 < offsets_.size() ? offsets_[field + 1] : dimension_) - offsets_.at(field);
  }

  // Field that owns `id`, or nullopt when the id is outside the layout.
  std::optional<std::size_t> field_of(FeatureId id) const {
    if (offsets_.empty() || id >= dimension_) return std::nullopt;
    auto it = std::upper_bound(offsets_.begin(), offsets_.end(), std::size_t{id});
    return static_cast<std::size_t>(std::distance(offsets_.begin(), it) - 1);
  }

  std::span<const std::size_t> offsets() const noexcept { return offsets_; }

  bool operator==(const FeatureLayout&) const = default;

 private:
  std::vector<std::size_t> offsets_;
  std::size_t dimension_ = 0;
};

// FNV-1a; stable across platforms and independent of any run seed.
inline std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Hashes a categorical token of `field` into the field's bucket of `layout`.
inline FeatureId hash_feature(const FeatureLayout& layout, std::size_t field, std::string_view token) {
  const std::string key = std::to_string(field) + '\x1f' + std::string(token);
  return static_cast<FeatureId>(layout.offset(field) + fnv1a(key) % layout.field_size(field));
}

struct ImpressionEvent {
  std::uint64_t impression_id = 0;
  double impression_time = 0.0;
  SparseVector features;
  bool converts = false;             // hidden ground truth
  std::optional<double> delay;       // seconds until the engagement, iff converts

  void validate() const {
    if (!(impression_time >= 0.0) || !std::isfinite(impression_time)) {
      throw ContractError("impression time must be finite and non-negative");
    }
    if (converts != delay.has_value()) throw ContractError("delay must be present iff the impression converts");
    if (delay && !(*delay > 0.0 && std::isfinite(*delay))) throw ContractError("delay must be positive");
  }
  bool operator==(const ImpressionEvent&) const = default;
};

struct TrainingExample {
  SparseVector features;
  int label = 0;
  double weight = 1.0;
  std::optional<double> elapsed;        // impression -> snapshot (or ingestion)
  std::optional<double> time_to_click;  // impression -> engagement, positives only

  void validate() const {
    if (label != 0 && label != 1) throw ContractError("label must be 0 or 1");
    if (!(weight > 0.0) || !std::isfinite(weight)) throw ContractError("weight must be positive");
    if (time_to_click && label != 1) throw ContractError("time_to_click requires label 1");
    if (time_to_click && !(*time_to_click > 0.0)) throw ContractError("time_to_click must be positive");
    if (elapsed && !(*elapsed >= 0.0)) throw ContractError("elapsed must be non-negative");
  }

  bool operator==(const TrainingExample&) const = default;
};

// Immutable, versioned copy of model parameters.
template <typename Params>
class ModelSnapshot {
 public:
  ModelSnapshot(std::uint64_t version, std::uint64_t step, Params params)
      : version_(version), step_(step), params_(std::make_shared<const Params>(std::move(params))) {}

  std::uint64_t version() const noexcept { return version_; }
  std::uint64_t step() const noexcept { return step_; }
  const Params& params() const noexcept { return *params_; }

 private:
  std::uint64_t version_;
  std::uint64_t step_;
  std::shared_ptr<const Params> params_;
};

enum class Pooling { kSum, kMean };

struct Hyperparams {
  double learning_rate = 0.02;
  double decay = 1e-6;
  std::size_t batch_size = 128;
  double df_learning_rate = 0.005;
  double df_l2_alpha = 2.0;
  std::vector<std::size_t> deep_layers = {400, 300, 200, 100};
  double negative_downsample_rate = 0.05;
  std::uint64_t seed = 0;

  // Settings with no fixed default elsewhere.
  std::size_t embedding_dim = 16;
  double leaky_slope = 0.01;
  Pooling pooling = Pooling::kSum;
  bool pu_clamp_risk = false;

  void validate() const {
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
    if (!(decay >= 0.0)) throw ConfigError("decay must be non-negative");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (!(df_learning_rate > 0.0)) throw ConfigError("df_learning_rate must be positive");
    if (!(df_l2_alpha >= 0.0)) throw ConfigError("df_l2_alpha must be non-negative");
    for (auto s : deep_layers) {
      if (s == 0) throw ConfigError("deep layer sizes must be positive");
    }
    if (!(negative_downsample_rate > 0.0 && negative_downsample_rate <= 1.0)) {
      throw ConfigError("negative_downsample_rate must be in (0, 1]");
    }
    if (embedding_dim == 0) throw ConfigError("embedding_dim must be positive");
    if (!(leaky_slope >= 0.0 && leaky_slope < 1.0)) throw ConfigError("leaky_slope must be in [0, 1)");
  }
};

// ---------------------------------------------------------------------------
// Text encoding

// Shortest representation that parses back to the same double.
inline std::string format_double(double v) {
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

inline std::optional<double> parse_double(std::string_view s) {
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

template <typename Int>
std::optional<Int> parse_int(std::string_view s) {
  Int v{};
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || s.empty()) return std::nullopt;
  return v;
}

inline std::vector<std::string_view> split(std::string_view line, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(sep, start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
}

inline void append_features(std::string& out, const SparseVector& v) {
  for (const auto& e : v) {
    out += '\t';
    out += std::to_string(e.id);
    out += ':';
    out += format_double(e.value);
  }
}

// Parses `id:value` fields. Input must already be canonical.
inline SparseVector parse_features(std::span<const std::string_view> fields, std::size_t line_no) {
  std::vector<FeatureEntry> entries;
  entries.reserve(fields.size());
  for (auto f : fields) {
    const auto colon = f.find(':');
    if (colon == std::string_view::npos) throw ParseError(line_no, "feature field without ':'");
    auto id = parse_int<FeatureId>(f.substr(0, colon));
    auto value = parse_double(f.substr(colon + 1));
    if (!id || !value) throw ParseError(line_no, "bad feature '" + std::string(f) + "'");
    entries.push_back({*id, *value});
  }
  try {
    return SparseVector::from_sorted(std::move(entries));
  } catch (const ContractError& e) {
    throw ParseError(line_no, e.what());
  }
}

inline void append_optional(std::string& out, const std::optional<double>& v) {
  out += '\t';
  if (v) out += format_double(*v);
}

// label \t weight \t elapsed \t time_to_click [\t id:value]...
inline std::string format_example(const TrainingExample& ex) {
  std::string out = std::to_string(ex.label);
  out += '\t';
  out += format_double(ex.weight);
  append_optional(out, ex.elapsed);
  append_optional(out, ex.time_to_click);
  append_features(out, ex.features);
  return out;
}

inline std::optional<double> parse_optional(std::string_view s, std::size_t line_no, const char* what) {
  if (s.empty()) return std::nullopt;
  auto v = parse_double(s);
  if (!v) throw ParseError(line_no, std::string("bad ") + what);
  return v;
}

inline TrainingExample parse_example_fields(std::span<const std::string_view> fields, std::size_t line_no) {
  if (fields.size() < 4) throw ParseError(line_no, "expected at least 4 fields");
  TrainingExample ex;
  if (fields[0] == "0") {
    ex.label = 0;
  } else if (fields[0] == "1") {
    ex.label = 1;
  } else {
    throw ParseError(line_no, "label must be 0 or 1");
  }
  auto weight = parse_double(fields[1]);
  if (!weight) throw ParseError(line_no, "bad weight");
  ex.weight = *weight;
  ex.elapsed = parse_optional(fields[2], line_no, "elapsed");
  ex.time_to_click = parse_optional(fields[3], line_no, "time_to_click");
  ex.features = parse_features(fields.subspan(4), line_no);
  try {
    ex.validate();
  } catch (const ContractError& e) {
    throw ParseError(line_no, e.what());
  }
  return ex;
}

inline TrainingExample parse_example(std::string_view line, std::size_t line_no = 0) {
  const auto fields = split(line, '\t');
  return parse_example_fields(fields, line_no);
}

}  // namespace fnlab
