#pragma once

// Prediction functions: logistic regression, wide-and-deep network and the
// exponential delay-rate model. All CTR models work in logit space; callers
// turn a logit into a probability with sigmoid().

#include <cmath>
#include <cstdint>
#include <iostream>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fnlab/core.hpp"
#include "fnlab/errors.hpp"
#include "fnlab/random.hpp"

namespace fnlab {

inline double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

// log(1 + e^z) without overflow.
inline double softplus(double z) {
  if (z > 0.0) return z + std::log1p(std::exp(-z));
  return std::log1p(std::exp(z));
}

inline double log_sigmoid(double z) { return -softplus(-z); }

inline double leaky_relu(double x, double slope) { return x > 0.0 ? x : slope * x; }
inline double leaky_relu_slope(double x, double slope) { return x > 0.0 ? 1.0 : slope; }

inline double glorot_bound(std::size_t fan_in, std::size_t fan_out) {
  return std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
}

inline void glorot_fill(std::span<double> out, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double bound = glorot_bound(fan_in, fan_out);
  for (auto& v : out) v = rng.uniform(-bound, bound);
}

inline bool all_finite(std::span<const double> values) {
  for (double v : values) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

// A named dense block, the unit of checkpointing.
struct NamedArray {
  std::string name;
  std::vector<std::uint64_t> shape;
  std::vector<double> data;

  bool operator==(const NamedArray&) const = default;
};

using ArrayMap = std::map<std::string, NamedArray>;

inline const NamedArray& require_array(const ArrayMap& arrays, const std::string& name) {
  auto it = arrays.find(name);
  if (it == arrays.end()) throw DataError("checkpoint is missing array '" + name + "'");
  return it->second;
}

// Gradient over a dense weight vector indexed by sparse features. Entries
// are appended unsorted and summed on application.
struct SparseGradient {
  std::vector<FeatureEntry> entries;

  void clear() { entries.clear(); }

  void add(const SparseVector& x, double scale) {
    for (const auto& e : x) entries.push_back({e.id, scale * e.value});
  }

  bool apply(std::span<double> weights, double step) const {
    bool finite = true;
    for (const auto& e : entries) {
      double& w = weights[e.id];
      w -= step * e.value;
      finite = finite && std::isfinite(w);
    }
    return finite;
  }
};

// ---------------------------------------------------------------------------

class LogisticModel {
 public:
  struct Trace {};

  struct Gradient {
    SparseGradient weights;
    double bias = 0.0;

    void clear() {
      weights.clear();
      bias = 0.0;
    }
  };

  std::vector<double> weights;
  double bias = 0.0;

  LogisticModel() = default;
  explicit LogisticModel(std::size_t dimension) : weights(dimension, 0.0) {}

  static LogisticModel glorot(std::size_t dimension, std::uint64_t seed) {
    LogisticModel m(dimension);
    Rng rng(seed);
    glorot_fill(m.weights, dimension, 1, rng);
    return m;
  }

  std::size_t dimension() const noexcept { return weights.size(); }

  double logit(const SparseVector& x) const { return dot(x, weights) + bias; }
  double forward(const SparseVector& x, Trace&) const { return logit(x); }

  Gradient make_gradient() const { return {}; }

  void backward(const SparseVector& x, const Trace&, double dlogit, Gradient& g) const {
    g.weights.add(x, dlogit);
    g.bias += dlogit;
  }

  bool apply(const Gradient& g, double step) {
    bool finite = g.weights.apply(weights, step);
    bias -= step * g.bias;
    return finite && std::isfinite(bias);
  }

  void scale(double factor) {
    for (auto& w : weights) w *= factor;
    bias *= factor;
  }

  bool finite() const { return all_finite(weights) && std::isfinite(bias); }

  std::vector<NamedArray> arrays() const {
    return {{"w_c", {weights.size()}, weights}, {"bias", {1}, {bias}}};
  }

  static LogisticModel from_arrays(const ArrayMap& arrays) {
    LogisticModel m;
    m.weights = require_array(arrays, "w_c").data;
    const auto& b = require_array(arrays, "bias").data;
    if (b.size() != 1) throw DataError("bias must hold one value");
    m.bias = b[0];
    return m;
  }

  bool operator==(const LogisticModel&) const = default;
};

inline double predict_logit(const LogisticModel& m, const SparseVector& x) { return m.logit(x); }

// ---------------------------------------------------------------------------

class DelayModel {
 public:
  std::vector<double> weights;

  DelayModel() = default;
  explicit DelayModel(std::size_t dimension) : weights(dimension, 0.0) {}

  static DelayModel glorot(std::size_t dimension, std::uint64_t seed) {
    DelayModel m(dimension);
    Rng rng(seed);
    glorot_fill(m.weights, dimension, 1, rng);
    return m;
  }

  // log of the delay rate, w_d . x
  double delay_logit(const SparseVector& x) const { return dot(x, weights); }

  bool apply(const SparseGradient& g, double step) { return g.apply(weights, step); }

  void scale(double factor) {
    for (auto& w : weights) w *= factor;
  }

  bool finite() const { return all_finite(weights); }

  std::vector<NamedArray> arrays() const { return {{"w_d", {weights.size()}, weights}}; }

  static DelayModel from_arrays(const ArrayMap& arrays) {
    DelayModel m;
    m.weights = require_array(arrays, "w_d").data;
    return m;
  }

  bool operator==(const DelayModel&) const = default;
};

// lambda(x) = exp(w_d . x). Exponents beyond the double range saturate at
// the largest finite value with a one-time warning.
inline double predict_delay_rate(const DelayModel& m, const SparseVector& x) {
  static constexpr double kMaxExponent = 709.782712893384;  // log(DBL_MAX)
  const double u = m.delay_logit(x);
  if (u > kMaxExponent) {
    static bool warned = false;
    if (!warned) {
      warned = true;
      std::clog << "fnlab: delay rate exponent " << u << " saturated\n";
    }
    return std::numeric_limits<double>::max();
  }
  return std::exp(u);
}

// ---------------------------------------------------------------------------
// Wide & deep

struct CrossPair {
  std::size_t first = 0;
  std::size_t second = 0;

  bool operator==(const CrossPair&) const = default;
};

// phi(x): one crossed feature per pair of active ids drawn from the two
// fields of each cross pair, valued at the product of the two values. Output
// ids occupy [base, base + cross_dim), disjoint from raw ids when base is
// the raw dimension.
inline SparseVector cross_product_transform(const SparseVector& x, std::span<const CrossPair> cross_spec,
                                            const FeatureLayout& layout, std::size_t cross_dim,
                                            std::size_t base) {
  if (cross_spec.empty()) return {};
  if (cross_dim == 0) throw ConfigError("cross_dim must be positive when crosses are configured");
  std::vector<std::vector<FeatureEntry>> by_field(layout.fields());
  for (const auto& e : x) {
    if (auto f = layout.field_of(e.id)) by_field[*f].push_back(e);
  }
  std::vector<FeatureEntry> out;
  for (std::size_t k = 0; k < cross_spec.size(); ++k) {
    const auto [fa, fb] = cross_spec[k];
    if (fa >= layout.fields() || fb >= layout.fields()) {
      throw ConfigError("cross spec references field outside the layout");
    }
    for (const auto& a : by_field[fa]) {
      for (const auto& b : by_field[fb]) {
        const std::string key = std::to_string(k) + ':' + std::to_string(a.id) + ':' + std::to_string(b.id);
        const auto id = base + fnv1a(key) % cross_dim;
        out.push_back({static_cast<FeatureId>(id), a.value * b.value});
      }
    }
  }
  return SparseVector::canonicalize(std::move(out));
}

struct WideDeepSpec {
  FeatureLayout layout;
  std::vector<CrossPair> cross_spec;
  std::size_t cross_dim = std::size_t{1} << 16;
  std::size_t embedding_dim = 16;
  std::vector<std::size_t> layers = {400, 300, 200, 100};
  double leaky_slope = 0.01;
  Pooling pooling = Pooling::kSum;

  std::size_t dimension() const noexcept { return layout.dimension(); }
  std::size_t wide_dimension() const noexcept { return layout.dimension() + (cross_spec.empty() ? 0 : cross_dim); }
  std::size_t final_width() const noexcept { return layers.empty() ? embedding_dim : layers.back(); }

  bool operator==(const WideDeepSpec&) const = default;
};

struct DenseLayer {
  std::size_t in = 0;
  std::size_t out = 0;
  std::vector<double> weight;  // out x in, row-major
  std::vector<double> bias;

  DenseLayer() = default;
  DenseLayer(std::size_t in_, std::size_t out_) : in(in_), out(out_), weight(in_ * out_, 0.0), bias(out_, 0.0) {}

  bool operator==(const DenseLayer&) const = default;
};

class WideDeepModel {
 public:
  struct Trace {
    SparseVector crossed;
    double pool_scale = 1.0;
    std::vector<std::vector<double>> pre;         // per layer, before activation
    std::vector<std::vector<double>> activation;  // [0] pooled embedding, then per layer
  };

  struct Gradient {
    SparseGradient wide;
    std::vector<FeatureId> embedding_ids;
    std::vector<double> embedding_values;  // embedding_dim per id
    std::vector<DenseLayer> layers;
    std::vector<double> deep_out;
    double bias = 0.0;

    void clear() {
      wide.clear();
      embedding_ids.clear();
      embedding_values.clear();
      for (auto& l : layers) {
        std::fill(l.weight.begin(), l.weight.end(), 0.0);
        std::fill(l.bias.begin(), l.bias.end(), 0.0);
      }
      std::fill(deep_out.begin(), deep_out.end(), 0.0);
      bias = 0.0;
    }
  };

  WideDeepSpec spec;
  std::vector<double> wide;
  std::vector<double> embeddings;  // dimension x embedding_dim
  std::vector<DenseLayer> layers;
  std::vector<double> deep_out;
  double bias = 0.0;

  WideDeepModel() = default;

  // All-zero parameters of the right shapes.
  explicit WideDeepModel(WideDeepSpec s) : spec(std::move(s)) {
    if (spec.embedding_dim == 0) throw ConfigError("embedding_dim must be positive");
    for (auto width : spec.layers) {
      if (width == 0) throw ConfigError("deep layer sizes must be positive");
    }
    for (const auto& c : spec.cross_spec) {
      if (c.first >= spec.layout.fields() || c.second >= spec.layout.fields()) {
        throw ConfigError("cross spec references field outside the layout");
      }
    }
    wide.assign(spec.wide_dimension(), 0.0);
    embeddings.assign(spec.dimension() * spec.embedding_dim, 0.0);
    std::size_t in = spec.embedding_dim;
    for (auto width : spec.layers) {
      layers.emplace_back(in, width);
      in = width;
    }
    deep_out.assign(spec.final_width(), 0.0);
  }

  // Glorot-uniform weights and embeddings, zero biases.
  static WideDeepModel glorot(WideDeepSpec s, std::uint64_t seed) {
    WideDeepModel m(std::move(s));
    Rng rng(seed);
    glorot_fill(m.wide, m.wide.size(), 1, rng);
    glorot_fill(m.embeddings, m.spec.dimension(), m.spec.embedding_dim, rng);
    for (auto& l : m.layers) glorot_fill(l.weight, l.in, l.out, rng);
    glorot_fill(m.deep_out, m.deep_out.size(), 1, rng);
    return m;
  }

  double forward(const SparseVector& x, Trace& t) const {
    const std::size_t emb = spec.embedding_dim;
    t.crossed = cross_product_transform(x, spec.cross_spec, spec.layout, spec.cross_dim, spec.dimension());
    double z = dot(x, wide) + dot(t.crossed, wide) + bias;

    t.activation.resize(layers.size() + 1);
    t.pre.resize(layers.size());
    auto& pooled = t.activation[0];
    pooled.assign(emb, 0.0);
    t.pool_scale = (spec.pooling == Pooling::kMean && !x.empty()) ? 1.0 / static_cast<double>(x.size()) : 1.0;
    for (const auto& e : x) {
      if (e.id >= spec.dimension()) throw IndexError("feature id outside embedding table");
      const double* row = embeddings.data() + std::size_t{e.id} * emb;
      const double s = t.pool_scale * e.value;
      for (std::size_t k = 0; k < emb; ++k) pooled[k] += s * row[k];
    }
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const auto& layer = layers[l];
      const auto& in = t.activation[l];
      auto& pre = t.pre[l];
      auto& act = t.activation[l + 1];
      pre.assign(layer.bias.begin(), layer.bias.end());
      act.resize(layer.out);
      for (std::size_t o = 0; o < layer.out; ++o) {
        const double* w = layer.weight.data() + o * layer.in;
        double s = 0.0;
        for (std::size_t i = 0; i < layer.in; ++i) s += w[i] * in[i];
        pre[o] += s;
        act[o] = leaky_relu(pre[o], spec.leaky_slope);
      }
    }
    const auto& final = t.activation.back();
    for (std::size_t k = 0; k < final.size(); ++k) z += deep_out[k] * final[k];
    return z;
  }

  double logit(const SparseVector& x) const {
    Trace t;
    return forward(x, t);
  }

  Gradient make_gradient() const {
    Gradient g;
    for (const auto& l : layers) g.layers.emplace_back(l.in, l.out);
    g.deep_out.assign(deep_out.size(), 0.0);
    return g;
  }

  void backward(const SparseVector& x, const Trace& t, double dlogit, Gradient& g) const {
    g.bias += dlogit;
    g.wide.add(x, dlogit);
    g.wide.add(t.crossed, dlogit);

    const auto& final = t.activation.back();
    std::vector<double> delta(final.size());
    for (std::size_t k = 0; k < final.size(); ++k) {
      g.deep_out[k] += dlogit * final[k];
      delta[k] = dlogit * deep_out[k];
    }
    for (std::size_t l = layers.size(); l-- > 0;) {
      const auto& layer = layers[l];
      auto& gl = g.layers[l];
      const auto& in = t.activation[l];
      for (std::size_t o = 0; o < layer.out; ++o) delta[o] *= leaky_relu_slope(t.pre[l][o], spec.leaky_slope);
      std::vector<double> next(layer.in, 0.0);
      for (std::size_t o = 0; o < layer.out; ++o) {
        const double d = delta[o];
        if (d == 0.0) continue;
        gl.bias[o] += d;
        double* gw = gl.weight.data() + o * layer.in;
        const double* w = layer.weight.data() + o * layer.in;
        for (std::size_t i = 0; i < layer.in; ++i) {
          gw[i] += d * in[i];
          next[i] += d * w[i];
        }
      }
      delta = std::move(next);
    }
    const std::size_t emb = spec.embedding_dim;
    for (const auto& e : x) {
      g.embedding_ids.push_back(e.id);
      const double s = t.pool_scale * e.value;
      for (std::size_t k = 0; k < emb; ++k) g.embedding_values.push_back(s * delta[k]);
    }
  }

  bool apply(const Gradient& g, double step) {
    bool finite = g.wide.apply(wide, step);
    const std::size_t emb = spec.embedding_dim;
    for (std::size_t r = 0; r < g.embedding_ids.size(); ++r) {
      double* row = embeddings.data() + std::size_t{g.embedding_ids[r]} * emb;
      const double* gr = g.embedding_values.data() + r * emb;
      for (std::size_t k = 0; k < emb; ++k) {
        row[k] -= step * gr[k];
        finite = finite && std::isfinite(row[k]);
      }
    }
    for (std::size_t l = 0; l < layers.size(); ++l) {
      for (std::size_t i = 0; i < layers[l].weight.size(); ++i) layers[l].weight[i] -= step * g.layers[l].weight[i];
      for (std::size_t i = 0; i < layers[l].bias.size(); ++i) layers[l].bias[i] -= step * g.layers[l].bias[i];
      finite = finite && all_finite(layers[l].weight) && all_finite(layers[l].bias);
    }
    for (std::size_t k = 0; k < deep_out.size(); ++k) deep_out[k] -= step * g.deep_out[k];
    bias -= step * g.bias;
    return finite && all_finite(deep_out) && std::isfinite(bias);
  }

  void scale(double factor) {
    for (auto& v : wide) v *= factor;
    for (auto& v : embeddings) v *= factor;
    for (auto& l : layers) {
      for (auto& v : l.weight) v *= factor;
      for (auto& v : l.bias) v *= factor;
    }
    for (auto& v : deep_out) v *= factor;
    bias *= factor;
  }

  bool finite() const {
    for (const auto& l : layers) {
      if (!all_finite(l.weight) || !all_finite(l.bias)) return false;
    }
    return all_finite(wide) && all_finite(embeddings) && all_finite(deep_out) && std::isfinite(bias);
  }

  std::vector<NamedArray> arrays() const {
    std::vector<NamedArray> out;
    out.push_back({"w_wide", {wide.size()}, wide});
    out.push_back({"embeddings", {spec.dimension(), spec.embedding_dim}, embeddings});
    for (std::size_t l = 0; l < layers.size(); ++l) {
      out.push_back({"layer" + std::to_string(l) + ".weight", {layers[l].out, layers[l].in}, layers[l].weight});
      out.push_back({"layer" + std::to_string(l) + ".bias", {layers[l].out}, layers[l].bias});
    }
    out.push_back({"w_deep", {deep_out.size()}, deep_out});
    out.push_back({"bias", {1}, {bias}});
    return out;
  }

  // `s` supplies the architecture; shapes are checked against the arrays.
  static WideDeepModel from_arrays(WideDeepSpec s, const ArrayMap& arrays) {
    WideDeepModel m(std::move(s));
    auto load = [&](const std::string& name, std::vector<double>& dst) {
      const auto& a = require_array(arrays, name);
      if (a.data.size() != dst.size()) throw DataError("array '" + name + "' has the wrong size");
      dst = a.data;
    };
    load("w_wide", m.wide);
    load("embeddings", m.embeddings);
    for (std::size_t l = 0; l < m.layers.size(); ++l) {
      load("layer" + std::to_string(l) + ".weight", m.layers[l].weight);
      load("layer" + std::to_string(l) + ".bias", m.layers[l].bias);
    }
    load("w_deep", m.deep_out);
    std::vector<double> b(1);
    load("bias", b);
    m.bias = b[0];
    return m;
  }

  bool operator==(const WideDeepModel&) const = default;
};

inline double predict_logit(const WideDeepModel& m, const SparseVector& x) { return m.logit(x); }

}  // namespace fnlab
