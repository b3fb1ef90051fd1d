#pragma once

// Binary checkpoint of named dense arrays. All integers and doubles are
// stored little-endian, so 64-bit values round-trip bit-exactly.
//
//   magic   "FNLABCK1"
//   string  kind ("logistic" | "wide_deep")
//   u64     version, step
//   u32     meta count, then (string key, string value) pairs
//   u32     array count, then per array:
//           string name, u32 rank, u64 dims[rank], u64 n, f64 data[n]
//
// Strings are a u32 byte length followed by the bytes.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fnlab/errors.hpp"
#include "fnlab/models.hpp"
#include "fnlab/trainer.hpp"

namespace fnlab {

inline constexpr char kCheckpointMagic[8] = {'F', 'N', 'L', 'A', 'B', 'C', 'K', '1'};

struct Checkpoint {
  std::string kind;
  std::uint64_t version = 0;
  std::uint64_t step = 0;
  std::map<std::string, std::string> meta;
  std::vector<NamedArray> arrays;

  ArrayMap array_map() const {
    ArrayMap m;
    for (const auto& a : arrays) m.emplace(a.name, a);
    return m;
  }

  bool operator==(const Checkpoint&) const = default;
};

namespace detail {

class ByteWriter {
 public:
  void u32(std::uint32_t v) { put(v, 4); }
  void u64(std::uint64_t v) { put(v, 8); }
  void f64(double v) { put(std::bit_cast<std::uint64_t>(v), 8); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes_.append(s);
  }
  const std::string& bytes() const noexcept { return bytes_; }

 private:
  void put(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) bytes_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  std::string bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string bytes) : bytes_(std::move(bytes)) {}

  std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
  std::uint64_t u64() { return get(8); }
  double f64() { return std::bit_cast<double>(get(8)); }
  std::string str() {
    const auto n = u32();
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::string raw(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const noexcept { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw DataError("truncated checkpoint");
  }
  std::uint64_t get(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= std::uint64_t{static_cast<unsigned char>(bytes_[pos_ + i])} << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  std::string bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode_checkpoint(const Checkpoint& c) {
  detail::ByteWriter w;
  std::string out(kCheckpointMagic, sizeof kCheckpointMagic);
  w.str(c.kind);
  w.u64(c.version);
  w.u64(c.step);
  w.u32(static_cast<std::uint32_t>(c.meta.size()));
  for (const auto& [k, v] : c.meta) {
    w.str(k);
    w.str(v);
  }
  w.u32(static_cast<std::uint32_t>(c.arrays.size()));
  for (const auto& a : c.arrays) {
    w.str(a.name);
    w.u32(static_cast<std::uint32_t>(a.shape.size()));
    for (auto d : a.shape) w.u64(d);
    w.u64(a.data.size());
    for (double v : a.data) w.f64(v);
  }
  return out + w.bytes();
}

inline Checkpoint decode_checkpoint(std::string bytes) {
  detail::ByteReader r(std::move(bytes));
  if (r.raw(sizeof kCheckpointMagic) != std::string(kCheckpointMagic, sizeof kCheckpointMagic)) {
    throw DataError("not a checkpoint (bad magic)");
  }
  Checkpoint c;
  c.kind = r.str();
  c.version = r.u64();
  c.step = r.u64();
  const auto n_meta = r.u32();
  for (std::uint32_t i = 0; i < n_meta; ++i) {
    auto k = r.str();
    c.meta[k] = r.str();
  }
  const auto n_arrays = r.u32();
  for (std::uint32_t i = 0; i < n_arrays; ++i) {
    NamedArray a;
    a.name = r.str();
    const auto rank = r.u32();
    for (std::uint32_t d = 0; d < rank; ++d) a.shape.push_back(r.u64());
    const auto n = r.u64();
    a.data.reserve(n);
    for (std::uint64_t k = 0; k < n; ++k) a.data.push_back(r.f64());
    c.arrays.push_back(std::move(a));
  }
  if (!r.done()) throw DataError("trailing bytes in checkpoint");
  return c;
}

inline void write_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  const auto bytes = encode_checkpoint(c);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return decode_checkpoint(std::move(bytes));
}

// ---------------------------------------------------------------------------
// Model <-> checkpoint

inline nlohmann::json spec_to_json(const WideDeepSpec& s) {
  nlohmann::json crosses = nlohmann::json::array();
  for (const auto& c : s.cross_spec) crosses.push_back({c.first, c.second});
  return {{"field_offsets", std::vector<std::size_t>(s.layout.offsets().begin(), s.layout.offsets().end())},
          {"dimension", s.layout.dimension()},
          {"cross_spec", crosses},
          {"cross_dim", s.cross_dim},
          {"embedding_dim", s.embedding_dim},
          {"layers", s.layers},
          {"leaky_slope", s.leaky_slope},
          {"pooling", s.pooling == Pooling::kMean ? "mean" : "sum"}};
}

inline FeatureLayout layout_from_offsets(const std::vector<std::size_t>& offsets, std::size_t dimension) {
  std::vector<std::size_t> sizes;
  for (std::size_t i = 0; i < offsets.size(); ++i) {
    const std::size_t end = i + 1 < offsets.size() ? offsets[i + 1] : dimension;
    if (end <= offsets[i]) throw DataError("field offsets must be increasing");
    sizes.push_back(end - offsets[i]);
  }
  if (!offsets.empty() && offsets[0] != 0) throw DataError("first field offset must be 0");
  return FeatureLayout::from_cardinalities(sizes);
}

inline WideDeepSpec spec_from_json(const nlohmann::json& j) {
  WideDeepSpec s;
  s.layout = layout_from_offsets(j.at("field_offsets").get<std::vector<std::size_t>>(), j.at("dimension").get<std::size_t>());
  for (const auto& c : j.at("cross_spec")) s.cross_spec.push_back({c.at(0).get<std::size_t>(), c.at(1).get<std::size_t>()});
  s.cross_dim = j.at("cross_dim").get<std::size_t>();
  s.embedding_dim = j.at("embedding_dim").get<std::size_t>();
  s.layers = j.at("layers").get<std::vector<std::size_t>>();
  s.leaky_slope = j.at("leaky_slope").get<double>();
  s.pooling = j.at("pooling").get<std::string>() == "mean" ? Pooling::kMean : Pooling::kSum;
  return s;
}

inline std::string model_kind_name(const LogisticModel&) { return "logistic"; }
inline std::string model_kind_name(const WideDeepModel&) { return "wide_deep"; }

template <typename Model>
Checkpoint to_checkpoint(const ModelBundle<Model>& b, std::uint64_t version, std::uint64_t step) {
  Checkpoint c;
  c.kind = model_kind_name(b.ctr);
  c.version = version;
  c.step = step;
  c.meta["fn_calibrated"] = b.fn_calibrated ? "1" : "0";
  if constexpr (std::is_same_v<Model, WideDeepModel>) c.meta["spec"] = spec_to_json(b.ctr.spec).dump();
  c.arrays = b.ctr.arrays();
  if (b.delay) {
    for (auto a : b.delay->arrays()) {
      a.name = "delay." + a.name;
      c.arrays.push_back(std::move(a));
    }
  }
  return c;
}

template <typename Model>
Checkpoint to_checkpoint(const Snapshot<Model>& s) {
  return to_checkpoint(s.params(), s.version(), s.step());
}

template <typename Model>
ModelBundle<Model> bundle_from_checkpoint(const Checkpoint& c) {
  ModelBundle<Model> b;
  const auto arrays = c.array_map();
  if constexpr (std::is_same_v<Model, WideDeepModel>) {
    if (c.kind != "wide_deep") throw DataError("checkpoint holds a " + c.kind + " model");
    auto it = c.meta.find("spec");
    if (it == c.meta.end()) throw DataError("wide_deep checkpoint without spec");
    b.ctr = WideDeepModel::from_arrays(spec_from_json(nlohmann::json::parse(it->second)), arrays);
  } else {
    if (c.kind != "logistic") throw DataError("checkpoint holds a " + c.kind + " model");
    b.ctr = LogisticModel::from_arrays(arrays);
  }
  ArrayMap delay_arrays;
  for (const auto& [name, a] : arrays) {
    if (name.starts_with("delay.")) {
      auto copy = a;
      copy.name = name.substr(6);
      delay_arrays.emplace(copy.name, std::move(copy));
    }
  }
  if (!delay_arrays.empty()) b.delay = DelayModel::from_arrays(delay_arrays);
  auto cal = c.meta.find("fn_calibrated");
  b.fn_calibrated = cal != c.meta.end() && cal->second == "1";
  return b;
}

}  // namespace fnlab
