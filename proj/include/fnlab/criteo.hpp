#pragma once

// Criteo conversion-log ingestion and derivation of the fake-negative
// training set.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fnlab/core.hpp"
#include "fnlab/errors.hpp"
#include "fnlab/io.hpp"
#include "fnlab/stream.hpp"

namespace fnlab {

// Column layout: click time, conversion time, integer features, categorical
// features. Defaults follow the public conversion-logs release.
struct CriteoSchema {
  std::size_t integer_columns = 8;
  std::size_t categorical_columns = 9;

  std::size_t columns() const noexcept { return 2 + integer_columns + categorical_columns; }
  std::size_t fields() const noexcept { return integer_columns + categorical_columns; }
};

struct CriteoRecord {
  double click_time = 0.0;
  std::optional<double> conversion_time;
  std::vector<std::optional<std::int64_t>> integer_features;
  std::vector<std::optional<std::string>> categorical_features;

  bool operator==(const CriteoRecord&) const = default;
};

inline CriteoRecord parse_criteo_line(std::string_view line, std::size_t line_no = 0,
                                      const CriteoSchema& schema = {}) {
  const auto cols = split(line, '\t');
  if (cols.size() != schema.columns()) {
    throw ParseError(line_no, "expected " + std::to_string(schema.columns()) + " columns, got " +
                                  std::to_string(cols.size()));
  }
  CriteoRecord rec;
  auto click = parse_double(cols[0]);
  if (!click) throw ParseError(line_no, "bad click time");
  rec.click_time = *click;
  if (!cols[1].empty()) {
    auto conv = parse_double(cols[1]);
    if (!conv) throw ParseError(line_no, "bad conversion time");
    rec.conversion_time = *conv;
  }
  for (std::size_t i = 0; i < schema.integer_columns; ++i) {
    const auto c = cols[2 + i];
    if (c.empty()) {
      rec.integer_features.emplace_back();
      continue;
    }
    auto v = parse_int<std::int64_t>(c);
    if (!v) throw ParseError(line_no, "bad integer feature '" + std::string(c) + "'");
    rec.integer_features.emplace_back(*v);
  }
  for (std::size_t i = 0; i < schema.categorical_columns; ++i) {
    const auto c = cols[2 + schema.integer_columns + i];
    if (c.empty()) {
      rec.categorical_features.emplace_back();
    } else {
      rec.categorical_features.emplace_back(std::string(c));
    }
  }
  return rec;
}

inline std::string format_criteo_record(const CriteoRecord& rec) {
  std::string out = format_double(rec.click_time);
  out += '\t';
  if (rec.conversion_time) out += format_double(*rec.conversion_time);
  for (const auto& v : rec.integer_features) {
    out += '\t';
    if (v) out += std::to_string(*v);
  }
  for (const auto& v : rec.categorical_features) {
    out += '\t';
    if (v) out += *v;
  }
  return out;
}

inline std::vector<CriteoRecord> read_criteo_file(const std::filesystem::path& path, const CriteoSchema& schema = {}) {
  return read_records<CriteoRecord>(path, [&](std::string_view line, std::size_t no) {
    return parse_criteo_line(line, no, schema);
  });
}

// Integer features are discretized into log2 buckets before hashing.
inline SparseVector criteo_features(const CriteoRecord& rec, const FeatureLayout& layout) {
  std::vector<FeatureEntry> entries;
  std::size_t field = 0;
  for (const auto& v : rec.integer_features) {
    if (v) {
      const std::string token =
          *v < 0 ? "neg" : std::to_string(std::bit_width(static_cast<std::uint64_t>(*v)));
      entries.push_back({hash_feature(layout, field, token), 1.0});
    }
    ++field;
  }
  for (const auto& v : rec.categorical_features) {
    if (v) entries.push_back({hash_feature(layout, field, *v), 1.0});
    ++field;
  }
  return SparseVector::canonicalize(std::move(entries));
}

inline void check_criteo_times(const CriteoRecord& rec, std::size_t index) {
  if (rec.conversion_time && *rec.conversion_time < rec.click_time) {
    throw DataError("record " + std::to_string(index) + ": conversion before click");
  }
}

inline double criteo_snapshot_time(std::span<const CriteoRecord> records) {
  double snapshot = -std::numeric_limits<double>::infinity();
  for (const auto& r : records) snapshot = std::max(snapshot, r.conversion_time.value_or(r.click_time));
  return snapshot;
}

// Fake-negative version of the dataset: every record yields a negative
// emitted at its click time and converting records add a positive emitted at
// conversion time. As in the synthetic stream, elapsed is measured at
// emission (0 for the negative, the delay for the positive). Output is in
// stream order and record indices serve as impression ids.
inline std::vector<StreamEvent> derive_criteo_fn_dataset(std::span<const CriteoRecord> records,
                                                         const FeatureLayout& layout) {
  std::vector<StreamEvent> out;
  out.reserve(records.size() * 2);
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    check_criteo_times(r, i);
    const auto features = criteo_features(r, layout);
    StreamEvent neg;
    neg.emit_time = r.click_time;
    neg.impression_id = i;
    neg.example.features = features;
    neg.example.elapsed = 0.0;
    out.push_back(neg);
    if (r.conversion_time) {
      StreamEvent pos = neg;
      pos.emit_time = *r.conversion_time;
      pos.example.label = 1;
      pos.example.time_to_click = std::max(*r.conversion_time - r.click_time, std::numeric_limits<double>::min());
      pos.example.elapsed = pos.example.time_to_click;
      out.push_back(std::move(pos));
    }
  }
  std::stable_sort(out.begin(), out.end(), stream_order_less);
  return out;
}

// Original labeling: one example per record, positive iff it converted.
inline std::vector<StreamEvent> criteo_snapshot_dataset(std::span<const CriteoRecord> records,
                                                        const FeatureLayout& layout) {
  const double snapshot = criteo_snapshot_time(records);
  std::vector<StreamEvent> out;
  out.reserve(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    check_criteo_times(r, i);
    StreamEvent ev;
    ev.emit_time = r.click_time;
    ev.impression_id = i;
    ev.example.features = criteo_features(r, layout);
    ev.example.elapsed = snapshot - r.click_time;
    if (r.conversion_time) {
      ev.example.label = 1;
      ev.example.time_to_click = std::max(*r.conversion_time - r.click_time, std::numeric_limits<double>::min());
    }
    out.push_back(std::move(ev));
  }
  std::stable_sort(out.begin(), out.end(), stream_order_less);
  return out;
}

}  // namespace fnlab
