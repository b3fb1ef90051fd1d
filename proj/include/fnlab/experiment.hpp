#pragma once

// Experiment driver behind the fnlab command line: declarative configs,
// synthetic data generation, training runs, evaluation and reporting.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <future>
#include <iomanip>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "fnlab/checkpoint.hpp"
#include "fnlab/core.hpp"
#include "fnlab/criteo.hpp"
#include "fnlab/errors.hpp"
#include "fnlab/eval.hpp"
#include "fnlab/io.hpp"
#include "fnlab/losses.hpp"
#include "fnlab/models.hpp"
#include "fnlab/stream.hpp"
#include "fnlab/trainer.hpp"

namespace fnlab {

inline constexpr const char* kVersion = "0.3.0";

namespace exit_code {
inline constexpr int kOk = 0;
inline constexpr int kFailure = 1;
inline constexpr int kConfig = 2;
inline constexpr int kData = 3;
inline constexpr int kDivergence = 4;
}  // namespace exit_code

inline int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const DivergenceError*>(&e)) return exit_code::kDivergence;
  if (dynamic_cast<const ConfigError*>(&e)) return exit_code::kConfig;
  if (dynamic_cast<const DataError*>(&e) || dynamic_cast<const IoError*>(&e)) return exit_code::kData;
  return exit_code::kFailure;
}

using Json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Configuration

struct SyntheticSpec {
  std::vector<std::size_t> fields = {4};
  // Per-field, per-category contributions to the CTR logit and to the log
  // delay rate. When absent they are drawn around base/num_fields.
  std::vector<std::vector<double>> ctr_logits;
  std::vector<std::vector<double>> delay_log_rates;
  double ctr_base = -2.0;
  double ctr_spread = 0.5;
  double delay_base = -7.5;  // log(1 / 1800 s)
  double delay_spread = 0.5;
  std::size_t n_train = 100000;
  std::size_t n_eval = 20000;
  double horizon = 86400.0;
  double eval_horizon = 86400.0;
};

struct DataSpec {
  std::string source = "synthetic";  // synthetic | files | criteo
  std::string dir = "data";
  // stream (fake negatives) | snapshot | auto (snapshot for delayed_feedback,
  // stream otherwise)
  std::string train = "auto";
  std::string criteo_train;
  std::string criteo_eval;
  CriteoSchema criteo_schema;
};

struct EvalSpec {
  double window = kAttributionWindow;
  std::optional<double> snapshot_time;
  double downsample_rate = 1.0;
  std::size_t bins = 20;
  std::string snapshots = "last";  // last | all
};

struct ExperimentConfig {
  std::string name = "run";
  std::uint64_t seed = 0;
  std::string model = "logistic";  // logistic | wide_deep
  std::string loss = "log";
  std::string mode = "continuous";  // offline | continuous
  std::size_t epochs = 1;
  std::size_t snapshot_every = 100;
  Hyperparams hyper;
  std::size_t dimension = kDefaultDimension;
  std::vector<CrossPair> cross;
  std::size_t cross_dim = std::size_t{1} << 16;
  DataSpec data;
  std::optional<SyntheticSpec> synthetic;
  EvalSpec eval;

  void validate() const {
    if (model != "logistic" && model != "wide_deep") throw ConfigError("unknown model '" + model + "'");
    (void)parse_loss(loss);
    if (mode != "offline" && mode != "continuous") throw ConfigError("unknown mode '" + mode + "'");
    if (snapshot_every == 0) throw ConfigError("snapshot_every must be positive");
    if (data.source != "synthetic" && data.source != "files" && data.source != "criteo") {
      throw ConfigError("unknown data source '" + data.source + "'");
    }
    if (data.train != "stream" && data.train != "snapshot" && data.train != "auto") {
      throw ConfigError("data.train must be stream, snapshot or auto");
    }
    if (eval.snapshots != "last" && eval.snapshots != "all") throw ConfigError("eval.snapshots must be last or all");
    if (eval.bins == 0) throw ConfigError("eval.bins must be positive");
    if (!(eval.downsample_rate > 0.0 && eval.downsample_rate <= 1.0)) throw ConfigError("eval.downsample_rate must be in (0, 1]");
    if (dimension == 0) throw ConfigError("dimension must be positive");
    hyper.validate();
  }
};

namespace detail {

inline void check_keys(const Json& j, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [k, v] : j.items()) {
    if (!ok.contains(k)) throw ConfigError("unknown key '" + k + "' in " + where);
  }
}

template <typename T>
void read_key(const Json& j, const char* key, T& dst) {
  if (!j.contains(key)) return;
  try {
    dst = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad value for '") + key + "': " + e.what());
  }
}

}  // namespace detail

inline ExperimentConfig config_from_json(const Json& j) {
  using detail::read_key;
  detail::check_keys(j, "config", {"name", "seed", "model", "loss", "mode", "epochs", "snapshot_every", "hyper",
                                   "features", "data", "synthetic", "eval"});
  ExperimentConfig c;
  read_key(j, "name", c.name);
  read_key(j, "seed", c.seed);
  read_key(j, "model", c.model);
  read_key(j, "loss", c.loss);
  read_key(j, "mode", c.mode);
  read_key(j, "epochs", c.epochs);
  read_key(j, "snapshot_every", c.snapshot_every);
  if (j.contains("hyper")) {
    const auto& h = j["hyper"];
    detail::check_keys(h, "hyper", {"learning_rate", "decay", "batch_size", "df_learning_rate", "df_l2_alpha",
                                    "deep_layers", "negative_downsample_rate", "embedding_dim", "leaky_slope",
                                    "pooling", "pu_clamp_risk"});
    read_key(h, "learning_rate", c.hyper.learning_rate);
    read_key(h, "decay", c.hyper.decay);
    read_key(h, "batch_size", c.hyper.batch_size);
    read_key(h, "df_learning_rate", c.hyper.df_learning_rate);
    read_key(h, "df_l2_alpha", c.hyper.df_l2_alpha);
    read_key(h, "deep_layers", c.hyper.deep_layers);
    read_key(h, "negative_downsample_rate", c.hyper.negative_downsample_rate);
    read_key(h, "embedding_dim", c.hyper.embedding_dim);
    read_key(h, "leaky_slope", c.hyper.leaky_slope);
    read_key(h, "pu_clamp_risk", c.hyper.pu_clamp_risk);
    std::string pooling = "sum";
    read_key(h, "pooling", pooling);
    if (pooling != "sum" && pooling != "mean") throw ConfigError("pooling must be sum or mean");
    c.hyper.pooling = pooling == "mean" ? Pooling::kMean : Pooling::kSum;
  }
  if (j.contains("features")) {
    const auto& f = j["features"];
    detail::check_keys(f, "features", {"dimension", "cross", "cross_dim"});
    read_key(f, "dimension", c.dimension);
    read_key(f, "cross_dim", c.cross_dim);
    std::vector<std::vector<std::size_t>> cross;
    read_key(f, "cross", cross);
    for (const auto& p : cross) {
      if (p.size() != 2) throw ConfigError("cross entries must be field pairs");
      c.cross.push_back({p[0], p[1]});
    }
  }
  if (j.contains("data")) {
    const auto& d = j["data"];
    detail::check_keys(d, "data", {"source", "dir", "train", "criteo_train", "criteo_eval", "criteo_integer_columns",
                                   "criteo_categorical_columns"});
    read_key(d, "source", c.data.source);
    read_key(d, "dir", c.data.dir);
    read_key(d, "train", c.data.train);
    read_key(d, "criteo_train", c.data.criteo_train);
    read_key(d, "criteo_eval", c.data.criteo_eval);
    read_key(d, "criteo_integer_columns", c.data.criteo_schema.integer_columns);
    read_key(d, "criteo_categorical_columns", c.data.criteo_schema.categorical_columns);
  }
  if (j.contains("synthetic")) {
    const auto& s = j["synthetic"];
    detail::check_keys(s, "synthetic", {"fields", "ctr_logits", "delay_log_rates", "ctr_base", "ctr_spread",
                                        "delay_base", "delay_spread", "n_train", "n_eval", "horizon", "eval_horizon"});
    SyntheticSpec spec;
    read_key(s, "fields", spec.fields);
    read_key(s, "ctr_logits", spec.ctr_logits);
    read_key(s, "delay_log_rates", spec.delay_log_rates);
    read_key(s, "ctr_base", spec.ctr_base);
    read_key(s, "ctr_spread", spec.ctr_spread);
    read_key(s, "delay_base", spec.delay_base);
    read_key(s, "delay_spread", spec.delay_spread);
    read_key(s, "n_train", spec.n_train);
    read_key(s, "n_eval", spec.n_eval);
    read_key(s, "horizon", spec.horizon);
    read_key(s, "eval_horizon", spec.eval_horizon);
    c.synthetic = spec;
  }
  if (j.contains("eval")) {
    const auto& e = j["eval"];
    detail::check_keys(e, "eval", {"window", "snapshot_time", "downsample_rate", "bins", "snapshots"});
    read_key(e, "window", c.eval.window);
    if (e.contains("snapshot_time") && !e["snapshot_time"].is_null()) c.eval.snapshot_time = e["snapshot_time"].get<double>();
    read_key(e, "downsample_rate", c.eval.downsample_rate);
    read_key(e, "bins", c.eval.bins);
    read_key(e, "snapshots", c.eval.snapshots);
  }
  c.hyper.seed = c.seed;
  return c;
}

inline Json config_to_json(const ExperimentConfig& c) {
  Json j;
  j["name"] = c.name;
  j["seed"] = c.seed;
  j["model"] = c.model;
  j["loss"] = c.loss;
  j["mode"] = c.mode;
  j["epochs"] = c.epochs;
  j["snapshot_every"] = c.snapshot_every;
  j["hyper"] = {{"learning_rate", c.hyper.learning_rate},
                {"decay", c.hyper.decay},
                {"batch_size", c.hyper.batch_size},
                {"df_learning_rate", c.hyper.df_learning_rate},
                {"df_l2_alpha", c.hyper.df_l2_alpha},
                {"deep_layers", c.hyper.deep_layers},
                {"negative_downsample_rate", c.hyper.negative_downsample_rate},
                {"embedding_dim", c.hyper.embedding_dim},
                {"leaky_slope", c.hyper.leaky_slope},
                {"pooling", c.hyper.pooling == Pooling::kMean ? "mean" : "sum"},
                {"pu_clamp_risk", c.hyper.pu_clamp_risk}};
  Json cross = Json::array();
  for (const auto& p : c.cross) cross.push_back({p.first, p.second});
  j["features"] = {{"dimension", c.dimension}, {"cross", cross}, {"cross_dim", c.cross_dim}};
  j["data"] = {{"source", c.data.source},
               {"dir", c.data.dir},
               {"train", c.data.train},
               {"criteo_train", c.data.criteo_train},
               {"criteo_eval", c.data.criteo_eval},
               {"criteo_integer_columns", c.data.criteo_schema.integer_columns},
               {"criteo_categorical_columns", c.data.criteo_schema.categorical_columns}};
  if (c.synthetic) {
    const auto& s = *c.synthetic;
    j["synthetic"] = {{"fields", s.fields},
                      {"ctr_logits", s.ctr_logits},
                      {"delay_log_rates", s.delay_log_rates},
                      {"ctr_base", s.ctr_base},
                      {"ctr_spread", s.ctr_spread},
                      {"delay_base", s.delay_base},
                      {"delay_spread", s.delay_spread},
                      {"n_train", s.n_train},
                      {"n_eval", s.n_eval},
                      {"horizon", s.horizon},
                      {"eval_horizon", s.eval_horizon}};
  }
  j["eval"] = {{"window", c.eval.window},
               {"snapshot_time", c.eval.snapshot_time ? Json(*c.eval.snapshot_time) : Json()},
               {"downsample_rate", c.eval.downsample_rate},
               {"bins", c.eval.bins},
               {"snapshots", c.eval.snapshots}};
  return j;
}

// A run manifest embeds its config under "config"; either form is accepted.
inline ExperimentConfig load_config(const std::filesystem::path& path) {
  Json j;
  try {
    j = Json::parse(read_text_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("cannot parse " + path.string() + ": " + e.what());
  } catch (const IoError& e) {
    throw ConfigError(e.what());
  }
  if (j.contains("config") && j["config"].is_object()) return config_from_json(j["config"]);
  return config_from_json(j);
}

// Overrides from the command line or the environment; unset fields leave the
// config untouched.
struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> loss;
  std::optional<std::string> model;
  std::optional<std::string> mode;
  std::optional<std::string> out;

  void apply(ExperimentConfig& c) const {
    if (seed) {
      c.seed = *seed;
      c.hyper.seed = *seed;
    }
    if (loss) c.loss = *loss;
    if (model) c.model = *model;
    if (mode) c.mode = *mode;
  }
};

// FNLAB_SEED, FNLAB_LOSS, FNLAB_MODEL, FNLAB_MODE, FNLAB_OUT
inline Overrides env_overrides() {
  Overrides o;
  auto get = [](const char* name) -> std::optional<std::string> {
    const char* v = std::getenv(name);
    if (v == nullptr || *v == '\0') return std::nullopt;
    return std::string(v);
  };
  if (auto s = get("FNLAB_SEED")) {
    auto v = parse_int<std::uint64_t>(*s);
    if (!v) throw ConfigError("FNLAB_SEED is not an unsigned integer");
    o.seed = *v;
  }
  o.loss = get("FNLAB_LOSS");
  o.model = get("FNLAB_MODEL");
  o.mode = get("FNLAB_MODE");
  o.out = get("FNLAB_OUT");
  return o;
}

// ---------------------------------------------------------------------------
// Synthetic data

inline GroundTruth make_ground_truth(const SyntheticSpec& s, std::uint64_t seed) {
  GroundTruth gt;
  gt.feature_gen.cardinalities = s.fields;
  gt.horizon = s.horizon;
  const auto layout = gt.feature_gen.layout();
  gt.w_star.assign(layout.dimension(), 0.0);
  gt.w_d_star.assign(layout.dimension(), 0.0);
  Rng rng(derive_seed(seed, seed_tag::kGroundTruth));
  const double n_fields = static_cast<double>(s.fields.size());
  auto fill = [&](std::vector<double>& w, const std::vector<std::vector<double>>& explicit_values, double base,
                  double spread, const char* what) {
    if (!explicit_values.empty() && explicit_values.size() != s.fields.size()) {
      throw ConfigError(std::string(what) + " needs one list per field");
    }
    for (std::size_t f = 0; f < s.fields.size(); ++f) {
      for (std::size_t c = 0; c < s.fields[f]; ++c) {
        double v;
        if (!explicit_values.empty()) {
          if (explicit_values[f].size() != s.fields[f]) throw ConfigError(std::string(what) + " size mismatch");
          v = explicit_values[f][c];
        } else {
          v = base / n_fields + spread * rng.normal();
        }
        w[layout.offset(f) + c] = v;
      }
    }
  };
  fill(gt.w_star, s.ctr_logits, s.ctr_base, s.ctr_spread, "ctr_logits");
  fill(gt.w_d_star, s.delay_log_rates, s.delay_base, s.delay_spread, "delay_log_rates");
  return gt;
}

inline Json ground_truth_to_json(const GroundTruth& gt) {
  return {{"fields", gt.feature_gen.cardinalities},
          {"w_star", gt.w_star},
          {"w_d_star", gt.w_d_star},
          {"horizon", gt.horizon},
          {"start_time", gt.start_time}};
}

inline GroundTruth ground_truth_from_json(const Json& j) {
  GroundTruth gt;
  gt.feature_gen.cardinalities = j.at("fields").get<std::vector<std::size_t>>();
  gt.w_star = j.at("w_star").get<std::vector<double>>();
  gt.w_d_star = j.at("w_d_star").get<std::vector<double>>();
  gt.horizon = j.at("horizon").get<double>();
  gt.start_time = j.at("start_time").get<double>();
  return gt;
}

inline Json layout_to_json(const FeatureLayout& l) {
  return {{"field_offsets", std::vector<std::size_t>(l.offsets().begin(), l.offsets().end())}, {"dimension", l.dimension()}};
}

struct GeneratedData {
  GroundTruth truth;
  std::vector<ImpressionEvent> train_impressions;
  std::vector<ImpressionEvent> eval_impressions;
  std::vector<StreamEvent> stream;
  std::vector<StreamEvent> train_snapshot;
  std::vector<TrainingExample> eval;
};

inline GeneratedData generate_data(const ExperimentConfig& c) {
  if (!c.synthetic) throw ConfigError("gen-data needs a 'synthetic' section");
  const auto& s = *c.synthetic;
  GeneratedData d;
  d.truth = make_ground_truth(s, c.seed);
  d.train_impressions = gen_synthetic(d.truth, s.n_train, derive_seed(c.seed, seed_tag::kTrainImpressions));
  const double train_end = d.truth.start_time + d.truth.horizon;
  // Engagements landing after the training period belong to the next one.
  d.stream = to_fake_negative_stream(d.train_impressions);
  std::erase_if(d.stream, [&](const StreamEvent& ev) { return ev.emit_time > train_end; });

  const auto labeled = snapshot_label(d.train_impressions, train_end, c.eval.window);
  for (std::size_t i = 0; i < labeled.size(); ++i) {
    d.train_snapshot.push_back({d.train_impressions[i].impression_time, labeled[i], d.train_impressions[i].impression_id});
  }

  GroundTruth eval_truth = d.truth;
  eval_truth.start_time = train_end;
  eval_truth.horizon = s.eval_horizon;
  d.eval_impressions = gen_synthetic(eval_truth, s.n_eval, derive_seed(c.seed, seed_tag::kEvalImpressions), s.n_train);
  const double eval_snapshot = c.eval.snapshot_time.value_or(train_end + s.eval_horizon + c.eval.window);
  d.eval = downsample_all(snapshot_label(d.eval_impressions, eval_snapshot, c.eval.window), c.eval.downsample_rate,
                          derive_seed(c.seed, seed_tag::kEvalDownsample));
  return d;
}

namespace files {
inline constexpr const char* kImpressions = "impressions.tsv";
inline constexpr const char* kEvalImpressions = "eval_impressions.tsv";
inline constexpr const char* kStream = "stream.tsv";
inline constexpr const char* kTrainSnapshot = "train_snapshot.tsv";
inline constexpr const char* kEval = "eval.tsv";
inline constexpr const char* kGroundTruth = "ground_truth.json";
inline constexpr const char* kLayout = "layout.json";
inline constexpr const char* kManifest = "manifest.json";
inline constexpr const char* kTrace = "trace.csv";
inline constexpr const char* kDivergence = "divergence.json";
inline constexpr const char* kMetrics = "metrics.jsonl";
inline constexpr const char* kSummary = "summary.csv";
inline constexpr const char* kPatternCalibration = "calibration_by_pattern.csv";
inline std::string snapshot(std::uint64_t version) { return "snapshot_" + std::to_string(version) + ".ckpt"; }
}  // namespace files

inline void ensure_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec || !std::filesystem::is_directory(dir)) throw IoError("cannot create directory " + dir.string());
}

// Writes impressions, the fake-negative stream, snapshot-labeled train and
// eval sets and the ground-truth manifest into `out`.
inline void cmd_gen_data(const ExperimentConfig& c, const std::filesystem::path& out) {
  c.validate();
  const auto d = generate_data(c);
  ensure_dir(out);
  write_records(out / files::kImpressions, d.train_impressions, format_impression);
  write_records(out / files::kEvalImpressions, d.eval_impressions, format_impression);
  write_records(out / files::kStream, d.stream, format_stream_event);
  write_records(out / files::kTrainSnapshot, d.train_snapshot, format_stream_event);
  write_records(out / files::kEval, d.eval, format_example);
  write_text_file(out / files::kGroundTruth, ground_truth_to_json(d.truth).dump(1) + "\n");
  write_text_file(out / files::kLayout, layout_to_json(d.truth.feature_gen.layout()).dump(1) + "\n");
}

// ---------------------------------------------------------------------------
// Training

inline Json read_json_file(const std::filesystem::path& path) {
  try {
    return Json::parse(read_text_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw DataError("cannot parse " + path.string() + ": " + e.what());
  }
}

inline FeatureLayout resolve_layout(const ExperimentConfig& c) {
  if (c.data.source == "criteo") return FeatureLayout::uniform(c.data.criteo_schema.fields(), c.dimension);
  const auto path = std::filesystem::path(c.data.dir) / files::kLayout;
  if (!std::filesystem::exists(path)) throw ConfigError("missing " + path.string() + " (run gen-data first)");
  const auto j = read_json_file(path);
  return layout_from_offsets(j.at("field_offsets").get<std::vector<std::size_t>>(), j.at("dimension").get<std::size_t>());
}

inline bool trains_on_stream(const ExperimentConfig& c) {
  if (c.data.train == "auto") return training_loss(parse_loss(c.loss)) != LossKind::kDelayedFeedback;
  return c.data.train == "stream";
}

inline std::vector<StreamEvent> load_training_events(const ExperimentConfig& c, const FeatureLayout& layout) {
  const bool stream = trains_on_stream(c);
  if (c.data.source == "criteo") {
    if (c.data.criteo_train.empty()) throw ConfigError("data.criteo_train is required for criteo input");
    const auto records = read_criteo_file(c.data.criteo_train, c.data.criteo_schema);
    return stream ? derive_criteo_fn_dataset(records, layout) : criteo_snapshot_dataset(records, layout);
  }
  const auto path = std::filesystem::path(c.data.dir) / (stream ? files::kStream : files::kTrainSnapshot);
  if (!std::filesystem::exists(path)) throw ConfigError("missing training data " + path.string());
  return read_records<StreamEvent>(path, parse_stream_event);
}

inline std::vector<TrainingExample> load_eval_examples(const ExperimentConfig& c, const FeatureLayout& layout) {
  if (c.data.source == "criteo") {
    if (c.data.criteo_eval.empty()) throw ConfigError("data.criteo_eval is required for criteo evaluation");
    const auto records = read_criteo_file(c.data.criteo_eval, c.data.criteo_schema);
    std::vector<TrainingExample> out;
    for (auto& ev : criteo_snapshot_dataset(records, layout)) out.push_back(std::move(ev.example));
    return out;
  }
  const auto path = std::filesystem::path(c.data.dir) / files::kEval;
  if (!std::filesystem::exists(path)) throw ConfigError("missing evaluation data " + path.string());
  return read_records<TrainingExample>(path, parse_example);
}

inline WideDeepSpec wide_deep_spec(const ExperimentConfig& c, const FeatureLayout& layout) {
  WideDeepSpec s;
  s.layout = layout;
  s.cross_spec = c.cross;
  s.cross_dim = c.cross_dim;
  s.embedding_dim = c.hyper.embedding_dim;
  s.layers = c.hyper.deep_layers;
  s.leaky_slope = c.hyper.leaky_slope;
  s.pooling = c.hyper.pooling;
  return s;
}

struct RunSummary {
  std::uint64_t steps = 0;
  std::vector<std::uint64_t> snapshot_versions;
};

namespace detail {

template <typename Model>
RunSummary run_training(const ExperimentConfig& c, Model model, std::size_t dimension, std::vector<StreamEvent> events,
                        const std::filesystem::path& out) {
  const LossKind loss = parse_loss(c.loss);
  auto state = make_trainer(std::move(model), loss, c.hyper, dimension);
  RunSummary summary;
  std::vector<Snapshot<Model>> snapshots;

  auto write_trace = [&] {
    std::string trace = "step,loss\n";
    for (std::size_t i = 0; i < state.loss_trace.size(); ++i) {
      trace += std::to_string(i + 1) + ',' + format_double(state.loss_trace[i]) + '\n';
    }
    write_text_file(out / files::kTrace, trace);
  };

  try {
    if (c.mode == "offline") {
      std::vector<TrainingExample> examples;
      examples.reserve(events.size());
      for (auto& ev : events) examples.push_back(std::move(ev.example));
      if (examples.empty()) throw DataError("no training examples");
      train_offline(state, examples, c.epochs);
      snapshots.push_back(take_snapshot(state));
    } else {
      snapshots = train_continuous(state, events, c.snapshot_every);
      if (snapshots.empty() || snapshots.back().step() != state.step) snapshots.push_back(take_snapshot(state));
    }
  } catch (const DivergenceError& e) {
    write_trace();
    write_text_file(out / files::kDivergence,
                    Json{{"step", e.step()}, {"message", e.what()}, {"loss", c.loss}}.dump(1) + "\n");
    throw;
  }
  for (const auto& s : snapshots) {
    write_checkpoint(out / files::snapshot(s.version()), to_checkpoint(s));
    summary.snapshot_versions.push_back(s.version());
  }
  write_trace();
  summary.steps = state.step;
  return summary;
}

}  // namespace detail

// Trains according to `c` and writes snapshots, trace and manifest into
// `out`. Divergence leaves a divergence.json behind and rethrows.
inline RunSummary cmd_train(const ExperimentConfig& c, const std::filesystem::path& out) {
  c.validate();
  const LossKind loss = parse_loss(c.loss);
  if (training_loss(loss) == LossKind::kDelayedFeedback && trains_on_stream(c)) {
    throw ConfigError("delayed_feedback needs snapshot-labeled training data (data.train = snapshot)");
  }
  const auto layout = resolve_layout(c);
  auto events = load_training_events(c, layout);
  events = downsample_negatives(std::move(events), c.hyper.negative_downsample_rate,
                                derive_seed(c.seed, seed_tag::kDownsample));
  ensure_dir(out);
  std::filesystem::remove(out / files::kDivergence);

  const std::size_t n_examples = events.size();
  const std::uint64_t init_seed = derive_seed(c.seed, seed_tag::kInit);
  RunSummary summary;
  if (c.model == "logistic") {
    summary = detail::run_training(c, LogisticModel::glorot(layout.dimension(), init_seed), layout.dimension(),
                                   std::move(events), out);
  } else {
    summary = detail::run_training(c, WideDeepModel::glorot(wide_deep_spec(c, layout), init_seed), layout.dimension(),
                                   std::move(events), out);
  }

  Json snaps = Json::array();
  for (auto v : summary.snapshot_versions) snaps.push_back({{"version", v}, {"file", files::snapshot(v)}});
  Json manifest;
  manifest["fnlab_version"] = kVersion;
  manifest["name"] = c.name;
  manifest["seed"] = c.seed;
  manifest["model"] = c.model;
  manifest["loss"] = c.loss;
  manifest["mode"] = c.mode;
  manifest["training_examples"] = n_examples;
  manifest["steps"] = summary.steps;
  manifest["snapshots"] = std::move(snaps);
  manifest["config"] = config_to_json(c);
  write_text_file(out / files::kManifest, manifest.dump(1) + "\n");
  return summary;
}

// ---------------------------------------------------------------------------
// Evaluation

struct LoadedSnapshot {
  std::string run_name;
  std::string model_kind;
  std::string loss;
  std::uint64_t version = 0;
  std::uint64_t step = 0;
  std::variant<ModelBundle<LogisticModel>, ModelBundle<WideDeepModel>> bundle;

  double probability(const SparseVector& x) const {
    return std::visit([&](const auto& b) { return b.probability(x); }, bundle);
  }
};

inline std::vector<LoadedSnapshot> load_run(const std::filesystem::path& run_dir, const std::string& which) {
  const auto manifest_path = run_dir / files::kManifest;
  if (!std::filesystem::exists(manifest_path)) throw ConfigError("no manifest in " + run_dir.string());
  const auto m = read_json_file(manifest_path);
  std::vector<std::uint64_t> versions;
  for (const auto& s : m.at("snapshots")) versions.push_back(s.at("version").get<std::uint64_t>());
  if (versions.empty()) throw DataError("run " + run_dir.string() + " has no snapshots");
  if (which == "last") versions = {versions.back()};
  std::vector<LoadedSnapshot> out;
  for (auto v : versions) {
    const auto ckpt = read_checkpoint(run_dir / files::snapshot(v));
    LoadedSnapshot s;
    s.run_name = m.at("name").get<std::string>();
    s.model_kind = ckpt.kind;
    s.loss = m.at("loss").get<std::string>();
    s.version = ckpt.version;
    s.step = ckpt.step;
    if (ckpt.kind == "logistic") {
      s.bundle = bundle_from_checkpoint<LogisticModel>(ckpt);
    } else {
      s.bundle = bundle_from_checkpoint<WideDeepModel>(ckpt);
    }
    out.push_back(std::move(s));
  }
  return out;
}

struct EvaluateOptions {
  bool with_baseline = false;
  bool pattern_calibration = false;
};

inline std::string summary_csv(const std::vector<MetricsReport>& reports) {
  std::vector<const MetricsReport*> rows;
  for (const auto& r : reports) rows.push_back(&r);
  std::stable_sort(rows.begin(), rows.end(), [](auto* a, auto* b) { return a->rce > b->rce; });
  std::string out = "run,model,loss,version,ce,rce,pr_auc\n";
  for (const auto* r : rows) {
    out += r->model_id + ',' + r->model_kind + ',' + r->loss + ',' + std::to_string(r->version) + ',' +
           format_double(r->ce) + ',' + format_double(r->rce) + ',' + format_double(r->pr_auc) + '\n';
  }
  return out;
}

// Scores the selected snapshots of every run on the shared evaluation set
// against the shared naive baseline (the weighted mean eval label).
inline std::vector<MetricsReport> cmd_evaluate(const ExperimentConfig& c, const std::vector<std::filesystem::path>& runs,
                                               const std::filesystem::path& out, const EvaluateOptions& opts = {}) {
  c.validate();
  if (runs.empty() && !opts.with_baseline) throw ConfigError("evaluate needs at least one run directory");
  const auto layout = resolve_layout(c);
  const auto eval = load_eval_examples(c, layout);
  if (eval.empty()) throw DataError("evaluation set is empty");
  std::vector<int> labels;
  std::vector<double> weights;
  for (const auto& ex : eval) {
    labels.push_back(ex.label);
    weights.push_back(ex.weight);
  }
  const double naive = naive_baseline(labels, weights);

  std::vector<LoadedSnapshot> snapshots;
  for (const auto& r : runs) {
    for (auto& s : load_run(r, c.eval.snapshots)) snapshots.push_back(std::move(s));
  }

  std::vector<std::vector<double>> predictions(snapshots.size());
  auto predict = [&](std::size_t k) {
    auto& p = predictions[k];
    p.reserve(eval.size());
    for (const auto& ex : eval) p.push_back(snapshots[k].probability(ex.features));
  };
  // Bounded fan-out over snapshots; results land by index so output order
  // does not depend on scheduling.
  const std::size_t workers = std::max<std::size_t>(1, std::thread::hardware_concurrency());
  for (std::size_t start = 0; start < snapshots.size(); start += workers) {
    std::vector<std::future<void>> batch;
    for (std::size_t k = start; k < std::min(snapshots.size(), start + workers); ++k) {
      batch.push_back(std::async(std::launch::async, predict, k));
    }
    for (auto& f : batch) f.get();
  }

  std::vector<MetricsReport> reports;
  if (opts.with_baseline) {
    const std::vector<double> constant(eval.size(), naive);
    auto r = evaluate_predictions(constant, labels, weights, naive, c.eval.bins);
    r.model_id = "naive";
    r.model_kind = "constant";
    r.loss = "none";
    reports.push_back(std::move(r));
  }
  for (std::size_t k = 0; k < snapshots.size(); ++k) {
    auto r = evaluate_predictions(predictions[k], labels, weights, naive, c.eval.bins);
    r.model_id = snapshots[k].run_name;
    r.model_kind = snapshots[k].model_kind;
    r.loss = snapshots[k].loss;
    r.version = snapshots[k].version;
    r.step = snapshots[k].step;
    reports.push_back(std::move(r));
  }

  ensure_dir(out);
  std::string jsonl;
  for (const auto& r : reports) jsonl += to_json(r).dump() + '\n';
  write_text_file(out / files::kMetrics, jsonl);
  write_text_file(out / files::kSummary, summary_csv(reports));

  if (opts.pattern_calibration) {
    const auto truth_path = std::filesystem::path(c.data.dir) / files::kGroundTruth;
    if (!std::filesystem::exists(truth_path)) throw ConfigError("missing " + truth_path.string());
    const auto truth = ground_truth_from_json(read_json_file(truth_path));
    std::string csv = "run,version,pattern,count,p_star,mean_prediction,observed_rate\n";
    for (std::size_t k = 0; k < snapshots.size(); ++k) {
      struct Acc {
        std::size_t count = 0;
        double w = 0, pred = 0, y = 0, p_star = 0;
      };
      std::map<std::string, Acc> by_pattern;
      for (std::size_t i = 0; i < eval.size(); ++i) {
        std::string key;
        for (const auto& e : eval[i].features) key += (key.empty() ? "" : " ") + std::to_string(e.id);
        auto& a = by_pattern[key];
        a.count += 1;
        a.w += weights[i];
        a.pred += weights[i] * predictions[k][i];
        a.y += weights[i] * labels[i];
        a.p_star = truth.ctr(eval[i].features);
      }
      for (const auto& [key, a] : by_pattern) {
        csv += snapshots[k].run_name + ',' + std::to_string(snapshots[k].version) + ',' + key + ',' +
               std::to_string(a.count) + ',' + format_double(a.p_star) + ',' + format_double(a.pred / a.w) + ',' +
               format_double(a.y / a.w) + '\n';
      }
    }
    write_text_file(out / files::kPatternCalibration, csv);
  }
  return reports;
}

// ---------------------------------------------------------------------------
// Report

struct SummaryRow {
  std::string run;
  std::string model;
  std::string loss;
  std::uint64_t version = 0;
  double ce = 0;
  double rce = 0;
  double pr_auc = 0;
};

inline std::vector<SummaryRow> read_summary(const std::filesystem::path& path) {
  std::vector<SummaryRow> rows;
  for_each_line(path, [&](std::string_view line, std::size_t no) {
    if (no == 1 || line.empty()) return;
    const auto f = split(line, ',');
    if (f.size() != 7) throw ParseError(no, "summary rows need 7 columns");
    SummaryRow r;
    r.run = f[0];
    r.model = f[1];
    r.loss = f[2];
    auto v = parse_int<std::uint64_t>(f[3]);
    auto ce = parse_double(f[4]);
    auto rc = parse_double(f[5]);
    auto pr = parse_double(f[6]);
    if (!v || !ce || !rc || !pr) throw ParseError(no, "bad numeric column");
    r.version = *v;
    r.ce = *ce;
    r.rce = *rc;
    r.pr_auc = *pr;
    rows.push_back(std::move(r));
  });
  return rows;
}

inline double median(std::vector<double> v) {
  if (v.empty()) return std::nan("");
  std::sort(v.begin(), v.end());
  const auto n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

struct ReportRow {
  std::string model;
  std::string loss;
  std::size_t runs = 0;
  double ce = 0;
  double rce = 0;
  double pr_auc = 0;
  std::vector<double> rce_values;
};

struct Report {
  std::vector<ReportRow> rows;  // sorted by model, then median RCE descending
  std::string text;
  std::string csv;
};

// Aggregates summaries of repeated runs by (model, loss) using medians and
// compares the two best losses per model with a Welch t-test on RCE.
inline Report cmd_report(const std::vector<std::filesystem::path>& eval_dirs) {
  if (eval_dirs.empty()) throw ConfigError("report needs at least one evaluation directory");
  std::map<std::pair<std::string, std::string>, ReportRow> groups;
  std::map<std::pair<std::string, std::string>, std::vector<double>> ces, prs;
  for (const auto& dir : eval_dirs) {
    const auto path = std::filesystem::is_directory(dir) ? dir / files::kSummary : dir;
    if (!std::filesystem::exists(path)) throw ConfigError("missing " + path.string());
    for (const auto& r : read_summary(path)) {
      auto key = std::pair{r.model, r.loss};
      auto& g = groups[key];
      g.model = r.model;
      g.loss = r.loss;
      g.runs += 1;
      g.rce_values.push_back(r.rce);
      ces[key].push_back(r.ce);
      prs[key].push_back(r.pr_auc);
    }
  }
  Report rep;
  for (auto& [key, g] : groups) {
    g.rce = median(g.rce_values);
    g.ce = median(ces[key]);
    g.pr_auc = median(prs[key]);
    rep.rows.push_back(g);
  }
  std::stable_sort(rep.rows.begin(), rep.rows.end(), [](const ReportRow& a, const ReportRow& b) {
    return a.model != b.model ? a.model < b.model : a.rce > b.rce;
  });

  std::ostringstream text;
  text << std::left << std::setw(11) << "model" << std::setw(18) << "loss" << std::right << std::setw(6) << "runs"
       << std::setw(11) << "CE" << std::setw(10) << "RCE" << std::setw(10) << "PR-AUC" << '\n';
  rep.csv = "model,loss,runs,median_ce,median_rce,median_pr_auc\n";
  for (const auto& r : rep.rows) {
    text << std::left << std::setw(11) << r.model << std::setw(18) << r.loss << std::right << std::setw(6) << r.runs
         << std::fixed << std::setprecision(4) << std::setw(11) << r.ce << std::setprecision(2) << std::setw(10)
         << r.rce << std::setprecision(4) << std::setw(10) << r.pr_auc << '\n';
    rep.csv += r.model + ',' + r.loss + ',' + std::to_string(r.runs) + ',' + format_double(r.ce) + ',' +
               format_double(r.rce) + ',' + format_double(r.pr_auc) + '\n';
  }
  for (std::size_t i = 0; i + 1 < rep.rows.size(); ++i) {
    const auto& a = rep.rows[i];
    const auto& b = rep.rows[i + 1];
    const bool top_of_model = i == 0 || rep.rows[i - 1].model != a.model;
    if (!top_of_model || a.model != b.model || a.runs < 2 || b.runs < 2) continue;
    const auto w = welch_t_test(a.rce_values, b.rce_values);
    text << a.model << ": " << a.loss << " vs " << b.loss << " RCE Welch t=" << std::setprecision(3) << w.t
         << " df=" << w.df << " p=" << std::setprecision(4) << w.p_value << '\n';
  }
  rep.text = text.str();
  return rep;
}

}  // namespace fnlab
