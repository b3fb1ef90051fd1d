// Acceptance suite: one test per criterion, reported as
//   ACCEPTANCE <criterion> PASS|FAIL
// with the measured quantities printed alongside.

#include <gtest/gtest.h>

#include <sys/wait.h>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <map>

#include <nlohmann/json.hpp>

#include "fnlab/criteo.hpp"
#include "fnlab/eval.hpp"
#include "fnlab/experiment.hpp"
#include "fnlab/trainer.hpp"
#include "gradcheck.hpp"
#include "support.hpp"

using namespace fnlab;
using namespace fnlab::testing;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;
using Json = nlohmann::ordered_json;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

int run_cli(const std::string& args) {
  const std::string cmd = FNLAB_CLI_PATH " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

class AcceptanceListener : public ::testing::EmptyTestEventListener {
  void OnTestEnd(const ::testing::TestInfo& info) override {
    if (std::string(info.test_suite_name()) != "Acceptance") return;
    std::printf("ACCEPTANCE %s %s\n", info.name(), info.result()->Passed() ? "PASS" : "FAIL");
    std::fflush(stdout);
  }
};

// ---------------------------------------------------------------------------
// Four-pattern fake-negative instance shared by the bias-law and correction
// criteria.

constexpr std::array<double, 4> kPatternCtr = {0.1, 0.2, 0.3, 0.4};

struct BiasLawRun {
  std::array<double, 4> log_pred{};
  std::array<double, 4> weighted_pred{};
  double log_seconds = 0.0;
};

Hyperparams stream_hyper() {
  Hyperparams h;
  h.learning_rate = 0.5;
  h.decay = 0.002;
  h.batch_size = 64;
  h.negative_downsample_rate = 1.0;
  h.seed = 11;
  return h;
}

std::vector<StreamEvent> pattern_stream(std::size_t n, double horizon, std::uint64_t seed) {
  const auto gt = pattern_truth({kPatternCtr.begin(), kPatternCtr.end()}, std::vector<double>(4, 1.0 / 60.0), horizon);
  const auto imps = gen_synthetic(gt, n, seed);
  auto stream = to_fake_negative_stream(imps);
  std::erase_if(stream, [&](const StreamEvent& e) { return e.emit_time > horizon; });
  return stream;
}

std::array<double, 4> train_patterns(LossKind loss, const std::vector<StreamEvent>& stream) {
  TrainerState<LogisticModel> s(LogisticModel(4), loss, stream_hyper());
  train_continuous(s, stream, 1000);
  std::array<double, 4> out{};
  for (std::size_t k = 0; k < 4; ++k) out[k] = sigmoid(s.params.logit(one_hot(k)));
  return out;
}

const BiasLawRun& bias_law_run() {
  static const BiasLawRun run = [] {
    BiasLawRun r;
    const auto t0 = Clock::now();
    const auto stream = pattern_stream(200000, 200000.0, 2024);
    r.log_pred = train_patterns(LossKind::kLog, stream);
    r.log_seconds = seconds_since(t0);
    r.weighted_pred = train_patterns(LossKind::kFnWeighted, stream);
    return r;
  }();
  return run;
}

// Per-impression gradient in the logit under fn_weighted: the fake negative
// plus, for a conversion, the positive.
struct GradientMoments {
  double mean = 0.0;
  double se = 0.0;
};

GradientMoments fn_weighted_gradient(double f, double p, std::size_t n, Rng& rng) {
  LossInput neg;
  neg.logit = logit(f);
  neg.label = 0;
  LossInput pos = neg;
  pos.label = 1;
  const double g_neg = fn_weighted_loss(neg).d_logit;
  const double g_pos = fn_weighted_loss(pos).d_logit;
  double sum = 0.0;
  double sq = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double g = g_neg + (rng.bernoulli(p) ? g_pos : 0.0);
    sum += g;
    sq += g * g;
  }
  const double mean = sum / static_cast<double>(n);
  const double var = sq / static_cast<double>(n) - mean * mean;
  return {mean, std::sqrt(var / static_cast<double>(n))};
}

// ---------------------------------------------------------------------------
// Loss-ranking replay.

Json ranking_config(const fs::path& data_dir, std::uint64_t seed) {
  auto j = Json::parse(R"({
    "name": "ranking",
    "model": "logistic",
    "loss": "log",
    "mode": "continuous",
    "snapshot_every": 500,
    "hyper": {"learning_rate": 0.5, "decay": 0.002, "batch_size": 64, "negative_downsample_rate": 1.0,
              "deep_layers": [16, 8], "embedding_dim": 8},
    "data": {"source": "synthetic"},
    "synthetic": {"fields": [4, 4, 4], "n_train": 100000, "n_eval": 50000, "ctr_base": -1.0, "ctr_spread": 0.6,
                  "horizon": 86400, "eval_horizon": 86400, "delay_base": -7.5, "delay_spread": 0.3},
    "eval": {"window": 32400}
  })");
  j["seed"] = seed;
  j["data"]["dir"] = data_dir.string();
  return j;
}

}  // namespace

TEST(Acceptance, BiasLaw) {
  const auto& r = bias_law_run();
  for (std::size_t k = 0; k < 4; ++k) {
    const double b = kPatternCtr[k] / (1.0 + kPatternCtr[k]);
    std::printf("  bias law: p*=%.1f target b=%.4f predicted=%.4f\n", kPatternCtr[k], b, r.log_pred[k]);
    EXPECT_NEAR(r.log_pred[k], b, 0.02);
  }
  std::printf("  bias law: generation + training %.2f s\n", r.log_seconds);
  EXPECT_LT(r.log_seconds, 120.0);
}

TEST(Acceptance, CorrectionRecovery) {
  const auto& r = bias_law_run();
  for (std::size_t k = 0; k < 4; ++k) {
    const double calibrated = fn_calibrate(r.log_pred[k]);
    std::printf("  correction: p*=%.1f fn_weighted=%.4f fn_calibrate(log)=%.4f\n", kPatternCtr[k],
                r.weighted_pred[k], calibrated);
    EXPECT_NEAR(r.weighted_pred[k], kPatternCtr[k], 0.02);
    EXPECT_NEAR(calibrated, kPatternCtr[k], 0.02);
  }
  Rng rng(99);
  const std::size_t n = 1000000;
  for (double p : kPatternCtr) {
    const auto at = fn_weighted_gradient(p, p, n, rng);
    std::printf("  fixed point: p*=%.1f mean gradient %.2e (se %.2e)\n", p, at.mean, at.se);
    EXPECT_LT(std::abs(at.mean), 3.0 * at.se);
    for (double delta : {-0.2, 0.2}) {
      const double f = p + delta;
      if (!(f > 0.0 && f < 1.0)) continue;
      const auto g = fn_weighted_gradient(f, p, n, rng);
      // descent moves the logit against the gradient, so the sign must
      // match f - p* and clear zero by 3 standard errors
      EXPECT_GT(std::copysign(1.0, delta) * g.mean, 3.0 * g.se) << "f=" << f << " p=" << p;
    }
  }
}

TEST(Acceptance, DelayedFeedbackJointEstimation) {
  const auto t0 = Clock::now();
  const std::vector<double> ctr = {0.1, 0.2, 0.3, 0.4};
  const std::vector<double> rate = {0.5, 2.0, 0.5, 2.0};
  const double horizon = 10.0;
  const auto gt = pattern_truth(ctr, rate, horizon);
  const auto imps = gen_synthetic(gt, 200000, 606);
  const auto data = snapshot_label(imps, horizon);

  Hyperparams h;
  h.batch_size = 128;
  h.df_learning_rate = 0.1;
  h.decay = 1e-4;
  h.seed = 3;
  auto s = make_trainer(LogisticModel(4), LossKind::kDelayedFeedback, h, 4);
  train_offline(s, data, 5);
  for (std::size_t k = 0; k < 4; ++k) {
    const double p_hat = sigmoid(s.params.logit(one_hot(k)));
    const double l_hat = std::exp(s.params.delay->delay_logit(one_hot(k)));
    std::printf("  delayed feedback: p*=%.2f p=%.4f (%.1f%%)  lambda*=%.2f lambda=%.4f (%.1f%%)\n", ctr[k], p_hat,
                100 * std::abs(p_hat - ctr[k]) / ctr[k], rate[k], l_hat, 100 * std::abs(l_hat - rate[k]) / rate[k]);
    EXPECT_LT(std::abs(p_hat - ctr[k]) / ctr[k], 0.10);
    EXPECT_LT(std::abs(l_hat - rate[k]) / rate[k], 0.10);
  }
  const double secs = seconds_since(t0);
  std::printf("  delayed feedback: %.2f s\n", secs);
  EXPECT_LT(secs, 300.0);
}

TEST(Acceptance, LossRanking) {
  ScratchDir dir("ranking");
  const std::vector<std::string> challengers = {"fn_calibration", "fn_weighted", "pu"};
  std::map<std::string, int> wins;
  const int seeds = 8;
  for (int seed = 1; seed <= seeds; ++seed) {
    const auto data_dir = dir / ("data_" + std::to_string(seed));
    auto cfg = config_from_json(ranking_config(data_dir, seed));
    cmd_gen_data(cfg, data_dir);
    for (const std::string model : {"logistic", "wide_deep"}) {
      std::vector<fs::path> runs;
      for (const std::string loss : {"log", "fn_calibration", "fn_weighted", "pu"}) {
        auto c = cfg;
        c.model = model;
        c.loss = loss;
        c.name = model + "_" + loss;
        runs.push_back(dir / ("run_" + std::to_string(seed) + "_" + c.name));
        cmd_train(c, runs.back());
      }
      const auto reports = cmd_evaluate(cfg, runs, dir / ("eval_" + std::to_string(seed) + "_" + model));
      std::map<std::string, double> rce;
      for (const auto& r : reports) rce[r.loss] = r.rce;
      bool all_beat = true;
      for (const auto& l : challengers) all_beat = all_beat && rce[l] > rce["log"];
      wins[model] += all_beat;
      std::printf("  ranking seed %d %-9s log=%.2f fn_calibration=%.2f fn_weighted=%.2f pu=%.2f %s\n", seed,
                  model.c_str(), rce["log"], rce["fn_calibration"], rce["fn_weighted"], rce["pu"],
                  all_beat ? "ordered" : "not ordered");
    }
  }
  for (const auto& [model, n] : wins) {
    std::printf("  ranking %s: %d/%d seeds ordered\n", model.c_str(), n, seeds);
    EXPECT_GT(n, seeds / 2) << model;
  }
  EXPECT_EQ(wins.size(), 2u);
}

TEST(Acceptance, GradientCorrectness) {
  for (auto k : kAllLosses) {
    const double worst = loss_fd_worst(k, 131, 1000);
    std::printf("  gradient %-16s worst relative error %.2e\n", std::string(loss_name(k)).c_str(), worst);
    EXPECT_LT(worst, 1e-5);
  }
  const double lw = logistic_fd_worst(121, 1000);
  const double ww = wide_deep_fd_worst(122, 1000);
  std::printf("  gradient logistic        worst relative error %.2e\n", lw);
  std::printf("  gradient wide_deep       worst relative error %.2e\n", ww);
  EXPECT_LT(lw, 1e-5);
  EXPECT_LT(ww, 1e-5);
}

TEST(Acceptance, StableFormEquivalence) {
  // literal joint likelihood
  auto direct = [](double z, double u, int y, double e, double d) {
    const double f = 1.0 / (1.0 + std::exp(-z));
    const double rate = std::exp(u);
    if (y == 1) return -(std::log(f) + std::log(rate) - rate * d);
    return -std::log(1.0 - f + f * std::exp(-rate * e));
  };
  Rng rng(707);
  double worst = 0.0;
  for (int i = 0; i < 100000; ++i) {
    LossInput in;
    in.logit = rng.uniform(-8, 8);
    in.delay_logit = rng.uniform(-3, 3);
    in.label = rng.bernoulli(0.5) ? 1 : 0;
    const double e = rng.uniform(0, 20);
    const double d = rng.uniform(1e-3, 20);
    if (in.label == 1) {
      in.time_to_click = d;
    } else {
      in.elapsed = e;
    }
    const double stable = delayed_feedback_loss(in).value;
    worst = std::max(worst, std::abs(stable - direct(in.logit, *in.delay_logit, in.label, e, d)));
  }
  std::printf("  stable form: worst |stable - direct| %.2e over 1e5 points\n", worst);
  EXPECT_LT(worst, 1e-9);
  bool finite = true;
  for (double z : {-500.0, 500.0}) {
    for (double u : {-500.0, 0.0, 500.0}) {
      for (int y : {0, 1}) {
        LossInput in;
        in.logit = z;
        in.delay_logit = u;
        in.label = y;
        if (y == 1) {
          in.time_to_click = 1.0;
        } else {
          in.elapsed = 1.0;
        }
        const auto out = delayed_feedback_loss(in);
        finite = finite && std::isfinite(out.value) && std::isfinite(out.d_logit) && std::isfinite(out.d_delay_logit);
      }
    }
  }
  EXPECT_TRUE(finite);
}

TEST(Acceptance, MetricOracles) {
  EXPECT_NEAR(rce(0.4, 0.5), 20.0, 1e-12);
  const std::vector<double> p = {0.9};
  const std::vector<int> y = {1};
  EXPECT_NEAR(cross_entropy(p, y), 0.105361, 1e-6);
  EXPECT_NEAR(cross_entropy(p, y), -std::log(0.9), 1e-15);

  // brute force: every labeling of n <= 8 tied-heavy scores against the mean
  // over positives of the precision at each positive's threshold
  Rng rng(5);
  int labelings = 0;
  double worst = 0.0;
  for (std::size_t n = 1; n <= 8; ++n) {
    std::vector<double> s(n);
    for (auto& v : s) v = static_cast<double>(rng.index(3)) / 3.0;
    for (unsigned mask = 1; mask < (1u << n); ++mask) {
      std::vector<int> lab(n);
      for (std::size_t i = 0; i < n; ++i) lab[i] = (mask >> i) & 1u;
      double ap = 0.0;
      int pos = 0;
      for (std::size_t i = 0; i < n; ++i) {
        if (!lab[i]) continue;
        ++pos;
        int above = 0, hits = 0;
        for (std::size_t j = 0; j < n; ++j) {
          if (s[j] >= s[i]) {
            ++above;
            hits += lab[j];
          }
        }
        ap += static_cast<double>(hits) / above;
      }
      worst = std::max(worst, std::abs(pr_auc(s, lab) - ap / pos));
      ++labelings;
    }
  }
  std::printf("  metric oracles: pr_auc worst deviation %.2e over %d labelings\n", worst, labelings);
  EXPECT_LT(worst, 1e-12);
}

TEST(Acceptance, PuNegativeRisk) {
  LossInput in;
  in.logit = logit(0.9);
  in.label = 1;
  const double v = pu_loss(in).value;
  std::printf("  pu: value at (y=1, f=0.9) = %.6f\n", v);
  EXPECT_NEAR(v, -2.19722, 1e-5);

  ScratchDir dir("pu");
  auto cfg = Json::parse(R"({
    "name": "pu-divergence", "seed": 5, "model": "wide_deep", "loss": "pu", "mode": "continuous",
    "snapshot_every": 100,
    "hyper": {"learning_rate": 0.05, "decay": 0.0, "batch_size": 32, "negative_downsample_rate": 1.0,
              "deep_layers": [16, 8], "embedding_dim": 8},
    "data": {"source": "synthetic", "train": "snapshot"},
    "synthetic": {"fields": [2, 2], "ctr_logits": [[1.1, 1.1], [1.1, 1.1]], "n_train": 20000, "n_eval": 1000,
                  "delay_base": -7.5, "delay_spread": 0.0}
  })");
  cfg["data"]["dir"] = (dir / "data").string();
  write_text_file(dir / "pu.json", cfg.dump(1));
  const auto config = (dir / "pu.json").string();
  ASSERT_EQ(run_cli("gen-data --config " + config + " --out " + (dir / "data").string()), 0);
  const int rc = run_cli("train --config " + config + " --out " + (dir / "run").string());
  std::printf("  pu: divergence config exit code %d\n", rc);
  EXPECT_EQ(rc, 4);
}

TEST(Acceptance, PipelineDeterminism) {
  ScratchDir dir("determinism");
  std::string metrics[2];
  for (int rep = 0; rep < 2; ++rep) {
    const auto root = dir / ("rep" + std::to_string(rep));
    auto cfg = ranking_config(root / "data", 17);
    cfg["synthetic"]["n_train"] = 20000;
    cfg["synthetic"]["n_eval"] = 5000;
    fs::create_directories(root);
    write_text_file(root / "c.json", cfg.dump(1));
    const auto config = (root / "c.json").string();
    ASSERT_EQ(run_cli("gen-data --config " + config + " --out " + (root / "data").string()), 0);
    std::string runs;
    for (const auto* loss : {"log", "fn_weighted"}) {
      for (const auto* model : {"logistic", "wide_deep"}) {
        const auto run = root / (std::string(model) + "_" + loss);
        ASSERT_EQ(run_cli("train --config " + config + " --loss " + loss + " --model " + model + " --out " +
                          run.string()),
                  0);
        runs += " " + run.string();
      }
    }
    ASSERT_EQ(run_cli("evaluate --config " + config + runs + " --snapshots all --with-baseline --out " +
                      (root / "eval").string()),
              0);
    metrics[rep] = read_text_file(root / "eval" / files::kMetrics);
  }
  std::printf("  determinism: metrics.jsonl %zu bytes, identical=%s\n", metrics[0].size(),
              metrics[0] == metrics[1] ? "yes" : "no");
  EXPECT_FALSE(metrics[0].empty());
  EXPECT_EQ(metrics[0], metrics[1]);
}

TEST(Acceptance, CriteoDerivation) {
  const CriteoSchema schema;
  const auto records = read_criteo_file(FNLAB_TEST_DATA_DIR "/criteo_fixture.tsv", schema);
  ASSERT_EQ(records.size(), 6u);
  const auto layout = FeatureLayout::uniform(schema.fields(), schema.fields() * 16);
  const auto out = derive_criteo_fn_dataset(records, layout);

  struct Expected {
    double emit;
    std::uint64_t id;
    int label;
    double elapsed;
  };
  // one fake negative per click, one positive per conversion at its time
  const std::vector<Expected> want = {{0, 0, 0, 0},  {10, 1, 0, 0},  {20, 2, 0, 0},  {30, 3, 0, 0},  {35, 3, 1, 5},
                                      {50, 4, 0, 0}, {60, 5, 0, 0}, {70, 1, 1, 60}, {200, 5, 1, 140}};
  ASSERT_EQ(out.size(), want.size());
  std::size_t positives = 0;
  for (std::size_t i = 0; i < want.size(); ++i) {
    EXPECT_EQ(out[i].emit_time, want[i].emit) << i;
    EXPECT_EQ(out[i].impression_id, want[i].id) << i;
    EXPECT_EQ(out[i].example.label, want[i].label) << i;
    EXPECT_EQ(out[i].example.elapsed.value_or(-1), want[i].elapsed) << i;
    if (want[i].label == 1) {
      ++positives;
      EXPECT_EQ(out[i].example.time_to_click.value_or(-1), want[i].elapsed) << i;
    }
  }
  std::printf("  criteo: %zu events (%zu negatives, %zu positives)\n", out.size(), out.size() - positives, positives);
}

int main(int argc, char** argv) {
  ::testing::InitGoogleTest(&argc, argv);
  ::testing::UnitTest::GetInstance()->listeners().Append(new AcceptanceListener);
  return RUN_ALL_TESTS();
}
