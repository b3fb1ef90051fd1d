#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <numbers>
#include <numeric>

#include "fnlab/eval.hpp"
#include "fnlab/random.hpp"
#include "support.hpp"

using namespace fnlab;
using fnlab::testing::binomial_se;
using fnlab::testing::one_hot;

namespace {

// Mean over positives of the precision at that positive's own score
// threshold, with every tied score counted as ranked above.
double ap_oracle(const std::vector<double>& s, const std::vector<int>& y) {
  double total = 0.0;
  int positives = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (y[i] != 1) continue;
    ++positives;
    int above = 0;
    int hits = 0;
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (s[j] >= s[i]) {
        ++above;
        hits += y[j];
      }
    }
    total += static_cast<double>(hits) / above;
  }
  return total / positives;
}

// Two-sided Student t tail by Simpson integration of the density.
double t_two_sided(double t, double df) {
  const double c = std::tgamma((df + 1) / 2) / (std::sqrt(df * std::numbers::pi) * std::tgamma(df / 2));
  auto pdf = [&](double x) { return c * std::pow(1 + x * x / df, -(df + 1) / 2); };
  const int n = 200000;
  const double h = std::abs(t) / n;
  double s = pdf(0) + pdf(std::abs(t));
  for (int i = 1; i < n; ++i) s += (i % 2 ? 4 : 2) * pdf(i * h);
  return 1.0 - 2.0 * s * h / 3.0;
}

}  // namespace

TEST(CrossEntropy, Examples) {
  const std::vector<double> p = {0.9};
  const std::vector<int> one = {1};
  EXPECT_NEAR(cross_entropy(p, one), 0.105361, 1e-6);
  const std::vector<double> half = {0.5, 0.5};
  const std::vector<int> mixed = {0, 1};
  EXPECT_NEAR(cross_entropy(half, mixed), std::numbers::ln2, 1e-15);
  // clipping keeps confident mistakes finite
  const std::vector<double> wrong = {0.0};
  EXPECT_NEAR(cross_entropy(wrong, one), -std::log(1e-7), 1e-9);
  const std::vector<int> two = {1, 1};
  EXPECT_THROW(cross_entropy(p, two), ContractError);
}

TEST(CrossEntropy, WeightsActAsRepetition) {
  const std::vector<double> p = {0.2, 0.7};
  const std::vector<int> y = {0, 1};
  const std::vector<double> w = {3.0, 1.0};
  const std::vector<double> rp = {0.2, 0.2, 0.2, 0.7};
  const std::vector<int> ry = {0, 0, 0, 1};
  EXPECT_NEAR(cross_entropy(p, y, w), cross_entropy(rp, ry), 1e-15);
}

TEST(NaiveBaseline, Examples) {
  const std::vector<int> a = {1, 0, 0, 0};
  EXPECT_DOUBLE_EQ(naive_baseline(a), 0.25);
  const std::vector<int> none = {0, 0, 0};
  EXPECT_DOUBLE_EQ(naive_baseline(none), 1e-7);
  const std::vector<int> b = {1, 0};
  const std::vector<double> w = {1.0, 20.0};
  EXPECT_NEAR(naive_baseline(b, w), 1.0 / 21.0, 1e-15);
}

TEST(Rce, Examples) {
  EXPECT_NEAR(rce(0.4, 0.5), 20.0, 1e-12);
  EXPECT_EQ(rce(0.5, 0.5), 0.0);
  EXPECT_LT(rce(0.6, 0.5), 0.0);
  EXPECT_THROW(rce(0.1, 0.0), DomainError);
}

TEST(PrAuc, Examples) {
  const std::vector<double> s = {0.9, 0.8};
  const std::vector<int> y = {0, 1};
  EXPECT_DOUBLE_EQ(pr_auc(s, y), 0.5);
  const std::vector<double> ranked = {0.9, 0.8, 0.3, 0.1};
  const std::vector<int> perfect = {1, 1, 0, 0};
  EXPECT_DOUBLE_EQ(pr_auc(ranked, perfect), 1.0);
  const std::vector<int> no_pos = {0, 0};
  EXPECT_THROW(pr_auc(s, no_pos), DomainError);
}

// Every labeling of up to 8 examples, scores drawn from a small set so ties
// are common.
TEST(PrAuc, MatchesBruteForceOracle) {
  Rng rng(3);
  for (std::size_t n = 1; n <= 8; ++n) {
    std::vector<double> s(n);
    for (auto& v : s) v = static_cast<double>(rng.index(4)) / 4.0;
    for (unsigned mask = 1; mask < (1u << n); ++mask) {
      std::vector<int> y(n);
      for (std::size_t i = 0; i < n; ++i) y[i] = (mask >> i) & 1u;
      EXPECT_NEAR(pr_auc(s, y), ap_oracle(s, y), 1e-12) << "n=" << n << " mask=" << mask;
    }
  }
}

TEST(PrAuc, PermutationInvariant) {
  Rng rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> s(40);
    std::vector<int> y(40);
    for (std::size_t i = 0; i < s.size(); ++i) {
      s[i] = std::round(rng.uniform(0, 1) * 10) / 10;
      y[i] = rng.bernoulli(0.3);
    }
    y[0] = 1;
    const double base = pr_auc(s, y);
    std::vector<std::size_t> perm(s.size());
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    rng.shuffle(std::span(perm));
    std::vector<double> ps;
    std::vector<int> py;
    for (auto k : perm) {
      ps.push_back(s[k]);
      py.push_back(y[k]);
    }
    EXPECT_NEAR(pr_auc(ps, py), base, 1e-12);
  }
}

TEST(PrAuc, RandomScoresApproachPrevalence) {
  Rng rng(12);
  const std::size_t n = 200000;
  std::vector<double> s(n);
  std::vector<int> y(n);
  for (std::size_t i = 0; i < n; ++i) {
    s[i] = rng.uniform(0, 1);
    y[i] = rng.bernoulli(0.2);
  }
  EXPECT_NEAR(pr_auc(s, y), 0.2, 0.01);
}

TEST(Calibration, BinsAndEmptyBins) {
  const std::vector<double> p = {0.05, 0.15, 0.95, 1.0};
  const std::vector<int> y = {0, 1, 1, 1};
  const auto bins = calibration_report(p, y, {}, 10);
  ASSERT_EQ(bins.size(), 10u);
  EXPECT_EQ(bins[0].count, 1u);
  EXPECT_EQ(bins[1].count, 1u);
  EXPECT_EQ(bins[9].count, 2u);  // 1.0 lands in the top bin
  EXPECT_FALSE(bins[5].mean_prediction.has_value());
  EXPECT_FALSE(bins[5].positive_rate.has_value());
  EXPECT_NEAR(*bins[9].mean_prediction, 0.975, 1e-15);
  EXPECT_EQ(*bins[9].positive_rate, 1.0);
  EXPECT_DOUBLE_EQ(bins[3].lower, 0.3);
}

TEST(Calibration, SingleBinIsTheWeightedMean) {
  const std::vector<double> p = {0.1, 0.5, 0.9};
  const std::vector<int> y = {0, 1, 1};
  const std::vector<double> w = {2.0, 1.0, 1.0};
  const auto bins = calibration_report(p, y, w, 1);
  ASSERT_EQ(bins.size(), 1u);
  EXPECT_EQ(bins[0].count, 3u);
  EXPECT_NEAR(*bins[0].mean_prediction, 1.6 / 4.0, 1e-15);
  EXPECT_NEAR(*bins[0].positive_rate, 0.5, 1e-15);
}

// Labels drawn from the predictions themselves: every bin calibrated within
// four binomial standard errors.
TEST(Calibration, CalibratedPredictorProperty) {
  Rng rng(21);
  std::vector<double> p(100000);
  std::vector<int> y(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] = rng.uniform(0, 1);
    y[i] = rng.bernoulli(p[i]);
  }
  for (const auto& b : calibration_report(p, y, {}, 20)) {
    ASSERT_TRUE(b.mean_prediction.has_value());
    EXPECT_NEAR(*b.positive_rate, *b.mean_prediction, 4 * binomial_se(*b.mean_prediction, b.count) + 1e-3);
  }
}

TEST(PooledRce, SharedBaseline) {
  std::vector<TrainingExample> eval;
  for (int i = 0; i < 100; ++i) {
    TrainingExample ex;
    ex.features = one_hot(i % 2);
    ex.label = (i % 2 == 0) ? (i % 10 == 0) : (i % 10 != 1);
    eval.push_back(ex);
  }
  const std::function<double(const SparseVector&)> good = [](const SparseVector& x) {
    return x.entries()[0].id == 0 ? 0.2 : 0.8;
  };
  const std::function<double(const SparseVector&)> naive = [](const SparseVector&) { return 0.5; };
  const std::vector models = {good, good, naive};
  const auto r = pooled_rce(models, eval);
  ASSERT_EQ(r.size(), 3u);
  EXPECT_EQ(r[0], r[1]);
  EXPECT_GT(r[0], 0.0);
  EXPECT_NEAR(r[2], 0.0, 1e-12);
  // an explicit baseline equal to the model gives zero
  const std::vector only = {naive};
  EXPECT_NEAR(pooled_rce(only, eval, 0.5)[0], 0.0, 1e-12);
}

TEST(EvaluatePredictions, Consistent) {
  const std::vector<double> p = {0.1, 0.8, 0.3, 0.6};
  const std::vector<int> y = {0, 1, 0, 1};
  const auto r = evaluate_predictions(p, y, {}, 0.5, 5);
  EXPECT_EQ(r.n_examples, 4u);
  EXPECT_DOUBLE_EQ(r.ce, cross_entropy(p, y));
  EXPECT_NEAR(r.rce, rce(r.ce, std::numbers::ln2), 1e-12);
  EXPECT_DOUBLE_EQ(r.pr_auc, 1.0);
  EXPECT_EQ(r.bins.size(), 5u);
  const auto j = to_json(r);
  EXPECT_TRUE(j["calibration"][2]["mean_prediction"].is_null() == !r.bins[2].mean_prediction.has_value());
}

TEST(Welch, HandComputedExample) {
  const std::vector<double> a = {1, 2, 3, 4};
  const std::vector<double> b = {2, 4, 6, 8, 10};
  const auto r = welch_t_test(a, b);
  // means 2.5 and 6, variances 5/3 and 10
  const double se2 = (5.0 / 3.0) / 4 + 10.0 / 5;
  EXPECT_NEAR(r.t, -3.5 / std::sqrt(se2), 1e-12);
  const double df = se2 * se2 / (std::pow(5.0 / 12, 2) / 3 + std::pow(2.0, 2) / 4);
  EXPECT_NEAR(r.df, df, 1e-12);
  EXPECT_NEAR(r.p_value, t_two_sided(r.t, r.df), 1e-6);
  EXPECT_GT(r.p_value, 0.05);
  EXPECT_LT(r.p_value, 0.1);
  const std::vector<double> c = {1, 1};
  EXPECT_EQ(welch_t_test(c, c).p_value, 1.0);
  const std::vector<double> one = {1};
  EXPECT_THROW(welch_t_test(one, c), ContractError);
}
