#pragma once

// Shared helpers for the test suites: scratch directories, numeric oracles
// and small synthetic instances.

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "fnlab/core.hpp"
#include "fnlab/random.hpp"
#include "fnlab/stream.hpp"

namespace fnlab::testing {

class ScratchDir {
 public:
  explicit ScratchDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("fnlab_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~ScratchDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  ScratchDir(const ScratchDir&) = delete;
  ScratchDir& operator=(const ScratchDir&) = delete;

  const std::filesystem::path& path() const noexcept { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline double logit(double p) { return std::log(p / (1.0 - p)); }

// Central difference with a Richardson step, accurate to O(h^4).
inline double numeric_derivative(const std::function<double(double)>& f, double x, double h = 1e-3) {
  const double d1 = (f(x + h) - f(x - h)) / (2.0 * h);
  const double d2 = (f(x + h / 2) - f(x - h / 2)) / h;
  return (4.0 * d2 - d1) / 3.0;
}

// |a - n| / max(|a|, |n|, floor); zero when both vanish.
inline double relative_error(double analytic, double numeric, double floor = 0.0) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), floor});
  if (scale < 1e-300) return 0.0;
  return std::abs(analytic - numeric) / scale;
}

// One categorical field with one category per pattern; the model sees the
// one-hot id plus its own bias.
inline GroundTruth pattern_truth(const std::vector<double>& ctr, const std::vector<double>& delay_rate,
                                 double horizon) {
  GroundTruth gt;
  gt.feature_gen.cardinalities = {ctr.size()};
  gt.horizon = horizon;
  for (std::size_t k = 0; k < ctr.size(); ++k) {
    gt.w_star.push_back(logit(ctr[k]));
    gt.w_d_star.push_back(std::log(delay_rate[k]));
  }
  return gt;
}

inline SparseVector one_hot(FeatureId id) { return SparseVector::from_sorted({{id, 1.0}}); }

// Binomial standard error of a proportion.
inline double binomial_se(double p, double n) { return std::sqrt(p * (1.0 - p) / n); }

}  // namespace fnlab::testing
