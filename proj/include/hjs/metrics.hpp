#pragma once

#include <Eigen/Dense>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "hjs/error.hpp"
#include "hjs/models.hpp"
#include "hjs/rng.hpp"

namespace hjs {

/// Empirical W1 between two 1D sample sets: mean absolute difference of the sorted samples.
///
/// With unequal counts the larger set is shuffled (by `seed`) and truncated to the smaller size.
inline double w1_1d(const Eigen::Ref<const Vector>& a, const Eigen::Ref<const Vector>& b, std::uint64_t seed = 0) {
  require(a.size() > 0 && b.size() > 0, "w1_1d: empty sample set");
  std::vector<double> x(a.data(), a.data() + a.size());
  std::vector<double> y(b.data(), b.data() + b.size());
  if (x.size() != y.size()) {
    auto& big = x.size() > y.size() ? x : y;
    const std::size_t m = std::min(x.size(), y.size());
    Xoshiro256pp gen(seed);
    std::shuffle(big.begin(), big.end(), gen);
    big.resize(m);
  }
  std::sort(x.begin(), x.end());
  std::sort(y.begin(), y.end());
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += std::abs(x[i] - y[i]);
  return s / static_cast<double>(x.size());
}

/// Unit directions (columns) drawn as normalized standard Gaussian vectors.
inline Matrix random_directions(int n, int count, std::uint64_t seed) {
  Matrix d(n, count);
  for (int l = 0; l < count; ++l) {
    NormalStream s(seed, static_cast<std::uint64_t>(l));
    double norm = 0.0;
    do {
      for (int i = 0; i < n; ++i) d(i, l) = s();
      norm = d.col(l).norm();
    } while (norm == 0.0);
    d.col(l) /= norm;
  }
  return d;
}

/// Monte Carlo sliced W1: mean of w1_1d over `n_dirs` random projections.
inline double sliced_w1(const Eigen::Ref<const SampleSet>& a, const Eigen::Ref<const SampleSet>& b, int n_dirs = 50,
                        std::uint64_t seed = 0) {
  require(a.rows() >= 1 && a.rows() == b.rows(), "sliced_w1: dimension mismatch");
  require(n_dirs >= 1, "sliced_w1: need at least one direction");
  const Matrix dirs = random_directions(static_cast<int>(a.rows()), n_dirs, seed);
  double total = 0.0;
  for (int l = 0; l < n_dirs; ++l) {
    const Vector pa = a.transpose() * dirs.col(l);
    const Vector pb = b.transpose() * dirs.col(l);
    total += w1_1d(pa, pb, derive_seed(seed, static_cast<std::uint64_t>(l)));
  }
  return total / n_dirs;
}

struct SliceSummary {
  Vector mean;
  Vector std;
};

/// Coordinate-wise mean and population standard deviation of one sample set.
inline SliceSummary summarize(const Eigen::Ref<const SampleSet>& samples) {
  require(samples.cols() > 0, "summarize: empty sample set");
  SliceSummary out;
  out.mean = samples.rowwise().mean();
  out.std = ((samples.colwise() - out.mean).array().square().rowwise().sum() / static_cast<double>(samples.cols()))
                .sqrt()
                .matrix();
  return out;
}

inline std::map<double, SliceSummary> summarize(const std::map<double, SampleSet>& slices) {
  require(!slices.empty(), "summarize: no slices");
  std::map<double, SliceSummary> out;
  for (const auto& [t, s] : slices) out.emplace(t, summarize(s));
  return out;
}

struct MetricReport {
  std::string name;
  double value = 0.0;
  std::size_t count_a = 0;
  std::size_t count_b = 0;
  std::optional<int> directions;
  std::uint64_t seed = 0;
};

inline void to_json(nlohmann::json& j, const MetricReport& r) {
  j = nlohmann::json{{"name", r.name},       {"value", r.value}, {"count_a", r.count_a},
                     {"count_b", r.count_b}, {"seed", r.seed}};
  if (r.directions) j["directions"] = *r.directions;
}

inline void from_json(const nlohmann::json& j, MetricReport& r) {
  j.at("name").get_to(r.name);
  j.at("value").get_to(r.value);
  r.count_a = j.value("count_a", std::size_t{0});
  r.count_b = j.value("count_b", std::size_t{0});
  r.seed = j.value("seed", std::uint64_t{0});
  if (j.contains("directions")) r.directions = j.at("directions").get<int>();
}

}  // namespace hjs
