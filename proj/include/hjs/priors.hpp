#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <numbers>
#include <utility>
#include <variant>
#include <vector>

#include "hjs/error.hpp"
#include "hjs/models.hpp"
#include "hjs/numerics.hpp"
#include "hjs/rng.hpp"

namespace hjs {

/// N(mean, cov) with a cached Cholesky factor.
class GaussianComponent {
 public:
  GaussianComponent(Vector mean, Matrix cov) : mean_(std::move(mean)), cov_(std::move(cov)) {
    require(mean_.size() > 0, "GaussianComponent: empty mean");
    require(cov_.rows() == mean_.size() && cov_.cols() == mean_.size(),
            "GaussianComponent: covariance shape mismatch");
    require(mean_.allFinite() && cov_.allFinite(), "GaussianComponent: non-finite parameters");
    require(num::asymmetry(cov_) <= 1e-12, "GaussianComponent: covariance not symmetric");
    chol_.compute(cov_);
    require(chol_.info() == Eigen::Success, "GaussianComponent: covariance not positive definite");
  }

  int dimension() const noexcept { return static_cast<int>(mean_.size()); }
  const Vector& mean() const noexcept { return mean_; }
  const Matrix& cov() const noexcept { return cov_; }
  const Eigen::LLT<Matrix>& chol() const noexcept { return chol_; }

  double log_density(const Eigen::Ref<const Vector>& x) const { return num::mvn_log_pdf(x, mean_, chol_); }

  template <class Normal>
  Vector draw(Normal& normal) const {
    Vector z(mean_.size());
    for (Eigen::Index i = 0; i < z.size(); ++i) z(i) = normal();
    return mean_ + chol_.matrixL() * z;
  }

 private:
  Vector mean_;
  Matrix cov_;
  Eigen::LLT<Matrix> chol_;
};

namespace detail {

inline void check_weights(const Vector& w, std::size_t count, const char* who) {
  require(static_cast<std::size_t>(w.size()) == count && count > 0,
          std::string(who) + ": need one weight per component");
  require((w.array() > 0).all() && w.allFinite(), std::string(who) + ": weights must be positive");
  require(std::abs(w.sum() - 1.0) <= 1e-12, std::string(who) + ": weights must sum to 1");
}

/// Index drawn from a discrete law with the given (normalized) weights.
inline std::size_t draw_categorical(const Vector& w, double u) {
  double acc = 0.0;
  for (Eigen::Index j = 0; j + 1 < w.size(); ++j) {
    acc += w(j);
    if (u < acc) return static_cast<std::size_t>(j);
  }
  return static_cast<std::size_t>(w.size() - 1);
}

}  // namespace detail

/// sum_j w_j N(theta_j, Sigma_j).
class GaussianMixturePrior {
 public:
  GaussianMixturePrior(std::vector<GaussianComponent> components, Vector weights)
      : components_(std::move(components)), weights_(std::move(weights)) {
    detail::check_weights(weights_, components_.size(), "GaussianMixturePrior");
    for (const auto& c : components_)
      require(c.dimension() == components_.front().dimension(),
              "GaussianMixturePrior: components differ in dimension");
  }

  /// Single Gaussian.
  explicit GaussianMixturePrior(GaussianComponent c)
      : GaussianMixturePrior(std::vector<GaussianComponent>{std::move(c)}, Vector::Ones(1)) {}

  int dimension() const noexcept { return components_.front().dimension(); }
  std::size_t size() const noexcept { return components_.size(); }
  const std::vector<GaussianComponent>& components() const noexcept { return components_; }
  const Vector& weights() const noexcept { return weights_; }

  double log_density(const Eigen::Ref<const Vector>& x) const {
    Vector terms(static_cast<Eigen::Index>(size()));
    for (std::size_t j = 0; j < size(); ++j)
      terms(static_cast<Eigen::Index>(j)) =
          std::log(weights_(static_cast<Eigen::Index>(j))) + components_[j].log_density(x);
    return num::log_sum_exp(terms);
  }

  Vector draw(NormalStream& s) const {
    const auto j = size() == 1 ? 0 : detail::draw_categorical(weights_, s.uniform());
    return components_[j].draw(s);
  }

 private:
  std::vector<GaussianComponent> components_;
  Vector weights_;
};

/// 1D mixture of uniform laws on half-open intervals [a_j, b_j).
class UniformMixturePrior {
 public:
  struct Interval {
    double lo;
    double hi;
  };

  UniformMixturePrior(std::vector<Interval> intervals, Vector weights)
      : intervals_(std::move(intervals)), weights_(std::move(weights)) {
    detail::check_weights(weights_, intervals_.size(), "UniformMixturePrior");
    for (const auto& iv : intervals_)
      require(std::isfinite(iv.lo) && std::isfinite(iv.hi) && iv.lo < iv.hi,
              "UniformMixturePrior: intervals must satisfy a < b");
  }

  int dimension() const noexcept { return 1; }
  const std::vector<Interval>& intervals() const noexcept { return intervals_; }
  const Vector& weights() const noexcept { return weights_; }

  double log_density(const Eigen::Ref<const Vector>& x) const {
    require(x.size() == 1, "UniformMixturePrior: one-dimensional");
    double p = 0.0;
    for (std::size_t j = 0; j < intervals_.size(); ++j) {
      const auto& iv = intervals_[j];
      if (x(0) >= iv.lo && x(0) < iv.hi) p += weights_(static_cast<Eigen::Index>(j)) / (iv.hi - iv.lo);
    }
    return p > 0 ? std::log(p) : -num::kInf;
  }

  Vector draw(NormalStream& s) const {
    const auto j = intervals_.size() == 1 ? 0 : detail::draw_categorical(weights_, s.uniform());
    const auto& iv = intervals_[j];
    return Vector::Constant(1, iv.lo + (iv.hi - iv.lo) * s.uniform());
  }

 private:
  std::vector<Interval> intervals_;
  Vector weights_;
};

/// Independent coordinates, log Y_i ~ N(location_i, scale_i^2).
class LogNormalPrior {
 public:
  LogNormalPrior(Vector location, Vector scale) : loc_(std::move(location)), scale_(std::move(scale)) {
    require(loc_.size() > 0 && loc_.size() == scale_.size(), "LogNormalPrior: shape mismatch");
    require((scale_.array() > 0).all(), "LogNormalPrior: scales must be positive");
  }

  int dimension() const noexcept { return static_cast<int>(loc_.size()); }
  const Vector& location() const noexcept { return loc_; }
  const Vector& scale() const noexcept { return scale_; }

  double log_density(const Eigen::Ref<const Vector>& x) const {
    require(x.size() == loc_.size(), "LogNormalPrior: dimension mismatch");
    double lp = 0.0;
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      if (!(x(i) > 0)) return -num::kInf;
      const double z = (std::log(x(i)) - loc_(i)) / scale_(i);
      lp += num::normal_log_pdf(z) - std::log(scale_(i)) - std::log(x(i));
    }
    return lp;
  }

  Vector draw(NormalStream& s) const {
    Vector y(loc_.size());
    for (Eigen::Index i = 0; i < y.size(); ++i) y(i) = std::exp(loc_(i) + scale_(i) * s());
    return y;
  }

 private:
  Vector loc_;
  Vector scale_;
};

/// Grid values of f(x) = (1/16) sum_{j=1..8} xi_j sin(j pi x), xi_j ~ U[1, 3).
class FunctionSeriesPrior {
 public:
  static constexpr int kTerms = 8;
  static constexpr double kCoefLo = 1.0;
  static constexpr double kCoefHi = 3.0;
  static constexpr double kScale = 1.0 / 16.0;

  /// n grid points spaced uniformly on [0, 1], endpoints included.
  explicit FunctionSeriesPrior(int n) : grid_(Vector::LinSpaced(n, 0.0, 1.0)) {
    require(n >= 2, "FunctionSeriesPrior: need at least two grid points");
    basis_.resize(n, kTerms);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < kTerms; ++j) basis_(i, j) = kScale * std::sin((j + 1) * std::numbers::pi * grid_(i));
  }

  int dimension() const noexcept { return static_cast<int>(grid_.size()); }
  const Vector& grid() const noexcept { return grid_; }

  /// Function values for explicit coefficients.
  Vector evaluate(const Eigen::Ref<const Vector>& coefs) const {
    require(coefs.size() == kTerms, "FunctionSeriesPrior: need 8 coefficients");
    return basis_ * coefs;
  }

  Vector draw(NormalStream& s) const {
    Vector xi(kTerms);
    for (int j = 0; j < kTerms; ++j) xi(j) = kCoefLo + (kCoefHi - kCoefLo) * s.uniform();
    return basis_ * xi;
  }

 private:
  Vector grid_;
  Matrix basis_;
};

using Prior = std::variant<GaussianMixturePrior, UniformMixturePrior, LogNormalPrior, FunctionSeriesPrior>;

inline int prior_dimension(const Prior& p) {
  return std::visit([](const auto& q) { return q.dimension(); }, p);
}

/// `count` i.i.d. draws, one per column. Draw j uses stream_seed(seed, j).
inline SampleSet sample(const Prior& prior, std::size_t count, std::uint64_t seed) {
  require(count >= 1, "sample: count must be positive");
  const int n = prior_dimension(prior);
  SampleSet out(n, static_cast<Eigen::Index>(count));
  parallel_for_chunks(count, 4096, [&](std::size_t begin, std::size_t end) {
    for (std::size_t j = begin; j < end; ++j) {
      NormalStream s(seed, j);
      out.col(static_cast<Eigen::Index>(j)) = std::visit([&](const auto& q) { return q.draw(s); }, prior);
    }
  });
  return out;
}

/// Exact log-density. Not available for the function-series prior.
inline double log_density(const Prior& prior, const Eigen::Ref<const Vector>& x) {
  return std::visit(
      [&](const auto& q) -> double {
        using Q = std::decay_t<decltype(q)>;
        if constexpr (std::is_same_v<Q, FunctionSeriesPrior>) {
          throw UnsupportedError("log_density: the function-series prior has no density here");
        } else {
          require(x.size() == q.dimension(), "log_density: dimension mismatch");
          return q.log_density(x);
        }
      },
      prior);
}

}  // namespace hjs
