#pragma once

#include <Eigen/Dense>
#include <boost/math/special_functions/erf.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <span>

namespace hjs::num {

inline constexpr double kInf = std::numeric_limits<double>::infinity();
inline constexpr double kLogSqrt2Pi = 0.91893853320467274178;  // log(sqrt(2 pi))

/// log(sum_i exp(v_i)) with max-shift; -inf for an empty or all -inf input.
inline double log_sum_exp(std::span<const double> v) {
  double m = -kInf;
  for (double x : v) m = std::max(m, x);
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

inline double log_sum_exp(const Eigen::Ref<const Eigen::VectorXd>& v) {
  return log_sum_exp(std::span<const double>(v.data(), static_cast<std::size_t>(v.size())));
}

/// In-place softmax of logits; returns the log normalizer.
inline double softmax_inplace(Eigen::Ref<Eigen::VectorXd> logits) {
  const double lse = log_sum_exp(logits);
  logits = (logits.array() - lse).exp();
  return lse;
}

inline double normal_log_pdf(double z) { return -0.5 * z * z - kLogSqrt2Pi; }
inline double normal_pdf(double z) { return std::exp(normal_log_pdf(z)); }
inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }

/// log Phi(z), accurate far into the lower tail.
inline double log_normal_cdf(double z) {
  if (z > 0) return std::log1p(-0.5 * std::erfc(z / std::numbers::sqrt2));
  const double u = -z / std::numbers::sqrt2;
  if (u < 25.0) return std::log(0.5 * std::erfc(u));
  // erfc(u) ~ exp(-u^2) / (u sqrt(pi)) * (1 - 1/(2u^2) + 3/(4u^4) - 15/(8u^6))
  const double w = 1.0 / (2.0 * u * u);
  const double series = 1.0 - w + 3.0 * w * w - 15.0 * w * w * w;
  return -u * u - std::log(u * std::sqrt(std::numbers::pi)) + std::log(series) - std::numbers::ln2;
}

/// log(Phi(a) - Phi(b)) for a >= b, without cancellation in either tail.
inline double log_normal_cdf_diff(double a, double b) {
  if (!(a > b)) return -kInf;
  if (b >= 0) return log_normal_cdf_diff(-b, -a);
  if (a <= 0) {
    const double la = log_normal_cdf(a);
    const double lb = log_normal_cdf(b);
    return la + std::log1p(-std::exp(lb - la));
  }
  // b < 0 < a: both tails are small, the difference is at least Phi(a) - 1/2.
  const double tails = 0.5 * std::erfc(a / std::numbers::sqrt2) + 0.5 * std::erfc(-b / std::numbers::sqrt2);
  return std::log1p(-tails);
}

/// Standard normal quantile.
inline double normal_quantile(double p) {
  if (p <= 0) return -kInf;
  if (p >= 1) return kInf;
  return -std::numbers::sqrt2 * boost::math::erfc_inv(2.0 * p);
}

/// Log-density of N(mean, cov) at x given the Cholesky factor of cov.
inline double mvn_log_pdf(const Eigen::Ref<const Eigen::VectorXd>& x,
                          const Eigen::Ref<const Eigen::VectorXd>& mean,
                          const Eigen::LLT<Eigen::MatrixXd>& chol) {
  const Eigen::VectorXd z = chol.matrixL().solve(x - mean);
  const double log_det = 2.0 * chol.matrixLLT().diagonal().array().log().sum();
  return -0.5 * z.squaredNorm() - 0.5 * log_det - static_cast<double>(x.size()) * kLogSqrt2Pi;
}

/// Max absolute asymmetry of a square matrix.
inline double asymmetry(const Eigen::Ref<const Eigen::MatrixXd>& m) {
  return (m - m.transpose()).cwiseAbs().maxCoeff();
}

}  // namespace hjs::num
