#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <variant>
#include <vector>

#include "hjs/control_field.hpp"
#include "hjs/error.hpp"
#include "hjs/models.hpp"
#include "hjs/numerics.hpp"
#include "hjs/priors.hpp"
#include "hjs/rng.hpp"

namespace hjs {

enum class AnalyticKind { brownian_gaussian_mixture, brownian_uniform_mixture_1d, ou1d_gaussian };

inline const char* to_string(AnalyticKind k) {
  switch (k) {
    case AnalyticKind::brownian_gaussian_mixture:
      return "brownian_gaussian_mixture";
    case AnalyticKind::brownian_uniform_mixture_1d:
      return "brownian_uniform_mixture_1d";
    default:
      return "ou1d_gaussian";
  }
}

/// Largest control magnitude returned for a uniform-mixture prior.
inline constexpr double kControlClamp = 1e6;

// ---------------------------------------------------------------------------
// Exact posterior representations

/// 1D mixture of N(center, sd^2) restricted to the intervals of a uniform prior.
struct TruncatedNormalMixture {
  std::vector<UniformMixturePrior::Interval> intervals;
  Vector weights;  // posterior mass of each interval
  Vector prior_density;  // w_j / (b_j - a_j)
  double center = 0.0;
  double sd = 1.0;
  double log_evidence = 0.0;  // log of sum_j prior_density_j * (Phi(beta_j) - Phi(alpha_j))
};

/// 1D density tabulated on a uniform grid, exact pointwise through `log_unnormalized`.
struct GridDensity1D {
  Vector grid;
  Vector pdf;
  Vector cdf;
  double log_normalizer = 0.0;
  std::function<double(double)> log_unnormalized;
};

using ExactPosterior = std::variant<GaussianMixturePrior, TruncatedNormalMixture, GridDensity1D>;

// ---------------------------------------------------------------------------

/// A forward model and prior whose marginals P(Y_t = x) are known in closed form.
class AnalyticCase {
 public:
  /// Picks the matching case or rejects the combination.
  static AnalyticCase from(const SdeModel& model, const Prior& prior) {
    if (model.drift_kind() == DriftKind::zero) {
      require(model.unit_diffusion(), "AnalyticCase: Brownian cases need unit diffusion");
      if (const auto* g = std::get_if<GaussianMixturePrior>(&prior)) {
        require(g->dimension() == model.dimension(), "AnalyticCase: prior/model dimension mismatch");
        return AnalyticCase(AnalyticKind::brownian_gaussian_mixture, model, prior);
      }
      if (std::holds_alternative<UniformMixturePrior>(prior)) {
        require(model.dimension() == 1, "AnalyticCase: uniform mixture prior is one-dimensional");
        return AnalyticCase(AnalyticKind::brownian_uniform_mixture_1d, model, prior);
      }
      throw UnsupportedError("AnalyticCase: no closed form for this prior");
    }
    if (model.drift_kind() == DriftKind::linear && model.dimension() == 1) {
      require(model.unit_diffusion(), "AnalyticCase: OU case needs unit diffusion");
      const auto* g = std::get_if<GaussianMixturePrior>(&prior);
      if (!g) throw UnsupportedError("AnalyticCase: OU case needs a Gaussian prior");
      const auto& lin = std::get<LinearDrift>(model.drift_spec());
      const double T = model.horizon();
      const double a = lin.A(0.0)(0, 0);
      const double b = lin.beta(0.0)(0);
      for (double t : {0.25 * T, 0.5 * T, T})
        require(lin.A(t)(0, 0) == a && lin.beta(t)(0) == b, "AnalyticCase: OU coefficients must be constant");
      require(a < 0, "AnalyticCase: OU case needs A < 0");
      return AnalyticCase(AnalyticKind::ou1d_gaussian, model, prior);
    }
    throw UnsupportedError("AnalyticCase: no closed form for this model");
  }

  AnalyticKind kind() const noexcept { return kind_; }
  const SdeModel& model() const noexcept { return model_; }
  const Prior& prior() const noexcept { return prior_; }
  int dimension() const noexcept { return model_.dimension(); }

  /// log P(Y_t = x).
  double log_marginal(const Eigen::Ref<const Vector>& x, double t) const {
    require(x.size() == dimension(), "log_marginal: dimension mismatch");
    require(t >= 0 && t <= model_.horizon() * (1 + 1e-12), "log_marginal: t outside [0, T]");
    if (kind_ == AnalyticKind::brownian_uniform_mixture_1d) return uniform_log_marginal(x(0), t);
    const auto comps = gaussian_marginal(t);
    Vector terms(static_cast<Eigen::Index>(comps.size()));
    for (std::size_t i = 0; i < comps.size(); ++i) {
      const Vector z = comps[i].chol.matrixL().solve(x - comps[i].mean);
      terms(static_cast<Eigen::Index>(i)) = comps[i].log_offset - 0.5 * z.squaredNorm();
    }
    return num::log_sum_exp(terms);
  }

  /// grad_x S(x, tau) = eps * grad_x log P(Y_{T - tau} = x) for every column of X.
  void control_batch(const Eigen::Ref<const Matrix>& X, double tau, Eigen::Ref<Matrix> out) const {
    const double T = model_.horizon();
    require(X.rows() == dimension() && out.rows() == dimension() && out.cols() == X.cols(),
            "AnalyticCase::control: shape mismatch");
    require(tau >= 0 && tau < T, "AnalyticCase::control: tau must lie in [0, T)");
    const double t = T - tau;
    if (kind_ == AnalyticKind::brownian_uniform_mixture_1d) {
      for (Eigen::Index j = 0; j < X.cols(); ++j) out(0, j) = uniform_control(X(0, j), t);
      return;
    }
    detail::mixture_score(gaussian_marginal(t), X, model_.epsilon(), out);
  }

  Vector control(const Eigen::Ref<const Vector>& x, double tau) const {
    Matrix out(dimension(), 1);
    control_batch(x, tau, out);
    return out.col(0);
  }

  /// Components of P(Y_t) as weighted Gaussians (Gaussian-prior cases only).
  std::vector<detail::WeightedGaussian> gaussian_marginal(double t) const {
    const auto& g = std::get<GaussianMixturePrior>(prior_);
    const int n = dimension();
    const double eps = model_.epsilon();
    std::vector<detail::WeightedGaussian> out;
    out.reserve(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) {
      const auto& c = g.components()[i];
      Vector mean;
      Matrix cov;
      if (kind_ == AnalyticKind::brownian_gaussian_mixture) {
        mean = c.mean();
        cov = c.cov() + eps * t * Matrix::Identity(n, n);
      } else {
        const auto [m, v] = ou_moments(c.mean()(0), c.cov()(0, 0), t);
        mean = Vector::Constant(1, m);
        cov = Matrix::Constant(1, 1, v);
      }
      Eigen::LLT<Matrix> llt(cov);
      if (llt.info() != Eigen::Success) throw NumericalError("gaussian_marginal: covariance lost positivity");
      const double log_det = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
      const double off = std::log(g.weights()(static_cast<Eigen::Index>(i))) - 0.5 * log_det - n * num::kLogSqrt2Pi;
      out.push_back({std::move(mean), std::move(llt), off});
    }
    return out;
  }

  /// Mean and variance of Y_t for the 1D OU case started at N(m0, v0).
  std::pair<double, double> ou_moments(double m0, double v0, double t) const {
    const double a = ou_a(), b = ou_beta(), eps = model_.epsilon();
    const double e1 = std::exp(a * t);
    const double e2 = std::exp(2.0 * a * t);
    return {e1 * m0 + b * std::expm1(a * t) / a, e2 * v0 + eps * std::expm1(2.0 * a * t) / (2.0 * a)};
  }

  double ou_a() const { return std::get<LinearDrift>(model_.drift_spec()).A(0.0)(0, 0); }
  double ou_beta() const { return std::get<LinearDrift>(model_.drift_spec()).beta(0.0)(0); }

  double uniform_log_marginal(double x, double t) const {
    const auto& u = std::get<UniformMixturePrior>(prior_);
    if (t == 0.0) return u.log_density(Vector::Constant(1, x));
    const double sd = std::sqrt(model_.epsilon() * t);
    Vector terms(static_cast<Eigen::Index>(u.intervals().size()));
    for (std::size_t j = 0; j < u.intervals().size(); ++j) {
      const auto& iv = u.intervals()[j];
      terms(static_cast<Eigen::Index>(j)) = std::log(u.weights()(static_cast<Eigen::Index>(j)) / (iv.hi - iv.lo)) +
                                            num::log_normal_cdf_diff((x - iv.lo) / sd, (x - iv.hi) / sd);
    }
    return num::log_sum_exp(terms);
  }

  /// eps d/dx log P(Y_t = x) for the uniform mixture, ratio of density differences over
  /// Phi differences with a common log-domain shift.
  double uniform_control(double x, double t) const {
    const auto& u = std::get<UniformMixturePrior>(prior_);
    const double eps = model_.epsilon();
    const double sd = std::sqrt(eps * t);
    const std::size_t m = u.intervals().size();
    std::vector<double> lden(m), lpa(m), lpb(m);
    double shift = -num::kInf;
    for (std::size_t j = 0; j < m; ++j) {
      const auto& iv = u.intervals()[j];
      const double lc = std::log(u.weights()(static_cast<Eigen::Index>(j)) / (iv.hi - iv.lo));
      const double za = (x - iv.lo) / sd, zb = (x - iv.hi) / sd;
      lden[j] = lc + num::log_normal_cdf_diff(za, zb);
      lpa[j] = lc + num::normal_log_pdf(za);
      lpb[j] = lc + num::normal_log_pdf(zb);
      shift = std::max({shift, lden[j], lpa[j], lpb[j]});
    }
    double num_sum = 0.0, den_sum = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      num_sum += std::exp(lpa[j] - shift) - std::exp(lpb[j] - shift);
      den_sum += std::exp(lden[j] - shift);
    }
    double g = eps / sd * num_sum / den_sum;
    if (std::isnan(g)) throw NumericalError("uniform control: non-finite value at x = " + std::to_string(x));
    if (std::abs(g) > kControlClamp) {
      warn("uniform-mixture control clamped at x = " + std::to_string(x) + ", t = " + std::to_string(t));
      g = std::copysign(kControlClamp, g);
    }
    return g;
  }

 private:
  AnalyticCase(AnalyticKind k, SdeModel model, Prior prior)
      : kind_(k), model_(std::move(model)), prior_(std::move(prior)) {}

  AnalyticKind kind_;
  SdeModel model_;
  Prior prior_;
};

/// Control field of an analytic case.
class AnalyticControl final : public ControlField {
 public:
  explicit AnalyticControl(AnalyticCase c) : case_(std::move(c)) {}

  int dimension() const override { return case_.dimension(); }
  double horizon() const override { return case_.model().horizon(); }
  void evaluate_batch(const Eigen::Ref<const Matrix>& X, double tau, Eigen::Ref<Matrix> out) const override {
    case_.control_batch(X, tau, out);
  }
  const AnalyticCase& analytic_case() const noexcept { return case_; }

 private:
  AnalyticCase case_;
};

// ---------------------------------------------------------------------------
// Exact posteriors P(Y_t | Y_s = y_obs)

namespace detail {

inline ExactPosterior brownian_gmm_posterior(const AnalyticCase& c, double t, double s, const Vector& y) {
  const auto& g = std::get<GaussianMixturePrior>(c.prior());
  const int n = c.dimension();
  const double eps = c.model().epsilon();
  const double h = eps * (s - t);
  const Matrix I = Matrix::Identity(n, n);
  std::vector<GaussianComponent> comps;
  Vector logw(static_cast<Eigen::Index>(g.size()));
  for (std::size_t i = 0; i < g.size(); ++i) {
    const auto& ci = g.components()[i];
    const Matrix Ct = ci.cov() + eps * t * I;
    const Eigen::LLT<Matrix> lt(Ct);
    Matrix prec = lt.solve(I) + I / h;
    prec = 0.5 * (prec + prec.transpose());
    const Eigen::LLT<Matrix> lp(prec);
    Matrix M = lp.solve(I);
    M = 0.5 * (M + M.transpose());
    Vector v = M * (lt.solve(ci.mean()) + y / h);
    comps.emplace_back(std::move(v), std::move(M));
    const Eigen::LLT<Matrix> ls(Matrix(ci.cov() + eps * s * I));
    logw(static_cast<Eigen::Index>(i)) =
        std::log(g.weights()(static_cast<Eigen::Index>(i))) + num::mvn_log_pdf(y, ci.mean(), ls);
  }
  num::softmax_inplace(logw);
  logw /= logw.sum();
  return GaussianMixturePrior(std::move(comps), logw);
}

inline ExactPosterior ou_posterior(const AnalyticCase& c, double t, double s, double y) {
  const auto& g = std::get<GaussianMixturePrior>(c.prior());
  const double a = c.ou_a(), beta = c.ou_beta(), eps = c.model().epsilon();
  const double d = s - t;
  const double alpha = std::exp(a * d);
  const double var_step = eps * std::expm1(2.0 * a * d) / (2.0 * a);
  const double shift = beta * std::expm1(a * d) / a;
  std::vector<GaussianComponent> comps;
  Vector logw(static_cast<Eigen::Index>(g.size()));
  for (std::size_t i = 0; i < g.size(); ++i) {
    const auto& ci = g.components()[i];
    const auto [m, v] = c.ou_moments(ci.mean()(0), ci.cov()(0, 0), t);
    const double post_var = 1.0 / (1.0 / v + alpha * alpha / var_step);
    const double post_mean = post_var * (m / v + alpha * (y - shift) / var_step);
    comps.emplace_back(Vector::Constant(1, post_mean), Matrix::Constant(1, 1, post_var));
    const double ev = alpha * alpha * v + var_step;
    logw(static_cast<Eigen::Index>(i)) = std::log(g.weights()(static_cast<Eigen::Index>(i))) +
                                         num::normal_log_pdf((y - alpha * m - shift) / std::sqrt(ev)) -
                                         0.5 * std::log(ev);
  }
  num::softmax_inplace(logw);
  logw /= logw.sum();
  return GaussianMixturePrior(std::move(comps), logw);
}

inline TruncatedNormalMixture uniform_posterior_at_zero(const AnalyticCase& c, double s, double y) {
  const auto& u = std::get<UniformMixturePrior>(c.prior());
  TruncatedNormalMixture out;
  out.intervals = u.intervals();
  out.center = y;
  out.sd = std::sqrt(c.model().epsilon() * s);
  const auto m = static_cast<Eigen::Index>(u.intervals().size());
  out.prior_density.resize(m);
  Vector logw(m);
  for (Eigen::Index j = 0; j < m; ++j) {
    const auto& iv = u.intervals()[static_cast<std::size_t>(j)];
    out.prior_density(j) = u.weights()(j) / (iv.hi - iv.lo);
    logw(j) = std::log(out.prior_density(j)) + num::log_normal_cdf_diff((iv.hi - y) / out.sd, (iv.lo - y) / out.sd);
  }
  out.log_evidence = num::log_sum_exp(logw);
  if (!std::isfinite(out.log_evidence))
    throw NumericalError("exact_posterior: observation has negligible likelihood under the prior");
  num::softmax_inplace(logw);
  out.weights = logw;
  return out;
}

/// Tabulates p(theta) on [lo, hi] and builds a trapezoid CDF.
inline GridDensity1D tabulate(std::function<double(double)> log_unnorm, double log_norm, double lo, double hi,
                              int points) {
  GridDensity1D d;
  d.grid = Vector::LinSpaced(points, lo, hi);
  d.log_normalizer = log_norm;
  d.pdf.resize(points);
  for (int i = 0; i < points; ++i) d.pdf(i) = std::exp(log_unnorm(d.grid(i)) - log_norm);
  d.cdf.resize(points);
  d.cdf(0) = 0.0;
  const double h = (hi - lo) / (points - 1);
  for (int i = 1; i < points; ++i) d.cdf(i) = d.cdf(i - 1) + 0.5 * h * (d.pdf(i) + d.pdf(i - 1));
  d.log_unnormalized = std::move(log_unnorm);
  return d;
}

inline GridDensity1D uniform_posterior_on_grid(const AnalyticCase& c, double t, double s, double y) {
  const auto& u = std::get<UniformMixturePrior>(c.prior());
  const double eps = c.model().epsilon();
  const double sd_t = std::sqrt(eps * t);
  const double sd_h = std::sqrt(eps * (s - t));
  auto log_unnorm = [c, t, y, sd_h](double th) {
    return c.uniform_log_marginal(th, t) + num::normal_log_pdf((th - y) / sd_h) - std::log(sd_h);
  };
  const double log_norm = c.uniform_log_marginal(y, s);
  if (!std::isfinite(log_norm))
    throw NumericalError("exact_posterior: observation has negligible likelihood under the prior");

  // Coarse pass over everything that can carry mass, then refine around the bulk.
  double a_min = num::kInf, b_max = -num::kInf;
  for (const auto& iv : u.intervals()) {
    a_min = std::min(a_min, iv.lo);
    b_max = std::max(b_max, iv.hi);
  }
  const double lo0 = std::max(a_min - 10 * sd_t, y - 10 * sd_h);
  const double hi0 = std::min(b_max + 10 * sd_t, y + 10 * sd_h);
  const double lo1 = lo0 < hi0 ? lo0 : std::min(a_min - 10 * sd_t, y - 10 * sd_h);
  const double hi1 = lo0 < hi0 ? hi0 : std::max(b_max + 10 * sd_t, y + 10 * sd_h);
  const GridDensity1D coarse = tabulate(log_unnorm, log_norm, lo1, hi1, 1 << 16);
  const double mass = coarse.cdf(coarse.cdf.size() - 1);
  const double mean = (coarse.grid.array() * coarse.pdf.array()).sum() / coarse.pdf.sum();
  const double var = ((coarse.grid.array() - mean).square() * coarse.pdf.array()).sum() / coarse.pdf.sum();
  if (!(mass > 0) || !std::isfinite(mean) || !(var > 0))
    throw NumericalError("exact_posterior: could not locate the posterior bulk");
  const double sd = std::sqrt(var);
  return tabulate(std::function<double(double)>(log_unnorm), log_norm, mean - 8 * sd, mean + 8 * sd, 4096);
}

}  // namespace detail

/// P(Y_t | Y_s = y_obs) for 0 <= t < s <= T.
inline ExactPosterior exact_posterior(const AnalyticCase& c, double t, double s, const Eigen::Ref<const Vector>& y_obs) {
  require(y_obs.size() == c.dimension(), "exact_posterior: observation dimension mismatch");
  require(t >= 0 && t < s, "exact_posterior: need 0 <= t < s");
  require(s <= c.model().horizon() * (1 + 1e-12), "exact_posterior: s exceeds the horizon");
  const Vector y = y_obs;
  switch (c.kind()) {
    case AnalyticKind::brownian_gaussian_mixture:
      return detail::brownian_gmm_posterior(c, t, s, y);
    case AnalyticKind::ou1d_gaussian:
      return detail::ou_posterior(c, t, s, y(0));
    default:
      if (t == 0.0) return detail::uniform_posterior_at_zero(c, s, y(0));
      return detail::uniform_posterior_on_grid(c, t, s, y(0));
  }
}

/// Pointwise log-density of an exact posterior.
inline double posterior_log_density(const ExactPosterior& p, const Eigen::Ref<const Vector>& x) {
  return std::visit(
      [&](const auto& q) -> double {
        using Q = std::decay_t<decltype(q)>;
        if constexpr (std::is_same_v<Q, GaussianMixturePrior>) {
          return q.log_density(x);
        } else if constexpr (std::is_same_v<Q, TruncatedNormalMixture>) {
          double dens = 0.0;
          for (std::size_t j = 0; j < q.intervals.size(); ++j)
            if (x(0) >= q.intervals[j].lo && x(0) < q.intervals[j].hi) dens += q.prior_density(static_cast<Eigen::Index>(j));
          if (dens == 0.0) return -num::kInf;
          return std::log(dens) + num::normal_log_pdf((x(0) - q.center) / q.sd) - std::log(q.sd) - q.log_evidence;
        } else {
          return q.log_unnormalized(x(0)) - q.log_normalizer;
        }
      },
      p);
}

namespace detail {

/// Draw from N(0,1) restricted to [lo, hi).
inline double truncated_standard_normal(double lo, double hi, double u) {
  if (lo > 0) return -truncated_standard_normal(-hi, -lo, 1.0 - u);
  const double pa = num::normal_cdf(lo), pb = num::normal_cdf(hi);
  if (!(pb > pa)) throw NumericalError("truncated normal: interval carries no representable mass");
  const double z = num::normal_quantile(pa + u * (pb - pa));
  return std::clamp(z, lo, std::nextafter(hi, lo));
}

inline double grid_inverse_cdf(const GridDensity1D& d, double u) {
  const double total = d.cdf(d.cdf.size() - 1);
  const double target = u * total;
  const double* begin = d.cdf.data();
  const double* end = begin + d.cdf.size();
  auto it = std::upper_bound(begin, end, target);
  auto i = static_cast<Eigen::Index>(it - begin);
  if (i <= 0) return d.grid(0);
  if (i >= d.grid.size()) return d.grid(d.grid.size() - 1);
  const double c0 = d.cdf(i - 1), c1 = d.cdf(i);
  const double w = c1 > c0 ? (target - c0) / (c1 - c0) : 0.5;
  return d.grid(i - 1) + w * (d.grid(i) - d.grid(i - 1));
}

}  // namespace detail

/// `count` i.i.d. draws from an exact posterior, one per column.
inline SampleSet exact_posterior_sample(const ExactPosterior& p, std::size_t count, std::uint64_t seed) {
  require(count >= 1, "exact_posterior_sample: count must be positive");
  if (const auto* g = std::get_if<GaussianMixturePrior>(&p)) return sample(Prior(*g), count, seed);
  SampleSet out(1, static_cast<Eigen::Index>(count));
  parallel_for_chunks(count, 4096, [&](std::size_t begin, std::size_t end) {
    for (std::size_t j = begin; j < end; ++j) {
      NormalStream s(seed, j);
      double x;
      if (const auto* tn = std::get_if<TruncatedNormalMixture>(&p)) {
        const auto k = tn->weights.size() == 1 ? 0 : detail::draw_categorical(tn->weights, s.uniform());
        const auto& iv = tn->intervals[k];
        x = tn->center + tn->sd * detail::truncated_standard_normal((iv.lo - tn->center) / tn->sd,
                                                                    (iv.hi - tn->center) / tn->sd, s.uniform());
      } else {
        x = detail::grid_inverse_cdf(std::get<GridDensity1D>(p), s.uniform());
      }
      out(0, static_cast<Eigen::Index>(j)) = x;
    }
  });
  return out;
}

}  // namespace hjs
