#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <ostream>
#include <string>
#include <vector>

#include "hjs/control_field.hpp"
#include "hjs/error.hpp"
#include "hjs/models.hpp"
#include "hjs/numerics.hpp"
#include "hjs/parallel.hpp"
#include "hjs/priors.hpp"

namespace hjs {

/// (Q, q, r) trajectories of one mixture component, stored at the nodes of a TimeGrid.
struct RiccatiTrajectory {
  std::vector<Matrix> Q;
  std::vector<Vector> q;
  std::vector<double> r;
};

struct RiccatiSolution {
  TimeGrid grid;
  double epsilon = 1.0;
  int dimension = 0;
  Vector weights;
  std::vector<RiccatiTrajectory> components;

  double horizon() const noexcept { return grid.end(); }

  /// Linearly interpolated (Q, q, r) of component j at forward time t.
  void interpolate(std::size_t j, double t, Matrix& Q, Vector& q, double& r) const {
    require(t >= -1e-12 && t <= horizon() * (1 + 1e-12) + 1e-12, "RiccatiSolution: time outside coverage");
    const double u = std::clamp(t / grid.dt, 0.0, static_cast<double>(grid.steps));
    auto k = static_cast<std::size_t>(std::floor(u));
    if (k >= grid.steps) k = grid.steps - 1;
    const double w = u - static_cast<double>(k);
    const auto& c = components[j];
    Q = (1 - w) * c.Q[k] + w * c.Q[k + 1];
    q = (1 - w) * c.q[k] + w * c.q[k + 1];
    r = (1 - w) * c.r[k] + w * c.r[k + 1];
  }
};

/// Integrates dQ = D + Q A^T + A Q, dq = A q + beta, dr = (eps/2) Tr(2A + D Q^{-1}) by explicit Euler
/// for every prior component, keeping values at the nodes of `grid`.
inline RiccatiSolution solve_riccati(const SdeModel& model, const GaussianMixturePrior& prior, double ode_step,
                                     const TimeGrid& grid) {
  require(model.drift_kind() != DriftKind::general, "solve_riccati: drift must be linear");
  require(prior.dimension() == model.dimension(), "solve_riccati: prior/model dimension mismatch");
  require(ode_step > 0 && ode_step <= grid.dt * (1 + 1e-12), "solve_riccati: need 0 < ode_step <= grid.dt");
  require(std::abs(grid.t0) <= 1e-12, "solve_riccati: grid must start at 0");
  require(std::abs(grid.end() - model.horizon()) <= 1e-9 * std::max(1.0, model.horizon()),
          "solve_riccati: grid must end at the horizon");
  const auto sub = static_cast<std::size_t>(std::llround(grid.dt / ode_step));
  require(sub >= 1 && std::abs(static_cast<double>(sub) * ode_step - grid.dt) <= 1e-9 * grid.dt,
          "solve_riccati: ode_step must divide grid.dt");
  const double h = grid.dt / static_cast<double>(sub);

  const int n = model.dimension();
  const double eps = model.epsilon();
  const Matrix& D = model.diffusion();
  const bool zero = model.drift_kind() == DriftKind::zero;
  const LinearDrift* lin = zero ? nullptr : &std::get<LinearDrift>(model.drift_spec());

  RiccatiSolution sol;
  sol.grid = grid;
  sol.epsilon = eps;
  sol.dimension = n;
  sol.weights = prior.weights();
  sol.components.resize(prior.size());

  parallel_for_chunks(prior.size(), 1, [&](std::size_t begin, std::size_t end) {
    for (std::size_t j = begin; j < end; ++j) {
      const auto& pc = prior.components()[j];
      auto& tr = sol.components[j];
      tr.Q.reserve(grid.steps + 1);
      tr.q.reserve(grid.steps + 1);
      tr.r.reserve(grid.steps + 1);
      Matrix Q = pc.cov() / eps;
      Vector q = pc.mean();
      const double log_det = 2.0 * pc.chol().matrixLLT().diagonal().array().log().sum();
      double r = n * eps * num::kLogSqrt2Pi + 0.5 * eps * log_det;
      tr.Q.push_back(Q);
      tr.q.push_back(q);
      tr.r.push_back(r);
      Matrix A = Matrix::Zero(n, n), dQ(n, n);
      Vector beta = Vector::Zero(n);
      Eigen::LLT<Matrix> llt(n);
      for (std::size_t k = 0; k < grid.steps; ++k) {
        for (std::size_t m = 0; m < sub; ++m) {
          const double t = grid.node(k) + static_cast<double>(m) * h;
          if (lin) {
            A = lin->A(t);
            beta = lin->beta(t);
          }
          llt.compute(Q);
          if (llt.info() != Eigen::Success)
            throw NumericalError("solve_riccati: Q lost positive definiteness in component " + std::to_string(j) +
                                 " at t = " + std::to_string(t));
          const double tr_dqinv = llt.solve(D).trace();
          dQ.noalias() = Q * A.transpose();
          dQ += A * Q;
          dQ += D;
          r += h * 0.5 * eps * (2.0 * A.trace() + tr_dqinv);
          q += h * (A * q + beta);
          Q += h * dQ;
          Q = 0.5 * (Q + Q.transpose()).eval();
        }
        llt.compute(Q);
        if (llt.info() != Eigen::Success || !Q.allFinite() || !q.allFinite() || !std::isfinite(r))
          throw NumericalError("solve_riccati: Q lost positive definiteness in component " + std::to_string(j) +
                               " at t = " + std::to_string(grid.node(k + 1)));
        tr.Q.push_back(Q);
        tr.q.push_back(q);
        tr.r.push_back(r);
      }
    }
  });
  return sol;
}

/// Mixture control -sum_j p_j Q_j^{-1}(x - q_j) at forward time T - tau.
class RiccatiControl final : public ControlField {
 public:
  explicit RiccatiControl(RiccatiSolution sol) : sol_(std::move(sol)) {}

  int dimension() const override { return sol_.dimension; }
  double horizon() const override { return sol_.horizon(); }
  const RiccatiSolution& solution() const noexcept { return sol_; }

  void evaluate_batch(const Eigen::Ref<const Matrix>& X, double tau, Eigen::Ref<Matrix> out) const override {
    require(X.rows() == dimension() && out.rows() == dimension() && out.cols() == X.cols(),
            "RiccatiControl: shape mismatch");
    require(tau >= 0 && tau <= horizon() * (1 + 1e-12), "RiccatiControl: tau outside [0, T]");
    detail::mixture_score(components_at(horizon() - tau), X, sol_.epsilon, out);
  }

  /// Softmax weights p_j(x, tau), one row per component.
  Matrix responsibilities(const Eigen::Ref<const Matrix>& X, double tau) const {
    require(tau >= 0 && tau <= horizon() * (1 + 1e-12), "RiccatiControl: tau outside [0, T]");
    return detail::mixture_responsibilities(components_at(horizon() - tau), X);
  }

 private:
  /// Gaussian terms with covariance eps Q_j and log weight log w_j - r_j / eps.
  std::vector<detail::WeightedGaussian> components_at(double t) const {
    std::vector<detail::WeightedGaussian> out;
    out.reserve(sol_.components.size());
    Matrix Q;
    Vector q;
    double r;
    for (std::size_t j = 0; j < sol_.components.size(); ++j) {
      sol_.interpolate(j, std::max(t, 0.0), Q, q, r);
      Eigen::LLT<Matrix> llt(sol_.epsilon * Q);
      if (llt.info() != Eigen::Success) throw NumericalError("RiccatiControl: interpolated Q not positive definite");
      out.push_back({q, std::move(llt), std::log(sol_.weights(static_cast<Eigen::Index>(j))) - r / sol_.epsilon});
    }
    return out;
  }

  RiccatiSolution sol_;
};

/// CSV with header `component,k,t,Q11,Q12,..,Qnn,q1..qn,r`.
inline void write_riccati_csv(std::ostream& os, const RiccatiSolution& sol) {
  const int n = sol.dimension;
  os << "component,k,t";
  for (int a = 1; a <= n; ++a)
    for (int b = 1; b <= n; ++b) os << ",Q" << a << b;
  for (int a = 1; a <= n; ++a) os << ",q" << a;
  os << ",r\n";
  os.precision(17);
  for (std::size_t j = 0; j < sol.components.size(); ++j) {
    const auto& c = sol.components[j];
    for (std::size_t k = 0; k < c.Q.size(); ++k) {
      os << j << ',' << k << ',' << sol.grid.node(k);
      for (int a = 0; a < n; ++a)
        for (int b = 0; b < n; ++b) os << ',' << c.Q[k](a, b);
      for (int a = 0; a < n; ++a) os << ',' << c.q[k](a);
      os << ',' << c.r[k] << '\n';
    }
  }
}

}  // namespace hjs
