#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "hjs/error.hpp"
#include "hjs/parallel.hpp"
#include "hjs/rng.hpp"

namespace hjs {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
/// A set of samples in R^n stored one per column.
using SampleSet = Eigen::MatrixXd;

// ---------------------------------------------------------------------------
// Drift specifications

struct ZeroDrift {};

/// b(x, t) = A(t) x + beta(t).
struct LinearDrift {
  std::function<Matrix(double)> A;
  std::function<Vector(double)> beta;
};

/// Arbitrary b(x, t), evaluated column by column.
struct GeneralDrift {
  std::function<void(const Eigen::Ref<const Vector>& x, double t, Eigen::Ref<Vector> out)> eval;
};

using DriftSpec = std::variant<ZeroDrift, LinearDrift, GeneralDrift>;

enum class DriftKind { zero, linear, general };

/// Forward model dY = b(Y, t) dt + sqrt(eps) sigma dW on [0, T].
///
/// sigma is a constant n x n factor (identity unless given); D = sigma sigma^T.
class SdeModel {
 public:
  SdeModel(int dimension, double epsilon, double horizon, DriftSpec drift = ZeroDrift{},
           std::optional<Matrix> sigma = std::nullopt)
      : n_(dimension), eps_(epsilon), horizon_(horizon), drift_(std::move(drift)) {
    require(n_ > 0, "SdeModel: dimension must be positive");
    require(eps_ > 0 && std::isfinite(eps_), "SdeModel: epsilon must be positive");
    require(horizon_ > 0 && std::isfinite(horizon_), "SdeModel: horizon must be positive");
    if (sigma) {
      require(sigma->rows() == n_ && sigma->cols() == n_, "SdeModel: sigma must be n x n");
      sigma_ = *sigma;
      unit_diffusion_ = (sigma_ - Matrix::Identity(n_, n_)).cwiseAbs().maxCoeff() == 0.0;
    } else {
      sigma_ = Matrix::Identity(n_, n_);
    }
    diffusion_ = sigma_ * sigma_.transpose();
    if (auto* lin = std::get_if<LinearDrift>(&drift_)) {
      require(static_cast<bool>(lin->A), "SdeModel: linear drift needs A(t)");
      if (!lin->beta) lin->beta = [n = n_](double) { return Vector::Zero(n); };
    }
  }

  static SdeModel brownian(int n, double eps, double horizon) {
    return SdeModel(n, eps, horizon, ZeroDrift{});
  }

  /// Constant-coefficient linear drift A x + beta.
  static SdeModel linear(double eps, double horizon, Matrix A, Vector beta = {},
                         std::optional<Matrix> sigma = std::nullopt) {
    const int n = static_cast<int>(A.rows());
    require(A.cols() == n, "SdeModel::linear: A must be square");
    if (beta.size() == 0) beta = Vector::Zero(n);
    require(beta.size() == n, "SdeModel::linear: beta dimension mismatch");
    LinearDrift d{[A](double) { return A; }, [beta](double) { return beta; }};
    return SdeModel(n, eps, horizon, std::move(d), std::move(sigma));
  }

  int dimension() const noexcept { return n_; }
  double epsilon() const noexcept { return eps_; }
  double horizon() const noexcept { return horizon_; }
  const DriftSpec& drift_spec() const noexcept { return drift_; }
  DriftKind drift_kind() const noexcept { return static_cast<DriftKind>(drift_.index()); }

  const Matrix& sigma() const noexcept { return sigma_; }
  const Matrix& diffusion() const noexcept { return diffusion_; }
  bool unit_diffusion() const noexcept { return unit_diffusion_; }

  Vector drift(const Eigen::Ref<const Vector>& x, double t) const {
    require(x.size() == n_, "SdeModel::drift: dimension mismatch");
    Matrix out(n_, 1);
    drift_batch(x, t, out);
    return out.col(0);
  }

  /// Column-wise drift of every sample in X (n x N) at time t.
  void drift_batch(const Eigen::Ref<const Matrix>& X, double t, Eigen::Ref<Matrix> out) const {
    std::visit(
        [&](const auto& d) {
          using D = std::decay_t<decltype(d)>;
          if constexpr (std::is_same_v<D, ZeroDrift>) {
            out.setZero();
          } else if constexpr (std::is_same_v<D, LinearDrift>) {
            out.noalias() = d.A(t) * X;
            out.colwise() += d.beta(t);
          } else {
            Vector tmp(n_);
            for (Eigen::Index j = 0; j < X.cols(); ++j) {
              d.eval(X.col(j), t, tmp);
              out.col(j) = tmp;
            }
          }
        },
        drift_);
  }

 private:
  int n_;
  double eps_;
  double horizon_;
  DriftSpec drift_;
  Matrix sigma_;
  Matrix diffusion_;
  bool unit_diffusion_ = true;
};

/// div_x b(x, t): zero for Brownian motion, Tr A(t) for linear drifts.
inline double drift_divergence(const SdeModel& model, const Eigen::Ref<const Vector>& x, double t) {
  require(x.size() == model.dimension(), "drift_divergence: dimension mismatch");
  switch (model.drift_kind()) {
    case DriftKind::zero:
      return 0.0;
    case DriftKind::linear:
      return std::get<LinearDrift>(model.drift_spec()).A(t).trace();
    default:
      throw UnsupportedError("drift_divergence: not available for a general drift");
  }
}

// ---------------------------------------------------------------------------
// Time grids and ensembles

struct TimeGrid {
  double t0 = 0.0;
  double dt = 0.01;
  std::size_t steps = 100;

  double node(std::size_t k) const noexcept { return t0 + static_cast<double>(k) * dt; }
  double end() const noexcept { return node(steps); }

  /// Uniform grid on [t0, t1] with step closest to dt that divides the span.
  static TimeGrid covering(double t0, double t1, double dt) {
    require(dt > 0 && t1 > t0, "TimeGrid::covering: need dt > 0 and t1 > t0");
    const auto steps = static_cast<std::size_t>(std::llround((t1 - t0) / dt));
    require(steps >= 1, "TimeGrid::covering: span shorter than one step");
    require(std::abs(static_cast<double>(steps) * dt - (t1 - t0)) <= 1e-9 * std::max(1.0, t1 - t0),
            "TimeGrid::covering: dt does not divide the span");
    return TimeGrid{t0, dt, steps};
  }

  /// Index of the node equal to t (within rounding), if any.
  std::optional<std::size_t> index_of(double t) const noexcept {
    const double r = (t - t0) / dt;
    const auto k = std::llround(r);
    if (k < 0 || static_cast<std::size_t>(k) > steps) return std::nullopt;
    if (std::abs(r - static_cast<double>(k)) > 1e-6) return std::nullopt;
    return static_cast<std::size_t>(k);
  }
};

/// A batch of sample paths on a time grid.
///
/// Only the grid nodes listed in `nodes()` are stored (all of them for dense ensembles).
/// Each stored slice is a contiguous n x N column-major block, so slices are cheap views.
class PathEnsemble {
 public:
  PathEnsemble() = default;
  PathEnsemble(TimeGrid grid, std::vector<std::size_t> nodes, int dimension, std::size_t paths,
               std::uint64_t seed)
      : grid_(grid),
        nodes_(std::move(nodes)),
        n_(dimension),
        paths_(paths),
        seed_(seed),
        values_(nodes_.size() * paths * static_cast<std::size_t>(dimension), 0.0) {}

  static PathEnsemble dense(TimeGrid grid, int dimension, std::size_t paths, std::uint64_t seed) {
    std::vector<std::size_t> nodes(grid.steps + 1);
    for (std::size_t k = 0; k <= grid.steps; ++k) nodes[k] = k;
    return PathEnsemble(grid, std::move(nodes), dimension, paths, seed);
  }

  const TimeGrid& grid() const noexcept { return grid_; }
  const std::vector<std::size_t>& nodes() const noexcept { return nodes_; }
  int dimension() const noexcept { return n_; }
  std::size_t paths() const noexcept { return paths_; }
  std::size_t slots() const noexcept { return nodes_.size(); }
  std::uint64_t seed() const noexcept { return seed_; }
  bool is_dense() const noexcept { return nodes_.size() == grid_.steps + 1; }

  /// Storage slot of grid node k, if stored.
  std::optional<std::size_t> slot_of_node(std::size_t k) const noexcept {
    if (is_dense()) return k <= grid_.steps ? std::optional<std::size_t>(k) : std::nullopt;
    for (std::size_t s = 0; s < nodes_.size(); ++s)
      if (nodes_[s] == k) return s;
    return std::nullopt;
  }

  double time_of_slot(std::size_t slot) const noexcept { return grid_.node(nodes_[slot]); }

  Eigen::Map<const Matrix> slice(std::size_t slot) const {
    return {values_.data() + offset(slot, 0), n_, static_cast<Eigen::Index>(paths_)};
  }
  Eigen::Map<Matrix> slice(std::size_t slot) {
    return {values_.data() + offset(slot, 0), n_, static_cast<Eigen::Index>(paths_)};
  }

  /// State of path j at storage slot `slot`.
  Eigen::Map<const Vector> at(std::size_t path, std::size_t slot) const {
    return {values_.data() + offset(slot, path), n_};
  }

 private:
  std::size_t offset(std::size_t slot, std::size_t path) const noexcept {
    return (slot * paths_ + path) * static_cast<std::size_t>(n_);
  }

  TimeGrid grid_{};
  std::vector<std::size_t> nodes_;
  int n_ = 0;
  std::size_t paths_ = 0;
  std::uint64_t seed_ = 0;
  std::vector<double> values_;
};

struct SimulationOptions {
  /// Replace every Gaussian increment by zero (deterministic Euler; used by tests).
  bool suppress_noise = false;
  /// Paths advanced together; does not affect results.
  std::size_t block_size = 512;
};

namespace detail {

inline void fill_noise(std::vector<NormalStream>& streams, Eigen::Ref<Matrix> xi, bool suppress) {
  if (suppress) {
    xi.setZero();
    return;
  }
  for (Eigen::Index j = 0; j < xi.cols(); ++j) {
    auto& s = streams[static_cast<std::size_t>(j)];
    for (Eigen::Index i = 0; i < xi.rows(); ++i) xi(i, j) = s();
  }
}

inline void check_finite_block(const Eigen::Ref<const Matrix>& X, std::size_t first_path,
                               std::size_t step, const char* what) {
  if (X.allFinite()) return;
  for (Eigen::Index j = 0; j < X.cols(); ++j)
    if (!X.col(j).allFinite())
      throw NumericalError(std::string(what) + ": non-finite state",
                           first_path + static_cast<std::size_t>(j), step);
}

}  // namespace detail

/// Euler–Maruyama ensemble of the forward SDE started from the given prior samples.
///
/// Y_{k+1} = Y_k + b(Y_k, t_k) dt + sqrt(eps dt) sigma xi_k, with path j driven by
/// stream_seed(seed, j). Row 0 of every path equals its prior sample.
inline PathEnsemble simulate_forward(const SdeModel& model, const Eigen::Ref<const SampleSet>& prior_samples,
                                     const TimeGrid& grid, std::uint64_t seed,
                                     const SimulationOptions& opts = {}) {
  const int n = model.dimension();
  require(prior_samples.rows() == n, "simulate_forward: prior sample dimension mismatch");
  require(prior_samples.cols() > 0, "simulate_forward: no prior samples");
  require(grid.dt > 0 && grid.steps > 0, "simulate_forward: empty grid");
  require(std::abs(grid.t0) <= 1e-12, "simulate_forward: grid must start at 0");
  require(grid.end() <= model.horizon() + grid.dt / 2, "simulate_forward: grid exceeds horizon");
  require(prior_samples.allFinite(), "simulate_forward: non-finite prior sample");

  const auto N = static_cast<std::size_t>(prior_samples.cols());
  PathEnsemble ens = PathEnsemble::dense(grid, n, N, seed);
  const double noise_scale = std::sqrt(model.epsilon() * grid.dt);
  const bool unit = model.unit_diffusion();

  parallel_for_chunks(N, opts.block_size, [&](std::size_t begin, std::size_t end) {
    const auto B = static_cast<Eigen::Index>(end - begin);
    Matrix X = prior_samples.middleCols(static_cast<Eigen::Index>(begin), B);
    Matrix drift(n, B), xi(n, B);
    std::vector<NormalStream> streams;
    streams.reserve(end - begin);
    for (std::size_t j = begin; j < end; ++j) streams.emplace_back(seed, j);
    ens.slice(0).middleCols(static_cast<Eigen::Index>(begin), B) = X;
    for (std::size_t k = 0; k < grid.steps; ++k) {
      model.drift_batch(X, grid.node(k), drift);
      detail::fill_noise(streams, xi, opts.suppress_noise);
      if (unit)
        X += grid.dt * drift + noise_scale * xi;
      else
        X += grid.dt * drift + noise_scale * (model.sigma() * xi);
      detail::check_finite_block(X, begin, k + 1, "simulate_forward");
      ens.slice(k + 1).middleCols(static_cast<Eigen::Index>(begin), B) = X;
    }
  });
  return ens;
}

/// CSV with header `path,k,t,x1..xn`, one row per (path, stored node).
inline void write_ensemble_csv(std::ostream& os, const PathEnsemble& ens) {
  os << "path,k,t";
  for (int i = 1; i <= ens.dimension(); ++i) os << ",x" << i;
  os << '\n';
  os.precision(17);
  for (std::size_t j = 0; j < ens.paths(); ++j) {
    for (std::size_t s = 0; s < ens.slots(); ++s) {
      os << j << ',' << ens.nodes()[s] << ',' << ens.time_of_slot(s);
      const auto x = ens.at(j, s);
      for (Eigen::Index i = 0; i < x.size(); ++i) os << ',' << x(i);
      os << '\n';
    }
  }
}

}  // namespace hjs
