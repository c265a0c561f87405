#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <ostream>
#include <vector>

#include "hjs/control_field.hpp"
#include "hjs/error.hpp"
#include "hjs/models.hpp"
#include "hjs/parallel.hpp"
#include "hjs/rng.hpp"

namespace hjs {

/// Condition on Y_s = y_obs and report the laws of Y_t at each target time t.
struct ObservationSpec {
  Vector y_obs;
  double s = 1.0;
  std::vector<double> targets;
};

struct SamplerOptions {
  /// Keep every tau node instead of only tau = 0 and the target slices.
  bool store_all = false;
  bool suppress_noise = false;
  std::size_t block_size = 512;
};

/// Euler–Maruyama for the controlled SDE started at y_obs:
///
///   Z_{k+1} = Z_k + (grad S(Z_k, tau_k + T - s) - b(Z_k, s - tau_k)) dtau + sqrt(eps dtau) sigma xi_k,
///
/// where T is the control horizon. The slice at tau = s - t approximates P(Y_t | Y_s = y_obs).
inline PathEnsemble sample_posterior(const SdeModel& model, const ControlField& control, const ObservationSpec& obs,
                                     double dtau, std::size_t count, std::uint64_t seed,
                                     const SamplerOptions& opts = {}) {
  const int n = model.dimension();
  require(control.dimension() == n, "sample_posterior: control/model dimension mismatch");
  require(obs.y_obs.size() == n && obs.y_obs.allFinite(), "sample_posterior: bad observation");
  require(obs.s > 0, "sample_posterior: observation time must be positive");
  const double T = control.horizon();
  require(obs.s <= T * (1 + 1e-12), "sample_posterior: observation time beyond the control horizon");
  require(obs.s <= model.horizon() * (1 + 1e-12), "sample_posterior: observation time beyond the model horizon");
  require(count >= 1, "sample_posterior: count must be positive");
  require(std::is_sorted(obs.targets.begin(), obs.targets.end()), "sample_posterior: target times must be sorted");

  const TimeGrid grid = TimeGrid::covering(0.0, obs.s, dtau);
  std::vector<std::size_t> nodes;
  if (opts.store_all) {
    for (std::size_t k = 0; k <= grid.steps; ++k) nodes.push_back(k);
  } else {
    nodes.push_back(0);
    for (double t : obs.targets) {
      require(t >= 0 && t < obs.s, "sample_posterior: target times must lie in [0, s)");
      const auto k = grid.index_of(obs.s - t);
      require(k.has_value(), "sample_posterior: target time is not a node of the tau grid");
      nodes.push_back(*k);
    }
    std::sort(nodes.begin(), nodes.end());
    nodes.erase(std::unique(nodes.begin(), nodes.end()), nodes.end());
  }
  for (double t : obs.targets)
    require(grid.index_of(obs.s - t).has_value(), "sample_posterior: target time is not a node of the tau grid");

  PathEnsemble ens(grid, nodes, n, count, seed);
  const double noise_scale = std::sqrt(model.epsilon() * grid.dt);
  const bool unit = model.unit_diffusion();
  const double shift = T - obs.s;

  parallel_for_chunks(count, opts.block_size, [&](std::size_t begin, std::size_t end) {
    const auto B = static_cast<Eigen::Index>(end - begin);
    Matrix Z = obs.y_obs.replicate(1, B);
    Matrix ctrl(n, B), drift(n, B), xi(n, B);
    std::vector<NormalStream> streams;
    streams.reserve(end - begin);
    for (std::size_t j = begin; j < end; ++j) streams.emplace_back(seed, j);
    std::size_t next_slot = 0;
    auto store = [&](std::size_t k) {
      if (next_slot < nodes.size() && nodes[next_slot] == k) {
        ens.slice(next_slot).middleCols(static_cast<Eigen::Index>(begin), B) = Z;
        ++next_slot;
      }
    };
    store(0);
    for (std::size_t k = 0; k < grid.steps; ++k) {
      const double tau = grid.node(k);
      control.evaluate_batch(Z, std::min(tau + shift, T), ctrl);
      model.drift_batch(Z, obs.s - tau, drift);
      detail::fill_noise(streams, xi, opts.suppress_noise);
      ctrl -= drift;
      if (unit)
        Z += grid.dt * ctrl + noise_scale * xi;
      else
        Z += grid.dt * ctrl + noise_scale * (model.sigma() * xi);
      detail::check_finite_block(Z, begin, k + 1, "sample_posterior");
      store(k + 1);
    }
  });
  return ens;
}

/// Samples of Y_t | Y_s = y_obs, i.e. the stored slice at tau = s - t.
inline SampleSet posterior_slice(const PathEnsemble& ens, double t) {
  const double s = ens.grid().end();
  const auto k = ens.grid().index_of(s - t);
  require(t >= 0 && t < s + ens.grid().dt / 2 && k.has_value(), "posterior_slice: t is not a node of the tau grid");
  const auto slot = ens.slot_of_node(*k);
  require(slot.has_value(), "posterior_slice: slice was not stored");
  return ens.slice(*slot);
}

/// CSV with header `path,x1..xn`, one row per sample.
inline void write_slice_csv(std::ostream& os, const Eigen::Ref<const SampleSet>& samples) {
  os << "path";
  for (Eigen::Index i = 1; i <= samples.rows(); ++i) os << ",x" << i;
  os << '\n';
  os.precision(17);
  for (Eigen::Index j = 0; j < samples.cols(); ++j) {
    os << j;
    for (Eigen::Index i = 0; i < samples.rows(); ++i) os << ',' << samples(i, j);
    os << '\n';
  }
}

}  // namespace hjs
