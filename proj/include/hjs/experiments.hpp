#pragma once

#include <Eigen/Core>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <numbers>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hjs/analytic_control.hpp"
#include "hjs/metrics.hpp"
#include "hjs/riccati.hpp"
#include "hjs/sampler.hpp"
#include "hjs/score_net.hpp"

namespace hjs {

inline constexpr const char* kVersion = "0.1.0";

enum class Backend { analytic, riccati, sgm };

inline const char* to_string(Backend b) {
  switch (b) {
    case Backend::analytic: return "analytic";
    case Backend::riccati: return "riccati";
    case Backend::sgm: return "sgm";
  }
  return "?";
}

inline Backend backend_from_string(const std::string& s) {
  if (s == "analytic") return Backend::analytic;
  if (s == "riccati") return Backend::riccati;
  if (s == "sgm") return Backend::sgm;
  throw ConfigError("unknown backend '" + s + "' (expected analytic, riccati or sgm)");
}

// ---------------------------------------------------------------------------
// Config types

struct ModelSpec {
  int dimension = 1;
  double epsilon = 1.0;
  double horizon = 1.0;
  /// zero | linear | named
  std::string drift = "zero";
  Matrix A;
  Vector beta;
  std::string drift_name;
  std::optional<Matrix> sigma;
};

struct PriorSpec {
  /// gaussian_mixture | uniform_mixture | lognormal | function_series
  std::string kind = "gaussian_mixture";
  Vector weights;
  std::vector<Vector> means;
  std::vector<Matrix> covs;
  std::vector<UniformMixturePrior::Interval> intervals;
  Vector location;
  Vector scale;
  int dimension = 0;
};

/// Ground truth attached to an observation: an exact ODE solved by RK4, or a known point at t = 0.
struct ReferenceSpec {
  /// second_order_quadratic | forced_triple_square | forced_logistic | point
  std::string system;
  Vector y0;
  double step = 1e-4;
  Vector value;
};

struct ObservationConfig {
  double s = 1.0;
  Vector y_obs;
  std::vector<double> targets{0.0};
  std::optional<ReferenceSpec> reference;
};

struct SgmSpec {
  double dt = 0.01;
  std::size_t paths = 100'000;
  std::vector<int> hidden{50, 50};
  std::size_t batch_size = 1000;
  std::size_t epochs = 3000;
  double learning_rate = 1e-4;
  /// implicit | sliced
  std::string loss = "implicit";
  int slices = 1;
  /// Load this network instead of training when set.
  std::string checkpoint;
};

/// Counts restored by --paper-scale; zero leaves the desk value.
struct ScaleSpec {
  std::size_t paths = 0;
  std::size_t samples = 0;
  std::size_t exact_samples = 0;
};

struct ExperimentConfig {
  std::string name = "experiment";
  ModelSpec model;
  PriorSpec prior;
  Backend backend = Backend::analytic;
  double dtau = 0.01;
  double ode_step = 1e-4;
  /// Riccati storage spacing; zero stores every ODE step.
  double riccati_store_dt = 0.0;
  SgmSpec sgm;
  std::vector<ObservationConfig> observations;
  std::size_t samples = 100'000;
  std::size_t exact_samples = 100'000;
  std::uint64_t seed = 1;
  std::string output_dir;
  ScaleSpec paper_scale;
};

// ---------------------------------------------------------------------------
// JSON

namespace detail {

inline nlohmann::json vec_json(const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

inline nlohmann::json mat_json(const Matrix& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) rows.push_back(vec_json(m.row(i).transpose()));
  return rows;
}

inline Vector json_vec(const nlohmann::json& j, const std::string& what) {
  if (!j.is_array()) throw ConfigError(what + ": expected an array of numbers");
  Vector v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) {
    if (!j[i].is_number()) throw ConfigError(what + ": expected an array of numbers");
    v(static_cast<Eigen::Index>(i)) = j[i].get<double>();
  }
  return v;
}

inline Matrix json_mat(const nlohmann::json& j, const std::string& what) {
  if (!j.is_array() || j.empty()) throw ConfigError(what + ": expected a non-empty array of rows");
  const auto r = static_cast<Eigen::Index>(j.size());
  const Vector first = json_vec(j[0], what);
  Matrix m(r, first.size());
  for (Eigen::Index i = 0; i < r; ++i) {
    const Vector row = json_vec(j[static_cast<std::size_t>(i)], what);
    if (row.size() != m.cols()) throw ConfigError(what + ": ragged matrix");
    m.row(i) = row.transpose();
  }
  return m;
}

inline void check_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  const std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [k, v] : j.items())
    if (!ok.count(k)) throw ConfigError(where + ": unknown key '" + k + "'");
}

template <class T>
T get_or(const nlohmann::json& j, const char* key, T fallback, const std::string& where) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(where + "." + key + ": wrong type");
  }
}

template <class T>
T get_req(const nlohmann::json& j, const char* key, const std::string& where) {
  if (!j.contains(key)) throw ConfigError(where + ": missing key '" + key + "'");
  return get_or<T>(j, key, T{}, where);
}

}  // namespace detail

inline nlohmann::json to_json(const ExperimentConfig& c) {
  using detail::mat_json;
  using detail::vec_json;
  nlohmann::json model{{"dimension", c.model.dimension},
                       {"epsilon", c.model.epsilon},
                       {"horizon", c.model.horizon},
                       {"drift", c.model.drift}};
  if (c.model.drift == "linear") {
    model["A"] = mat_json(c.model.A);
    if (c.model.beta.size()) model["beta"] = vec_json(c.model.beta);
  }
  if (c.model.drift == "named") model["drift_name"] = c.model.drift_name;
  if (c.model.sigma) model["sigma"] = mat_json(*c.model.sigma);

  nlohmann::json prior{{"kind", c.prior.kind}};
  if (c.prior.kind == "gaussian_mixture") {
    prior["weights"] = vec_json(c.prior.weights);
    nlohmann::json comps = nlohmann::json::array();
    for (std::size_t i = 0; i < c.prior.means.size(); ++i)
      comps.push_back({{"mean", vec_json(c.prior.means[i])}, {"cov", mat_json(c.prior.covs[i])}});
    prior["components"] = comps;
  } else if (c.prior.kind == "uniform_mixture") {
    prior["weights"] = vec_json(c.prior.weights);
    nlohmann::json iv = nlohmann::json::array();
    for (const auto& i : c.prior.intervals) iv.push_back({i.lo, i.hi});
    prior["intervals"] = iv;
  } else if (c.prior.kind == "lognormal") {
    prior["location"] = vec_json(c.prior.location);
    prior["scale"] = vec_json(c.prior.scale);
  } else {
    prior["dimension"] = c.prior.dimension;
  }

  nlohmann::json obs = nlohmann::json::array();
  for (const auto& o : c.observations) {
    nlohmann::json e{{"s", o.s}, {"y_obs", vec_json(o.y_obs)}, {"targets", o.targets}};
    if (o.reference) {
      nlohmann::json r{{"system", o.reference->system}};
      if (o.reference->system == "point") {
        r["value"] = vec_json(o.reference->value);
      } else {
        r["y0"] = vec_json(o.reference->y0);
        r["step"] = o.reference->step;
      }
      e["reference"] = r;
    }
    obs.push_back(e);
  }

  nlohmann::json j{{"name", c.name},
                   {"model", model},
                   {"prior", prior},
                   {"backend", to_string(c.backend)},
                   {"dtau", c.dtau},
                   {"observations", obs},
                   {"samples", c.samples},
                   {"exact_samples", c.exact_samples},
                   {"seed", c.seed}};
  if (c.backend == Backend::riccati) {
    j["riccati"] = {{"ode_step", c.ode_step}};
    if (c.riccati_store_dt > 0) j["riccati"]["store_dt"] = c.riccati_store_dt;
  }
  if (c.backend == Backend::sgm) {
    j["sgm"] = {{"dt", c.sgm.dt},
                {"paths", c.sgm.paths},
                {"hidden", c.sgm.hidden},
                {"batch_size", c.sgm.batch_size},
                {"epochs", c.sgm.epochs},
                {"learning_rate", c.sgm.learning_rate},
                {"loss", c.sgm.loss},
                {"slices", c.sgm.slices}};
    if (!c.sgm.checkpoint.empty()) j["sgm"]["checkpoint"] = c.sgm.checkpoint;
  }
  if (!c.output_dir.empty()) j["output_dir"] = c.output_dir;
  nlohmann::json ps = nlohmann::json::object();
  if (c.paper_scale.paths) ps["paths"] = c.paper_scale.paths;
  if (c.paper_scale.samples) ps["samples"] = c.paper_scale.samples;
  if (c.paper_scale.exact_samples) ps["exact_samples"] = c.paper_scale.exact_samples;
  if (!ps.empty()) j["paper_scale"] = ps;
  return j;
}

/// Parses a config document; shape errors become ConfigError with the offending key path.
inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  using namespace detail;
  check_keys(j,
             {"name", "model", "prior", "backend", "dtau", "riccati", "sgm", "observations", "samples",
              "exact_samples", "seed", "output_dir", "paper_scale"},
             "config");
  ExperimentConfig c;
  c.name = get_or<std::string>(j, "name", c.name, "config");

  const auto& m = j.contains("model") ? j.at("model") : throw ConfigError("config: missing key 'model'");
  check_keys(m, {"dimension", "epsilon", "horizon", "drift", "A", "beta", "drift_name", "sigma"}, "model");
  c.model.dimension = get_req<int>(m, "dimension", "model");
  c.model.epsilon = get_req<double>(m, "epsilon", "model");
  c.model.horizon = get_or<double>(m, "horizon", 1.0, "model");
  c.model.drift = get_or<std::string>(m, "drift", "zero", "model");
  if (m.contains("A")) c.model.A = json_mat(m.at("A"), "model.A");
  if (m.contains("beta")) c.model.beta = json_vec(m.at("beta"), "model.beta");
  c.model.drift_name = get_or<std::string>(m, "drift_name", "", "model");
  if (m.contains("sigma")) c.model.sigma = json_mat(m.at("sigma"), "model.sigma");

  const auto& p = j.contains("prior") ? j.at("prior") : throw ConfigError("config: missing key 'prior'");
  check_keys(p, {"kind", "weights", "components", "intervals", "location", "scale", "dimension"}, "prior");
  c.prior.kind = get_req<std::string>(p, "kind", "prior");
  if (p.contains("weights")) c.prior.weights = json_vec(p.at("weights"), "prior.weights");
  if (p.contains("components")) {
    for (const auto& comp : p.at("components")) {
      check_keys(comp, {"mean", "cov"}, "prior.components[]");
      if (!comp.contains("mean") || !comp.contains("cov"))
        throw ConfigError("prior.components[]: need 'mean' and 'cov'");
      c.prior.means.push_back(json_vec(comp.at("mean"), "prior.components[].mean"));
      c.prior.covs.push_back(json_mat(comp.at("cov"), "prior.components[].cov"));
    }
  }
  if (p.contains("intervals")) {
    for (const auto& iv : p.at("intervals")) {
      const Vector v = json_vec(iv, "prior.intervals[]");
      if (v.size() != 2) throw ConfigError("prior.intervals[]: expected [lo, hi]");
      c.prior.intervals.push_back({v(0), v(1)});
    }
  }
  if (p.contains("location")) c.prior.location = json_vec(p.at("location"), "prior.location");
  if (p.contains("scale")) c.prior.scale = json_vec(p.at("scale"), "prior.scale");
  c.prior.dimension = get_or<int>(p, "dimension", 0, "prior");

  c.backend = backend_from_string(get_req<std::string>(j, "backend", "config"));
  c.dtau = get_or<double>(j, "dtau", c.dtau, "config");
  if (j.contains("riccati")) {
    const auto& r = j.at("riccati");
    check_keys(r, {"ode_step", "store_dt"}, "riccati");
    c.ode_step = get_or<double>(r, "ode_step", c.ode_step, "riccati");
    c.riccati_store_dt = get_or<double>(r, "store_dt", 0.0, "riccati");
  }
  if (j.contains("sgm")) {
    const auto& s = j.at("sgm");
    check_keys(s, {"dt", "paths", "hidden", "batch_size", "epochs", "learning_rate", "loss", "slices", "checkpoint"},
               "sgm");
    c.sgm.dt = get_or<double>(s, "dt", c.sgm.dt, "sgm");
    c.sgm.paths = get_or<std::size_t>(s, "paths", c.sgm.paths, "sgm");
    c.sgm.hidden = get_or<std::vector<int>>(s, "hidden", c.sgm.hidden, "sgm");
    c.sgm.batch_size = get_or<std::size_t>(s, "batch_size", c.sgm.batch_size, "sgm");
    c.sgm.epochs = get_or<std::size_t>(s, "epochs", c.sgm.epochs, "sgm");
    c.sgm.learning_rate = get_or<double>(s, "learning_rate", c.sgm.learning_rate, "sgm");
    c.sgm.loss = get_or<std::string>(s, "loss", c.sgm.loss, "sgm");
    c.sgm.slices = get_or<int>(s, "slices", c.sgm.slices, "sgm");
    c.sgm.checkpoint = get_or<std::string>(s, "checkpoint", "", "sgm");
  }
  if (!j.contains("observations") || !j.at("observations").is_array())
    throw ConfigError("config: 'observations' must be an array");
  for (const auto& o : j.at("observations")) {
    check_keys(o, {"s", "y_obs", "targets", "reference"}, "observations[]");
    ObservationConfig oc;
    oc.s = get_req<double>(o, "s", "observations[]");
    if (!o.contains("y_obs")) throw ConfigError("observations[]: missing key 'y_obs'");
    oc.y_obs = json_vec(o.at("y_obs"), "observations[].y_obs");
    oc.targets = get_or<std::vector<double>>(o, "targets", oc.targets, "observations[]");
    if (o.contains("reference")) {
      const auto& r = o.at("reference");
      check_keys(r, {"system", "y0", "step", "value"}, "observations[].reference");
      ReferenceSpec rs;
      rs.system = get_req<std::string>(r, "system", "observations[].reference");
      if (r.contains("y0")) rs.y0 = json_vec(r.at("y0"), "observations[].reference.y0");
      rs.step = get_or<double>(r, "step", rs.step, "observations[].reference");
      if (r.contains("value")) rs.value = json_vec(r.at("value"), "observations[].reference.value");
      oc.reference = rs;
    }
    c.observations.push_back(std::move(oc));
  }
  c.samples = get_or<std::size_t>(j, "samples", c.samples, "config");
  c.exact_samples = get_or<std::size_t>(j, "exact_samples", c.exact_samples, "config");
  c.seed = get_or<std::uint64_t>(j, "seed", c.seed, "config");
  c.output_dir = get_or<std::string>(j, "output_dir", "", "config");
  if (j.contains("paper_scale")) {
    const auto& ps = j.at("paper_scale");
    check_keys(ps, {"paths", "samples", "exact_samples"}, "paper_scale");
    c.paper_scale.paths = get_or<std::size_t>(ps, "paths", 0, "paper_scale");
    c.paper_scale.samples = get_or<std::size_t>(ps, "samples", 0, "paper_scale");
    c.paper_scale.exact_samples = get_or<std::size_t>(ps, "exact_samples", 0, "paper_scale");
  }
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in, nullptr, true, true);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config '" + path + "' is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

// ---------------------------------------------------------------------------
// Models, priors and reference ODEs named in configs

/// b(x, t) = sin(4 pi t) + x^2.
inline GeneralDrift forced_square_drift() {
  return {[](const Eigen::Ref<const Vector>& x, double t, Eigen::Ref<Vector> out) {
    out(0) = std::sin(4 * std::numbers::pi * t) + x(0) * x(0);
  }};
}

inline SdeModel make_model(const ModelSpec& m) {
  try {
    if (m.drift == "zero") return SdeModel(m.dimension, m.epsilon, m.horizon, ZeroDrift{}, m.sigma);
    if (m.drift == "linear") {
      if (m.A.rows() != m.dimension || m.A.cols() != m.dimension)
        throw ConfigError("model.A must be dimension x dimension");
      return SdeModel::linear(m.epsilon, m.horizon, m.A, m.beta, m.sigma);
    }
    if (m.drift == "named") {
      if (m.drift_name == "forced_square") {
        if (m.dimension != 1) throw ConfigError("drift 'forced_square' is one-dimensional");
        return SdeModel(1, m.epsilon, m.horizon, forced_square_drift(), m.sigma);
      }
      throw ConfigError("unknown named drift '" + m.drift_name + "' (known: forced_square)");
    }
  } catch (const PreconditionError& e) {
    throw ConfigError(std::string("model: ") + e.what());
  }
  throw ConfigError("model.drift must be zero, linear or named, got '" + m.drift + "'");
}

inline Prior make_prior(const PriorSpec& p) {
  try {
    if (p.kind == "gaussian_mixture") {
      if (p.means.empty()) throw ConfigError("prior: gaussian_mixture needs components");
      std::vector<GaussianComponent> comps;
      for (std::size_t i = 0; i < p.means.size(); ++i) comps.emplace_back(p.means[i], p.covs[i]);
      const Vector w = p.weights.size() ? p.weights : Vector::Constant(Eigen::Index(comps.size()), 1.0 / double(comps.size()));
      return GaussianMixturePrior(std::move(comps), w);
    }
    if (p.kind == "uniform_mixture") {
      if (p.intervals.empty()) throw ConfigError("prior: uniform_mixture needs intervals");
      const Vector w = p.weights.size() ? p.weights
                                        : Vector::Constant(Eigen::Index(p.intervals.size()), 1.0 / double(p.intervals.size()));
      return UniformMixturePrior(p.intervals, w);
    }
    if (p.kind == "lognormal") return LogNormalPrior(p.location, p.scale);
    if (p.kind == "function_series") return FunctionSeriesPrior(p.dimension);
  } catch (const PreconditionError& e) {
    throw ConfigError(std::string("prior: ") + e.what());
  }
  throw ConfigError("prior.kind must be gaussian_mixture, uniform_mixture, lognormal or function_series, got '" +
                    p.kind + "'");
}

using OdeRhs = std::function<void(double t, const Vector& y, Vector& dy)>;

/// Right-hand sides of the exact ODEs behind the misspecification experiments.
inline OdeRhs exact_system(const std::string& name) {
  constexpr double pi4 = 4 * std::numbers::pi;
  if (name == "second_order_quadratic")
    return [](double, const Vector& y, Vector& dy) {
      dy(0) = y(1);
      dy(1) = -y(0) + y(0) * y(0) - y(1);
    };
  if (name == "forced_triple_square")
    return [=](double t, const Vector& y, Vector& dy) { dy(0) = std::sin(pi4 * t) + 3 * y(0) * y(0); };
  if (name == "forced_logistic")
    return [=](double t, const Vector& y, Vector& dy) { dy(0) = std::sin(pi4 * t) + 1.5 * y(0) * (1 - y(0)); };
  throw ConfigError("unknown reference system '" + name +
                    "' (known: second_order_quadratic, forced_triple_square, forced_logistic, point)");
}

/// Classical fixed-step RK4 from t = 0, reporting the state at each (sorted, non-negative) time.
inline std::vector<Vector> rk4_at(const OdeRhs& f, Vector y, double step, const std::vector<double>& times) {
  require(step > 0, "rk4_at: step must be positive");
  require(std::is_sorted(times.begin(), times.end()) && (times.empty() || times.front() >= 0),
          "rk4_at: times must be sorted and non-negative");
  const auto n = y.size();
  Vector k1(n), k2(n), k3(n), k4(n);
  auto advance = [&](Vector& x, double t, double h) {
    f(t, x, k1);
    f(t + h / 2, x + h / 2 * k1, k2);
    f(t + h / 2, x + h / 2 * k2, k3);
    f(t + h, x + h * k3, k4);
    x += h / 6 * (k1 + 2 * k2 + 2 * k3 + k4);
  };
  std::vector<Vector> out;
  long long done = 0;
  for (double t : times) {
    const auto whole = static_cast<long long>(std::floor(t / step + 1e-9));
    for (; done < whole; ++done) advance(y, static_cast<double>(done) * step, step);
    Vector x = y;
    const double rest = t - static_cast<double>(whole) * step;
    if (rest > 1e-12 * step) advance(x, static_cast<double>(whole) * step, rest);
    out.push_back(x);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Validation

inline bool on_grid(double x, double dt) {
  const double k = std::round(x / dt);
  return std::abs(k * dt - x) <= 1e-9 * std::max(1.0, std::abs(x));
}

/// Rejects incompatible backend/model/prior combinations and malformed observations before any output.
inline void validate(const ExperimentConfig& c) {
  const SdeModel model = make_model(c.model);
  const Prior prior = make_prior(c.prior);
  const int n = model.dimension();
  if (prior_dimension(prior) != n)
    throw ConfigError("prior dimension " + std::to_string(prior_dimension(prior)) + " does not match model dimension " +
                      std::to_string(n));
  if (!(c.dtau > 0)) throw ConfigError("dtau must be positive");
  if (c.samples < 1) throw ConfigError("samples must be positive");

  switch (c.backend) {
    case Backend::analytic:
      try {
        AnalyticCase::from(model, prior);
      } catch (const std::exception& e) {
        throw ConfigError(std::string("analytic backend has no closed form here: ") + e.what() +
                          "; use the riccati or sgm backend");
      }
      break;
    case Backend::riccati:
      if (model.drift_kind() == DriftKind::general || !std::holds_alternative<GaussianMixturePrior>(prior))
        throw ConfigError("riccati backend needs a zero or linear drift and a gaussian_mixture prior; use sgm instead");
      if (!(c.ode_step > 0)) throw ConfigError("riccati.ode_step must be positive");
      if (c.riccati_store_dt > 0 && !on_grid(c.riccati_store_dt, c.ode_step))
        throw ConfigError("riccati.store_dt must be a multiple of riccati.ode_step");
      if (!on_grid(model.horizon(), c.riccati_store_dt > 0 ? c.riccati_store_dt : c.ode_step))
        throw ConfigError("riccati storage spacing must divide the horizon");
      break;
    case Backend::sgm:
      if (c.sgm.checkpoint.empty()) {
        if (!(c.sgm.dt > 0) || !on_grid(model.horizon(), c.sgm.dt))
          throw ConfigError("sgm.dt must be positive and divide the horizon");
        if (c.sgm.paths < 1 || c.sgm.batch_size < 1) throw ConfigError("sgm.paths and sgm.batch_size must be positive");
        if (!(c.sgm.learning_rate > 0)) throw ConfigError("sgm.learning_rate must be positive");
        for (int w : c.sgm.hidden)
          if (w < 1) throw ConfigError("sgm.hidden widths must be positive");
      } else if (!std::filesystem::exists(c.sgm.checkpoint)) {
        throw ConfigError("sgm.checkpoint '" + c.sgm.checkpoint +
                          "' does not exist; train first (remove the key) or point it at a saved checkpoint.json");
      }
      if (c.sgm.loss != "implicit" && c.sgm.loss != "sliced") throw ConfigError("sgm.loss must be implicit or sliced");
      if (c.sgm.slices < 1) throw ConfigError("sgm.slices must be positive");
      break;
  }

  if (c.observations.empty()) throw ConfigError("need at least one observation");
  for (std::size_t i = 0; i < c.observations.size(); ++i) {
    const auto& o = c.observations[i];
    const std::string where = "observations[" + std::to_string(i) + "]";
    if (o.y_obs.size() != n) throw ConfigError(where + ".y_obs has the wrong dimension");
    if (!(o.s > 0) || o.s > model.horizon() * (1 + 1e-12)) throw ConfigError(where + ".s must lie in (0, horizon]");
    if (o.targets.empty() || !std::is_sorted(o.targets.begin(), o.targets.end()))
      throw ConfigError(where + ".targets must be a non-empty sorted list");
    for (double t : o.targets)
      if (t < 0 || t >= o.s || !on_grid(o.s - t, c.dtau) || !on_grid(o.s, c.dtau))
        throw ConfigError(where + ": target " + std::to_string(t) + " must lie in [0, s) with s and s - t multiples of dtau");
    if (o.reference) {
      if (o.reference->system == "point") {
        if (o.reference->value.size() != n) throw ConfigError(where + ".reference.value has the wrong dimension");
      } else {
        exact_system(o.reference->system);
        if (o.reference->y0.size() != n) throw ConfigError(where + ".reference.y0 has the wrong dimension");
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Builtin experiments

struct BuiltinOptions {
  std::optional<double> epsilon;
  std::optional<Backend> backend;
  /// Misspecification case for ode_misspec_nonlinear: 'a' (3y^2) or 'b' (1.5y(1-y)).
  char variant = 'a';
};

inline const std::vector<std::string>& builtin_names() {
  static const std::vector<std::string> names{"bm1d_gauss",   "bm1d_gmm",          "bm1d_unifmix",
                                              "bm2d_gmm",     "ou1d",              "ou2d_modeluncert",
                                              "ode_misspec_2nd_order", "ode_misspec_nonlinear", "highdim100"};
  return names;
}

namespace detail {

inline Matrix mat2(double a, double b, double c, double d) {
  Matrix m(2, 2);
  m << a, b, c, d;
  return m;
}

inline Vector vec2(double a, double b) {
  Vector v(2);
  v << a, b;
  return v;
}

inline std::vector<double> grid_targets(double t_end, double spacing) {
  std::vector<double> t;
  const auto k = static_cast<int>(std::llround(t_end / spacing));
  for (int i = 0; i < k; ++i) t.push_back(i * spacing);
  return t;
}

inline ModelSpec zero_drift_spec(int n, double eps, double T) {
  ModelSpec m;
  m.dimension = n;
  m.epsilon = eps;
  m.horizon = T;
  return m;
}

inline ModelSpec linear_spec(double eps, double T, Matrix A, std::optional<Matrix> sigma = std::nullopt) {
  ModelSpec m = zero_drift_spec(static_cast<int>(A.rows()), eps, T);
  m.drift = "linear";
  m.beta = Vector::Zero(A.rows());
  m.A = std::move(A);
  m.sigma = std::move(sigma);
  return m;
}

inline void paper_counts(ExperimentConfig& c, std::size_t paths, std::size_t samples, std::size_t exact) {
  c.paper_scale = {paths, samples, exact};
}

}  // namespace detail

/// Builtin experiment setups at desk scale; counts marked in paper_scale are restored by --paper-scale.
inline ExperimentConfig builtin_experiment(const std::string& name, const BuiltinOptions& opt = {}) {
  using detail::mat2;
  using detail::vec2;
  ExperimentConfig c;
  c.name = name;
  auto gauss1 = [](double m, double sd) { return std::pair{Vector::Constant(1, m), Matrix::Constant(1, 1, sd * sd)}; };
  auto set_gmm = [&](std::vector<std::pair<Vector, Matrix>> comps) {
    c.prior.kind = "gaussian_mixture";
    c.prior.weights = Vector::Constant(Eigen::Index(comps.size()), 1.0 / double(comps.size()));
    for (auto& [m, S] : comps) {
      c.prior.means.push_back(m);
      c.prior.covs.push_back(S);
    }
  };
  // Desk-scale training budget shared by the SGM builtins.
  c.sgm.epochs = 20'000;
  c.sgm.learning_rate = 1e-3;

  if (name == "bm1d_gauss") {
    c.model = detail::zero_drift_spec(1, 1.0, 1.0);
    set_gmm({gauss1(0, 1)});
    c.backend = Backend::analytic;
    c.dtau = 0.01;
    c.sgm.hidden = {50, 50};
    for (double y : {-2.0, -1.0, 0.0, 1.5, 3.0}) c.observations.push_back({1.0, Vector::Constant(1, y), {0.0}, {}});
    detail::paper_counts(c, 1'000'000, 1'000'000, 1'000'000);
  } else if (name == "bm1d_gmm") {
    c.model = detail::zero_drift_spec(1, 1.0, 1.0);
    set_gmm({gauss1(0, 0.5), gauss1(-2, 0.8), gauss1(2, 0.6)});
    c.backend = Backend::analytic;
    c.dtau = 0.001;
    c.sgm.hidden = {50, 50, 50};
    const double triples[5][3] = {{0.01, 0.8, -4}, {0.02, 0.5, -2}, {0.05, 0.6, 0.5}, {0.45, 0.95, 1}, {0.03, 0.4, 3}};
    for (const auto& t : triples) c.observations.push_back({t[1], Vector::Constant(1, t[2]), {t[0]}, {}});
    detail::paper_counts(c, 1'000'000, 1'000'000, 1'000'000);
  } else if (name == "bm1d_unifmix") {
    c.model = detail::zero_drift_spec(1, 0.05, 1.0);
    c.prior.kind = "uniform_mixture";
    c.prior.intervals = {{-0.75, -0.25}, {0.25, 0.75}};
    c.prior.weights = Vector::Constant(2, 0.5);
    c.backend = Backend::analytic;
    c.dtau = 0.001;
    c.sgm.hidden = {50, 50, 50};
    const double pairs[4][2] = {{1.0, 0.0}, {1.0, 0.6}, {0.5, -0.4}, {0.2, 0.3}};
    for (const auto& p : pairs) c.observations.push_back({p[0], Vector::Constant(1, p[1]), {0.0}, {}});
    detail::paper_counts(c, 1'000'000, 1'000'000, 1'000'000);
  } else if (name == "bm2d_gmm") {
    c.model = detail::zero_drift_spec(2, 0.5, 1.0);
    set_gmm({{vec2(0.5, 0.5), mat2(0.25, 0.05, 0.05, 1.0 / 9)}, {vec2(-0.5, -0.5), mat2(0.0625, -0.05, -0.05, 0.25)}});
    c.backend = Backend::analytic;
    c.dtau = 0.001;
    c.sgm.hidden = {50, 50, 50};
    c.observations = {{0.9, vec2(-0.9, 0.9), {0.1}, {}},
                      {0.7, vec2(0.7, 0.3), {0.2}, {}},
                      {0.3, vec2(0.3, -0.4), {0.0}, {}},
                      {0.8, vec2(-0.5, 0.3), {0.3}, {}}};
    detail::paper_counts(c, 1'000'000, 1'000'000, 1'000'000);
  } else if (name == "ou1d") {
    c.model = detail::linear_spec(1.5, 1.0, Matrix::Constant(1, 1, -3.0));
    set_gmm({gauss1(0, 1)});
    c.backend = Backend::riccati;
    c.ode_step = 1e-4;
    c.dtau = 0.01;
    c.sgm.hidden = {50, 50};
    // y_obs drawn from P(Y_T) = N(0, e^{-6} + eps (1 - e^{-6}) / 6).
    const double var = std::exp(-6.0) + 1.5 * (1 - std::exp(-6.0)) / 6.0;
    NormalStream draw(derive_seed(c.seed, 40));
    for (int i = 0; i < 100; ++i) c.observations.push_back({1.0, Vector::Constant(1, std::sqrt(var) * draw()), {0.0}, {}});
    detail::paper_counts(c, 1'000'000, 1'000'000, 1'000'000);
  } else if (name == "ou2d_modeluncert") {
    c.model = detail::linear_spec(5.0, 1.0, mat2(0, 1, -1, -1));
    set_gmm({{vec2(-0.7, 0), mat2(0.25, 0.1, 0.1, 0.16)}, {vec2(0.7, 0), mat2(0.25, -0.1, -0.1, 0.16)}});
    c.backend = Backend::riccati;
    c.ode_step = 1e-5;
    c.riccati_store_dt = 1e-3;
    c.dtau = 0.001;
    c.sgm.hidden = {50, 50, 50};
    c.observations = {{1.0, vec2(0.5, -0.5), {0.0, 0.5}, {}},
                      {1.0, vec2(-1.0, 1.0), {0.0, 0.5}, {}},
                      {0.6, vec2(1.0, 0.5), {0.0, 0.3}, {}}};
    detail::paper_counts(c, 1'000'000, 1'000'000, 0);
  } else if (name == "ode_misspec_2nd_order") {
    const double eps = opt.epsilon.value_or(1e-3);
    Matrix sig = Matrix::Zero(2, 2);
    sig(1, 1) = 1.0;
    c.model = detail::linear_spec(eps, 5.0, mat2(0, 1, -1, -1), sig);
    c.prior.kind = "lognormal";
    c.prior.location = Vector::Constant(2, -2.0);
    c.prior.scale = Vector::Constant(2, 0.5);
    c.backend = Backend::sgm;
    c.dtau = 0.001;
    c.sgm.dt = 0.01;
    c.sgm.paths = 20'000;
    c.sgm.hidden = {50, 50, 50};
    c.sgm.epochs = 10'000;
    c.samples = 1000;
    ReferenceSpec ref{"second_order_quadratic", vec2(0.2, 0.1), 1e-4, {}};
    const Vector yT = rk4_at(exact_system(ref.system), ref.y0, ref.step, {5.0}).back();
    c.observations.push_back({5.0, yT, detail::grid_targets(5.0, 0.25), ref});
    detail::paper_counts(c, 100'000, 0, 0);
  } else if (name == "ode_misspec_nonlinear") {
    const double eps = opt.epsilon.value_or(1e-3);
    c.model = detail::zero_drift_spec(1, eps, 1.0);
    c.model.drift = "named";
    c.model.drift_name = "forced_square";
    set_gmm({gauss1(0, 0.1)});
    c.backend = Backend::sgm;
    c.dtau = 0.001;
    c.sgm.dt = 0.01;
    c.sgm.hidden = {50, 50, 50};
    c.sgm.epochs = 10'000;
    c.samples = 10'000;
    ReferenceSpec ref = opt.variant == 'b' ? ReferenceSpec{"forced_logistic", Vector::Constant(1, -0.1), 1e-4, {}}
                                           : ReferenceSpec{"forced_triple_square", Vector::Constant(1, 0.05), 1e-4, {}};
    if (opt.variant != 'a' && opt.variant != 'b') throw ConfigError("ode_misspec_nonlinear variant must be a or b");
    const Vector yT = rk4_at(exact_system(ref.system), ref.y0, ref.step, {1.0}).back();
    c.observations.push_back({1.0, yT, detail::grid_targets(1.0, 0.05), ref});
    if (opt.variant == 'b') c.name += "_b";
    detail::paper_counts(c, 100'000, 100'000, 0);
  } else if (name == "highdim100") {
    const int n = 100;
    c.model = detail::zero_drift_spec(n, 0.01, 1.0);
    c.prior.kind = "function_series";
    c.prior.dimension = n;
    c.backend = Backend::sgm;
    c.dtau = 0.01;
    c.sgm.dt = 0.02;
    c.sgm.paths = 10'000;
    c.sgm.hidden = {200, 200, 200};
    c.sgm.loss = "sliced";
    c.sgm.slices = 1;
    c.sgm.epochs = 1000;
    c.samples = 1000;
    // Test observations: fresh prior draws pushed through the exact Brownian transition to T.
    const SampleSet f0 = sample(FunctionSeriesPrior(n), 2, derive_seed(c.seed, 50));
    for (int i = 0; i < 2; ++i) {
      NormalStream xi(derive_seed(c.seed, 51), static_cast<std::uint64_t>(i));
      Vector y = f0.col(i);
      for (int d = 0; d < n; ++d) y(d) += std::sqrt(c.model.epsilon * c.model.horizon) * xi();
      c.observations.push_back({1.0, y, {0.0, 0.25, 0.5, 0.75, 0.9}, ReferenceSpec{"point", {}, 0, f0.col(i)}});
    }
    detail::paper_counts(c, 100'000, 0, 0);
  } else {
    std::string known;
    for (const auto& n : builtin_names()) known += (known.empty() ? "" : ", ") + n;
    throw ConfigError("unknown builtin '" + name + "' (known: " + known + ")");
  }

  if (opt.epsilon) c.model.epsilon = *opt.epsilon;
  if (opt.backend) c.backend = *opt.backend;
  c.output_dir = "runs/" + c.name;
  if (name == "ode_misspec_2nd_order" || name == "ode_misspec_nonlinear") {
    char buf[32];
    std::snprintf(buf, sizeof buf, "_eps%g", c.model.epsilon);
    c.output_dir += buf;
  }
  return c;
}

inline ExperimentConfig with_paper_scale(ExperimentConfig c) {
  if (c.paper_scale.paths) c.sgm.paths = c.paper_scale.paths;
  if (c.paper_scale.samples) c.samples = c.paper_scale.samples;
  if (c.paper_scale.exact_samples) c.exact_samples = c.paper_scale.exact_samples;
  return c;
}

// ---------------------------------------------------------------------------
// Running

struct RunManifest {
  std::string config_hash;
  nlohmann::json versions;
  std::vector<std::pair<std::string, double>> timings;
  std::vector<std::string> files;
};

inline void to_json(nlohmann::json& j, const RunManifest& m) {
  nlohmann::json t = nlohmann::json::object();
  for (const auto& [k, v] : m.timings) t[k] = v;
  j = {{"config_hash", m.config_hash}, {"versions", m.versions}, {"timings_s", t}, {"files", m.files}};
}

/// Per-observation posterior slices kept in memory for callers of run().
struct ObservationResult {
  std::map<double, SliceSummary> summaries;
  std::map<double, Vector> reference;
};

struct RunReport {
  std::string output_dir;
  RunManifest manifest;
  /// {"experiment": name, "metrics": {key: MetricReport}}; metrics empty without an exact oracle.
  nlohmann::json metrics;
  std::vector<ObservationResult> observations;
};

struct RunOptions {
  bool paper_scale = false;
  bool verbose = false;
};

inline std::string fnv1a_hex(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline std::string output_root() {
  const char* env = std::getenv("HJS_OUTPUT_ROOT");
  return env && *env ? env : ".";
}

inline std::string metric_key(std::size_t obs, double t) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "obs%zu_t%g", obs, t);
  return buf;
}

namespace detail {

template <class F>
void write_file(const std::filesystem::path& path, std::vector<std::string>& files, F&& body) {
  std::ofstream os(path);
  if (!os) throw ConfigError("cannot write '" + path.string() + "'");
  body(os);
  if (!os) throw ConfigError("write failed for '" + path.string() + "'");
  files.push_back(path.filename().string());
}

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

inline nlohmann::json versions() {
  return {{"hjs", kVersion},
          {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                        std::to_string(EIGEN_MINOR_VERSION)},
          {"nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                std::to_string(NLOHMANN_JSON_VERSION_PATCH)},
          {"compiler", __VERSION__}};
}

}  // namespace detail

/// Builds the control once (stage 1), then samples every observation from it (stage 2).
inline RunReport run(ExperimentConfig cfg, const RunOptions& opts = {}) {
  using clock = std::chrono::steady_clock;
  if (opts.paper_scale) cfg = with_paper_scale(std::move(cfg));
  validate(cfg);
  const SdeModel model = make_model(cfg.model);
  const Prior prior = make_prior(cfg.prior);
  const int n = model.dimension();
  auto log = [&](const std::string& msg) {
    if (opts.verbose) std::clog << "[" << cfg.name << "] " << msg << std::endl;
  };

  namespace fs = std::filesystem;
  fs::path dir = cfg.output_dir.empty() ? fs::path("runs") / cfg.name : fs::path(cfg.output_dir);
  if (dir.is_relative()) dir = fs::path(output_root()) / dir;
  fs::create_directories(dir);

  RunReport rep;
  rep.output_dir = dir.string();
  auto& man = rep.manifest;
  const nlohmann::json cfg_json = to_json(cfg);
  man.config_hash = fnv1a_hex(cfg_json.dump());
  man.versions = detail::versions();
  detail::write_file(dir / "config.json", man.files, [&](std::ostream& os) { os << cfg_json.dump(2) << '\n'; });

  // Stage 1.
  auto t0 = clock::now();
  std::unique_ptr<ControlField> control;
  std::optional<AnalyticCase> oracle;
  try {
    oracle = AnalyticCase::from(model, prior);
  } catch (const UnsupportedError&) {
  } catch (const PreconditionError&) {
  }
  switch (cfg.backend) {
    case Backend::analytic:
      control = std::make_unique<AnalyticControl>(*oracle);
      break;
    case Backend::riccati: {
      const double store = cfg.riccati_store_dt > 0 ? cfg.riccati_store_dt : cfg.ode_step;
      log("solving Riccati system");
      auto sol = solve_riccati(model, std::get<GaussianMixturePrior>(prior), cfg.ode_step,
                               TimeGrid::covering(0.0, model.horizon(), store));
      detail::write_file(dir / "riccati.csv", man.files, [&](std::ostream& os) { write_riccati_csv(os, sol); });
      control = std::make_unique<RiccatiControl>(std::move(sol));
      break;
    }
    case Backend::sgm: {
      MlpScoreNetwork net = MlpScoreNetwork::zeros(n, {});
      if (!cfg.sgm.checkpoint.empty()) {
        log("loading " + cfg.sgm.checkpoint);
        net = load_checkpoint(cfg.sgm.checkpoint);
        if (net.dimension() != n) throw ConfigError("checkpoint dimension does not match the model");
      } else {
        log("simulating " + std::to_string(cfg.sgm.paths) + " training paths");
        TrainResult res{MlpScoreNetwork::zeros(n, {}), {}};
        {
          const SampleSet y0 = sample(prior, cfg.sgm.paths, derive_seed(cfg.seed, 10));
          const PathEnsemble data =
              simulate_forward(model, y0, TimeGrid::covering(0.0, model.horizon(), cfg.sgm.dt), derive_seed(cfg.seed, 11));
          TrainConfig tc;
          tc.batch_size = cfg.sgm.batch_size;
          tc.epochs = cfg.sgm.epochs;
          tc.learning_rate = cfg.sgm.learning_rate;
          tc.loss = cfg.sgm.loss == "sliced" ? LossKind::sliced : LossKind::implicit;
          tc.slices = cfg.sgm.slices;
          tc.seed = derive_seed(cfg.seed, 13);
          log("training " + std::to_string(tc.epochs) + " updates");
          res = train(MlpScoreNetwork::random(n, cfg.sgm.hidden, derive_seed(cfg.seed, 12)), data, tc);
        }
        net = std::move(res.net);
        detail::write_file(dir / "loss_history.csv", man.files,
                           [&](std::ostream& os) { write_loss_history_csv(os, res.loss_history); });
        detail::write_file(dir / "checkpoint.json", man.files,
                           [&](std::ostream& os) { os << checkpoint_json(net).dump() << '\n'; });
      }
      control = std::make_unique<ScoreControl>(std::move(net), model.epsilon(), model.horizon());
      break;
    }
  }
  man.timings.emplace_back("stage1", detail::seconds_since(t0));

  // Stage 2.
  rep.metrics = {{"experiment", cfg.name}, {"metrics", nlohmann::json::object()}};
  for (std::size_t i = 0; i < cfg.observations.size(); ++i) {
    const auto& oc = cfg.observations[i];
    log("observation " + std::to_string(i));
    t0 = clock::now();
    const ObservationSpec obs{oc.y_obs, oc.s, oc.targets};
    const PathEnsemble ens =
        sample_posterior(model, *control, obs, cfg.dtau, cfg.samples, derive_seed(cfg.seed, 100 + i));
    man.timings.emplace_back("sample_obs" + std::to_string(i), detail::seconds_since(t0));

    ObservationResult res;
    for (std::size_t k = 0; k < oc.targets.size(); ++k) {
      const double t = oc.targets[k];
      const SampleSet slice = posterior_slice(ens, t);
      res.summaries.emplace(t, summarize(slice));
      char fname[96];
      std::snprintf(fname, sizeof fname, "slices_obs%zu_t%g.csv", i, t);
      detail::write_file(dir / fname, man.files, [&](std::ostream& os) { write_slice_csv(os, slice); });

      if (oracle) {
        const auto t1 = clock::now();
        const auto exact = exact_posterior(*oracle, t, oc.s, oc.y_obs);
        const SampleSet ref = exact_posterior_sample(exact, cfg.exact_samples, stream_seed(derive_seed(cfg.seed, 200 + i), k));
        MetricReport mr;
        mr.count_a = static_cast<std::size_t>(slice.cols());
        mr.count_b = static_cast<std::size_t>(ref.cols());
        mr.seed = stream_seed(derive_seed(cfg.seed, 300 + i), k);
        if (n == 1) {
          mr.name = "w1";
          mr.value = w1_1d(slice.row(0).transpose(), ref.row(0).transpose(), mr.seed);
        } else {
          mr.name = "sliced_w1";
          mr.directions = 50;
          mr.value = sliced_w1(slice, ref, 50, mr.seed);
        }
        rep.metrics["metrics"][metric_key(i, t)] = mr;
        man.timings.emplace_back("metric_" + metric_key(i, t), detail::seconds_since(t1));
      }
    }

    char fname[64];
    std::snprintf(fname, sizeof fname, "summary_obs%zu.csv", i);
    detail::write_file(dir / fname, man.files, [&](std::ostream& os) {
      os << "t";
      for (int d = 1; d <= n; ++d) os << ",mean" << d;
      for (int d = 1; d <= n; ++d) os << ",std" << d;
      os << '\n';
      os.precision(17);
      for (const auto& [t, s] : res.summaries) {
        os << t;
        for (int d = 0; d < n; ++d) os << ',' << s.mean(d);
        for (int d = 0; d < n; ++d) os << ',' << s.std(d);
        os << '\n';
      }
    });

    if (oc.reference) {
      if (oc.reference->system == "point") {
        res.reference.emplace(0.0, oc.reference->value);
      } else {
        std::vector<double> times = oc.targets;
        times.push_back(oc.s);
        const auto ys = rk4_at(exact_system(oc.reference->system), oc.reference->y0, oc.reference->step, times);
        for (std::size_t k = 0; k < times.size(); ++k) res.reference.emplace(times[k], ys[k]);
      }
      std::snprintf(fname, sizeof fname, "reference_obs%zu.csv", i);
      detail::write_file(dir / fname, man.files, [&](std::ostream& os) {
        os << "t";
        for (int d = 1; d <= n; ++d) os << ",y" << d;
        os << '\n';
        os.precision(17);
        for (const auto& [t, y] : res.reference) {
          os << t;
          for (int d = 0; d < n; ++d) os << ',' << y(d);
          os << '\n';
        }
      });
    }
    rep.observations.push_back(std::move(res));
  }

  if (oracle)
    detail::write_file(dir / "metrics.json", man.files, [&](std::ostream& os) { os << rep.metrics.dump(2) << '\n'; });
  man.files.push_back("manifest.json");
  std::ofstream(dir / "manifest.json") << nlohmann::json(man).dump(2) << '\n';
  return rep;
}

// ---------------------------------------------------------------------------
// Comparing metric reports

/// Tolerances by metric key, then by metric name, then "*"; unlisted metrics get zero slack.
struct ToleranceSpec {
  std::map<std::string, double> entries;

  double lookup(const std::string& key, const std::string& name) const {
    if (auto it = entries.find(key); it != entries.end()) return it->second;
    if (auto it = entries.find(name); it != entries.end()) return it->second;
    if (auto it = entries.find("*"); it != entries.end()) return it->second;
    return 0.0;
  }
};

/// Parses "w1=0.01,obs0_t0=0.002,*=0".
inline ToleranceSpec parse_tolerances(const std::string& spec) {
  ToleranceSpec out;
  std::stringstream ss(spec);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    const auto eq = item.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("bad tolerance entry '" + item + "' (expected key=value)");
    try {
      std::size_t used = 0;
      const double v = std::stod(item.substr(eq + 1), &used);
      if (used != item.size() - eq - 1 || !(v >= 0)) throw std::invalid_argument("");
      out.entries[item.substr(0, eq)] = v;
    } catch (const std::exception&) {
      throw ConfigError("bad tolerance value in '" + item + "'");
    }
  }
  return out;
}

struct CompareResult {
  bool pass = true;
  std::vector<std::string> lines;
};

/// Candidate fails a metric when it exceeds the baseline by more than the tolerance.
inline CompareResult compare_reports(const nlohmann::json& baseline, const nlohmann::json& candidate,
                                     const ToleranceSpec& tol) {
  auto metrics_of = [](const nlohmann::json& j, const char* which) -> const nlohmann::json& {
    if (!j.is_object() || !j.contains("metrics") || !j.at("metrics").is_object())
      throw ConfigError(std::string("schema error: ") + which + " report has no 'metrics' object");
    return j.at("metrics");
  };
  const auto& a = metrics_of(baseline, "baseline");
  const auto& b = metrics_of(candidate, "candidate");
  for (const auto& [k, v] : b.items())
    if (!a.contains(k)) throw ConfigError("schema error: metric '" + k + "' missing from baseline");

  CompareResult res;
  for (const auto& [k, va] : a.items()) {
    if (!b.contains(k)) throw ConfigError("schema error: metric '" + k + "' missing from candidate");
    MetricReport ra, rb;
    try {
      ra = va.get<MetricReport>();
      rb = b.at(k).get<MetricReport>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError("schema error: metric '" + k + "' lacks name/value");
    }
    if (ra.name != rb.name) throw ConfigError("schema error: metric '" + k + "' changed kind");
    const double slack = tol.lookup(k, ra.name);
    const bool ok = rb.value <= ra.value + slack;
    char buf[256];
    std::snprintf(buf, sizeof buf, "%s %s (%s): candidate %.6g vs baseline %.6g + tol %.3g", ok ? "ok  " : "FAIL",
                  k.c_str(), ra.name.c_str(), rb.value, ra.value, slack);
    res.lines.emplace_back(buf);
    res.pass = res.pass && ok;
  }
  return res;
}

}  // namespace hjs
