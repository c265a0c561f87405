#pragma once

#include <Eigen/Dense>
#include <json.hpp>

#include <cmath>
#include <cstdint>
#include <fstream>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "hjs/control_field.hpp"
#include "hjs/error.hpp"
#include "hjs/models.hpp"
#include "hjs/rng.hpp"

namespace hjs {

/// Feed-forward network s_W(x, t): R^n x R -> R^n with tanh hidden layers and a linear output.
///
/// Parameters live in one flat vector; layer l stores W_l (column-major, out x in) then b_l.
class MlpScoreNetwork {
 public:
  MlpScoreNetwork(std::vector<int> widths, Vector params) : widths_(std::move(widths)), params_(std::move(params)) {
    require(widths_.size() >= 2, "MlpScoreNetwork: need at least input and output widths");
    for (int w : widths_) require(w > 0, "MlpScoreNetwork: widths must be positive");
    require(widths_.front() == widths_.back() + 1, "MlpScoreNetwork: input width must be n + 1");
    offsets_.push_back(0);
    for (std::size_t l = 0; l + 1 < widths_.size(); ++l)
      offsets_.push_back(offsets_.back() + static_cast<Eigen::Index>(widths_[l + 1]) * (widths_[l] + 1));
    require(params_.size() == offsets_.back(), "MlpScoreNetwork: parameter count does not match widths");
    require(params_.allFinite(), "MlpScoreNetwork: non-finite parameters");
  }

  /// Widths [n+1, hidden..., n] with weights and biases drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
  static MlpScoreNetwork random(int n, const std::vector<int>& hidden, std::uint64_t seed) {
    auto widths = layout(n, hidden);
    MlpScoreNetwork net(widths, Vector::Zero(count_params(widths)));
    Xoshiro256pp gen(seed);
    for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(widths[l]));
      auto W = net.weight(l);
      auto b = net.bias(l);
      for (Eigen::Index i = 0; i < W.size(); ++i) W.data()[i] = bound * (2.0 * gen.uniform() - 1.0);
      for (Eigen::Index i = 0; i < b.size(); ++i) b(i) = bound * (2.0 * gen.uniform() - 1.0);
    }
    return net;
  }

  static MlpScoreNetwork zeros(int n, const std::vector<int>& hidden) {
    auto widths = layout(n, hidden);
    return MlpScoreNetwork(widths, Vector::Zero(count_params(widths)));
  }

  static std::vector<int> layout(int n, const std::vector<int>& hidden) {
    require(n >= 1, "MlpScoreNetwork: dimension must be positive");
    std::vector<int> w{n + 1};
    w.insert(w.end(), hidden.begin(), hidden.end());
    w.push_back(n);
    return w;
  }

  static Eigen::Index count_params(const std::vector<int>& widths) {
    Eigen::Index c = 0;
    for (std::size_t l = 0; l + 1 < widths.size(); ++l) c += static_cast<Eigen::Index>(widths[l + 1]) * (widths[l] + 1);
    return c;
  }

  int dimension() const noexcept { return widths_.back(); }
  std::size_t affine_layers() const noexcept { return widths_.size() - 1; }
  const std::vector<int>& widths() const noexcept { return widths_; }
  const Vector& params() const noexcept { return params_; }
  Vector& params() noexcept { return params_; }
  Eigen::Index param_offset(std::size_t l) const noexcept { return offsets_[l]; }

  Eigen::Map<Matrix> weight(std::size_t l) {
    return {params_.data() + offsets_[l], widths_[l + 1], widths_[l]};
  }
  Eigen::Map<const Matrix> weight(std::size_t l) const {
    return {params_.data() + offsets_[l], widths_[l + 1], widths_[l]};
  }
  Eigen::Map<Vector> bias(std::size_t l) {
    return {params_.data() + offsets_[l] + static_cast<Eigen::Index>(widths_[l + 1]) * widths_[l], widths_[l + 1]};
  }
  Eigen::Map<const Vector> bias(std::size_t l) const {
    return {params_.data() + offsets_[l] + static_cast<Eigen::Index>(widths_[l + 1]) * widths_[l], widths_[l + 1]};
  }

  /// Input block [X; t^T].
  Matrix input(const Eigen::Ref<const Matrix>& X, const Eigen::Ref<const Vector>& times) const {
    require(X.rows() == dimension() && times.size() == X.cols(), "MlpScoreNetwork: input shape mismatch");
    Matrix H(X.rows() + 1, X.cols());
    H.topRows(X.rows()) = X;
    H.row(X.rows()) = times.transpose();
    return H;
  }

  /// s_W for every column of X at the matching entry of `times`.
  Matrix forward_batch(const Eigen::Ref<const Matrix>& X, const Eigen::Ref<const Vector>& times) const {
    Matrix H = input(X, times);
    for (std::size_t l = 0; l < affine_layers(); ++l) {
      Matrix Z = weight(l) * H;
      Z.colwise() += bias(l);
      if (l + 1 < affine_layers())
        H = Z.array().tanh().matrix();
      else
        H = std::move(Z);
    }
    return H;
  }

  /// All columns at one time.
  Matrix forward_batch(const Eigen::Ref<const Matrix>& X, double t) const {
    return forward_batch(X, Vector::Constant(X.cols(), t));
  }

  Vector forward(const Eigen::Ref<const Vector>& x, double t) const { return forward_batch(x, t).col(0); }

  /// v^T J v per column, J the Jacobian of s_W in x, by one forward-mode tangent pass.
  Vector directional_batch(const Eigen::Ref<const Matrix>& X, const Eigen::Ref<const Vector>& times,
                           const Eigen::Ref<const Matrix>& V) const {
    require(V.rows() == X.rows() && V.cols() == X.cols(), "MlpScoreNetwork: direction shape mismatch");
    Matrix H = input(X, times);
    Matrix Hd = Matrix::Zero(H.rows(), H.cols());
    Hd.topRows(X.rows()) = V;
    for (std::size_t l = 0; l < affine_layers(); ++l) {
      Matrix Z = weight(l) * H;
      Z.colwise() += bias(l);
      Matrix Zd = weight(l) * Hd;
      if (l + 1 < affine_layers()) {
        H = Z.array().tanh().matrix();
        Hd = ((1.0 - H.array().square()) * Zd.array()).matrix();
      } else {
        Hd = std::move(Zd);
      }
    }
    return (V.array() * Hd.array()).colwise().sum().transpose();
  }

  /// Exact divergence of s_W in x per column: n tangent passes along the coordinate axes.
  Vector divergence_batch(const Eigen::Ref<const Matrix>& X, const Eigen::Ref<const Vector>& times) const {
    Vector div = Vector::Zero(X.cols());
    Matrix E = Matrix::Zero(X.rows(), X.cols());
    for (Eigen::Index i = 0; i < X.rows(); ++i) {
      E.row(i).setOnes();
      div += directional_batch(X, times, E);
      E.row(i).setZero();
    }
    return div;
  }

  double divergence(const Eigen::Ref<const Vector>& x, double t) const {
    return divergence_batch(x, Vector::Constant(1, t))(0);
  }

 private:
  std::vector<int> widths_;
  Vector params_;
  std::vector<Eigen::Index> offsets_;
};

struct LossResult {
  double value = 0.0;
  Vector grad;
};

namespace detail {

/// Loss (1/B) sum_b [ 1/2 |s_b|^2 + sum_m c_m V_m,b^T J_b V_m,b ] and its parameter gradient.
///
/// Reverse mode through the primal and every tangent recurrence.
inline LossResult loss_with_tangents(const MlpScoreNetwork& net, const Eigen::Ref<const Matrix>& X,
                                     const Eigen::Ref<const Vector>& times, const std::vector<Matrix>& tangents,
                                     double coef) {
  require(X.cols() > 0, "score loss: empty batch");
  const std::size_t L = net.affine_layers();
  const auto B = static_cast<double>(X.cols());
  const std::size_t M = tangents.size();

  // H[l]: input to affine layer l. Hd[m][l], Zd[m][l]: tangents of H[l] and of the pre-activation of layer l.
  std::vector<Matrix> H(L);
  std::vector<std::vector<Matrix>> Hd(M, std::vector<Matrix>(L)), Zd(M, std::vector<Matrix>(L));
  H[0] = net.input(X, times);
  for (std::size_t m = 0; m < M; ++m) {
    Hd[m][0] = Matrix::Zero(H[0].rows(), H[0].cols());
    Hd[m][0].topRows(X.rows()) = tangents[m];
  }
  Matrix S;
  for (std::size_t l = 0; l < L; ++l) {
    Matrix Z = net.weight(l) * H[l];
    Z.colwise() += net.bias(l);
    for (std::size_t m = 0; m < M; ++m) Zd[m][l] = net.weight(l) * Hd[m][l];
    if (l + 1 < L) {
      H[l + 1] = Z.array().tanh().matrix();
      const Eigen::ArrayXXd d = 1.0 - H[l + 1].array().square();
      for (std::size_t m = 0; m < M; ++m) Hd[m][l + 1] = (d * Zd[m][l].array()).matrix();
    } else {
      S = std::move(Z);
    }
  }

  LossResult res;
  double value = 0.5 * S.squaredNorm();
  for (std::size_t m = 0; m < M; ++m) value += coef * (tangents[m].array() * Zd[m][L - 1].array()).sum();
  res.value = value / B;
  if (!std::isfinite(res.value)) throw NumericalError("score loss: non-finite value");

  res.grad = Vector::Zero(net.params().size());
  Matrix G = S / B;  // adjoint of the primal output
  std::vector<Matrix> Gd(M);  // adjoints of the tangent outputs
  for (std::size_t m = 0; m < M; ++m) Gd[m] = (coef / B) * tangents[m];

  for (std::size_t l = L; l-- > 0;) {
    // G, Gd[m] are adjoints of layer l's pre-activation and its tangents.
    Eigen::Map<Matrix> gW(res.grad.data() + net.param_offset(l), net.weight(l).rows(), net.weight(l).cols());
    Eigen::Map<Vector> gb(gW.data() + gW.size(), net.bias(l).size());
    gW.noalias() = G * H[l].transpose();
    for (std::size_t m = 0; m < M; ++m) gW.noalias() += Gd[m] * Hd[m][l].transpose();
    gb = G.rowwise().sum();
    if (l == 0) break;

    // Back through H[l] = tanh(Z_{l-1}), Hd[m][l] = (1 - H^2) * Zd[m][l-1].
    const Matrix GH = net.weight(l).transpose() * G;
    const Eigen::ArrayXXd h = H[l].array();
    const Eigen::ArrayXXd d = 1.0 - h.square();
    Eigen::ArrayXXd dbar = Eigen::ArrayXXd::Zero(h.rows(), h.cols());
    for (std::size_t m = 0; m < M; ++m) {
      const Matrix GHd = net.weight(l).transpose() * Gd[m];
      dbar += GHd.array() * Zd[m][l - 1].array();
      Gd[m] = (d * GHd.array()).matrix();
    }
    G = (d * (GH.array() - 2.0 * h * dbar)).matrix();
  }
  return res;
}

}  // namespace detail

/// Implicit score matching: mean over the batch of 1/2 |s_W|^2 + div_x s_W.
inline LossResult loss_implicit(const MlpScoreNetwork& net, const Eigen::Ref<const Matrix>& X,
                                const Eigen::Ref<const Vector>& times) {
  std::vector<Matrix> axes;
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    Matrix E = Matrix::Zero(X.rows(), X.cols());
    E.row(i).setOnes();
    axes.push_back(std::move(E));
  }
  return detail::loss_with_tangents(net, X, times, axes, 1.0);
}

/// Sliced score matching: the divergence is replaced by sum_l v_l^T J v_l, one n x B matrix per l.
inline LossResult loss_sliced(const MlpScoreNetwork& net, const Eigen::Ref<const Matrix>& X,
                              const Eigen::Ref<const Vector>& times, const std::vector<Matrix>& directions) {
  require(!directions.empty(), "loss_sliced: need at least one direction");
  for (const auto& V : directions)
    require(V.rows() == X.rows() && V.cols() == X.cols(), "loss_sliced: direction shape mismatch");
  return detail::loss_with_tangents(net, X, times, directions, 1.0);
}

// ---------------------------------------------------------------------------
// Training

enum class LossKind { implicit, sliced };

struct TrainConfig {
  std::size_t batch_size = 1000;
  /// Number of minibatch updates.
  std::size_t epochs = 3000;
  double learning_rate = 1e-4;
  LossKind loss = LossKind::implicit;
  int slices = 1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
};

/// Training blew up; the loss history up to the failure is attached.
class TrainingDiverged : public NumericalError {
 public:
  TrainingDiverged(const std::string& what, std::vector<double> history)
      : NumericalError(what), history_(std::move(history)) {}
  const std::vector<double>& history() const noexcept { return history_; }

 private:
  std::vector<double> history_;
};

struct TrainResult {
  MlpScoreNetwork net;
  std::vector<double> loss_history;
};

/// Adam on minibatches of (t_k, Y_{k,j}) pairs, k >= 1, drawn uniformly with replacement.
inline TrainResult train(MlpScoreNetwork net, const PathEnsemble& data, const TrainConfig& cfg) {
  require(cfg.batch_size >= 1, "train: batch_size must be positive");
  require(cfg.learning_rate > 0, "train: learning rate must be positive");
  require(cfg.slices >= 1, "train: need at least one slicing direction");
  require(data.dimension() == net.dimension(), "train: data/network dimension mismatch");
  require(data.is_dense() && data.grid().steps >= 1, "train: need a dense ensemble with at least one step");

  const int n = net.dimension();
  const std::size_t K = data.grid().steps;
  const std::size_t N = data.paths();
  const std::size_t pairs = K * N;
  const auto Bsz = static_cast<Eigen::Index>(cfg.batch_size);

  Vector m = Vector::Zero(net.params().size());
  Vector v = Vector::Zero(net.params().size());
  std::vector<double> history;
  history.reserve(cfg.epochs);
  Matrix X(n, Bsz);
  Vector times(Bsz);
  std::vector<Matrix> dirs;

  for (std::size_t it = 0; it < cfg.epochs; ++it) {
    NormalStream s(derive_seed(cfg.seed, 1), it);
    for (Eigen::Index b = 0; b < Bsz; ++b) {
      auto idx = static_cast<std::size_t>(s.uniform() * static_cast<double>(pairs));
      if (idx >= pairs) idx = pairs - 1;
      const std::size_t k = 1 + idx / N;
      const std::size_t j = idx % N;
      X.col(b) = data.at(j, k);
      times(b) = data.grid().node(k);
    }
    LossResult lr;
    if (cfg.loss == LossKind::implicit) {
      lr = loss_implicit(net, X, times);
    } else {
      dirs.assign(static_cast<std::size_t>(cfg.slices), Matrix(n, Bsz));
      for (auto& V : dirs)
        for (Eigen::Index i = 0; i < V.size(); ++i) V.data()[i] = s();
      lr = loss_sliced(net, X, times, dirs);
    }
    history.push_back(lr.value);
    if (!std::isfinite(lr.value) || std::abs(lr.value) > 1e8 || !lr.grad.allFinite())
      throw TrainingDiverged("train: loss diverged at update " + std::to_string(it), history);

    const double t = static_cast<double>(it + 1);
    m = cfg.beta1 * m + (1 - cfg.beta1) * lr.grad;
    v = cfg.beta2 * v + (1 - cfg.beta2) * lr.grad.cwiseAbs2();
    const double c1 = 1 - std::pow(cfg.beta1, t);
    const double c2 = 1 - std::pow(cfg.beta2, t);
    net.params().array() -=
        cfg.learning_rate * (m.array() / c1) / ((v.array() / c2).sqrt() + cfg.adam_eps);
  }
  return {std::move(net), std::move(history)};
}

// ---------------------------------------------------------------------------
// Persistence

inline nlohmann::json checkpoint_json(const MlpScoreNetwork& net) {
  return nlohmann::json{{"format", "hjs-mlp"},
                        {"version", 1},
                        {"activation", "tanh"},
                        {"widths", net.widths()},
                        {"params", std::vector<double>(net.params().data(), net.params().data() + net.params().size())}};
}

inline MlpScoreNetwork network_from_json(const nlohmann::json& j) {
  if (j.value("format", std::string()) != "hjs-mlp" || j.value("version", 0) != 1)
    throw ConfigError("checkpoint: unknown format or version");
  const auto widths = j.at("widths").get<std::vector<int>>();
  const auto p = j.at("params").get<std::vector<double>>();
  return MlpScoreNetwork(widths, Eigen::Map<const Vector>(p.data(), static_cast<Eigen::Index>(p.size())));
}

inline void save_checkpoint(const std::string& path, const MlpScoreNetwork& net) {
  std::ofstream os(path);
  if (!os) throw ConfigError("checkpoint: cannot write " + path);
  os << checkpoint_json(net).dump() << '\n';
}

inline MlpScoreNetwork load_checkpoint(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("checkpoint: cannot read " + path);
  return network_from_json(nlohmann::json::parse(is));
}

inline void write_loss_history_csv(std::ostream& os, const std::vector<double>& history) {
  os << "epoch,loss\n";
  os.precision(17);
  for (std::size_t i = 0; i < history.size(); ++i) os << i + 1 << ',' << history[i] << '\n';
}

/// The field (x, tau) -> eps * s_W(x, T - tau).
class ScoreControl final : public ControlField {
 public:
  ScoreControl(MlpScoreNetwork net, double epsilon, double horizon)
      : net_(std::move(net)), eps_(epsilon), horizon_(horizon) {
    require(eps_ > 0 && horizon_ > 0, "ScoreControl: epsilon and horizon must be positive");
  }

  int dimension() const override { return net_.dimension(); }
  double horizon() const override { return horizon_; }
  const MlpScoreNetwork& network() const noexcept { return net_; }

  void evaluate_batch(const Eigen::Ref<const Matrix>& X, double tau, Eigen::Ref<Matrix> out) const override {
    require(tau >= 0 && tau <= horizon_ * (1 + 1e-12), "ScoreControl: tau outside [0, T]");
    out = eps_ * net_.forward_batch(X, horizon_ - tau);
  }

 private:
  MlpScoreNetwork net_;
  double eps_;
  double horizon_;
};

inline ScoreControl score_control(MlpScoreNetwork net, double epsilon, double horizon) {
  return ScoreControl(std::move(net), epsilon, horizon);
}

}  // namespace hjs
