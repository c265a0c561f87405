#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "hjs/priors.hpp"
#include "hjs/score_net.hpp"

using namespace hjs;

namespace {

/// s(x, t) = -x via a single affine layer.
MlpScoreNetwork negative_identity(int n) {
  auto net = MlpScoreNetwork::zeros(n, {});
  net.weight(0).leftCols(n) = -Matrix::Identity(n, n);
  return net;
}

Vector times_like(const Matrix& X, double t) { return Vector::Constant(X.cols(), t); }

double fd_divergence(const MlpScoreNetwork& net, const Vector& x, double t, double h) {
  double d = 0;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    Vector xp = x, xm = x;
    xp(i) += h;
    xm(i) -= h;
    d += (net.forward(xp, t)(i) - net.forward(xm, t)(i)) / (2 * h);
  }
  return d;
}

}  // namespace

TEST(Forward, ZeroNetwork) {
  const auto net = MlpScoreNetwork::zeros(3, {8, 8});
  EXPECT_TRUE(net.forward(Vector::Random(3), 0.4).isZero(0));
  EXPECT_EQ(net.widths(), (std::vector<int>{4, 8, 8, 3}));
}

TEST(Forward, NegativeIdentity) {
  const auto net = negative_identity(2);
  Vector x(2);
  x << 0.5, -3;
  EXPECT_TRUE(net.forward(x, 0.9).isApprox(-x, 0));
}

TEST(Forward, FiniteForHugeInputs) {
  const auto net = MlpScoreNetwork::random(2, {50, 50}, 1);
  EXPECT_TRUE(net.forward(Vector::Constant(2, 1e6), 1.0).allFinite());
  EXPECT_TRUE(net.forward(Vector::Constant(2, -1e6), 0.0).allFinite());
}

TEST(Forward, InitialisationBounds) {
  const auto net = MlpScoreNetwork::random(1, {50, 50}, 2);
  EXPECT_LE(net.weight(0).cwiseAbs().maxCoeff(), 1 / std::sqrt(2.0));
  EXPECT_LE(net.weight(1).cwiseAbs().maxCoeff(), 1 / std::sqrt(50.0));
  EXPECT_GT(net.weight(1).cwiseAbs().maxCoeff(), 0.5 / std::sqrt(50.0));
}

TEST(Divergence, Examples) {
  EXPECT_DOUBLE_EQ(negative_identity(4).divergence(Vector::Random(4), 0.2), -4.0);
  EXPECT_EQ(MlpScoreNetwork::zeros(2, {5}).divergence(Vector::Random(2), 0.2), 0.0);
}

TEST(Divergence, MatchesFiniteDifferences) {
  const auto net = MlpScoreNetwork::random(2, {16, 16}, 3);
  for (int k = 0; k < 20; ++k) {
    const Vector x = Vector::Random(2) * 2;
    const double t = 0.05 * k;
    const double fd = fd_divergence(net, x, t, 1e-4);
    EXPECT_LE(std::abs(net.divergence(x, t) - fd), 1e-5 * std::max(1.0, std::abs(fd)));
  }
}

TEST(LossImplicit, Examples) {
  const auto net = negative_identity(1);
  EXPECT_DOUBLE_EQ(loss_implicit(net, Matrix::Zero(1, 1), Vector::Zero(1)).value, -1.0);
  EXPECT_DOUBLE_EQ(loss_implicit(net, Matrix::Constant(1, 1, 2.0), Vector::Zero(1)).value, 1.0);
  const auto zero = MlpScoreNetwork::zeros(1, {4});
  const Matrix X = Matrix::Random(1, 8);
  EXPECT_EQ(loss_implicit(zero, X, times_like(X, 0.3)).value, 0.0);
  // Gradient of the 1/2 |s|^2 part alone vanishes at s = 0.
  EXPECT_TRUE(detail::loss_with_tangents(zero, X, times_like(X, 0.3), {}, 1.0).grad.isZero(0));
}

TEST(LossSliced, OneDimensionalEqualsImplicit) {
  const auto net = MlpScoreNetwork::random(1, {8, 8}, 4);
  const Matrix X = Matrix::Random(1, 16);
  const Vector t = Vector::LinSpaced(16, 0.0, 1.0);
  const auto a = loss_implicit(net, X, t);
  const auto b = loss_sliced(net, X, t, {Matrix::Ones(1, 16)});
  EXPECT_EQ(a.value, b.value);
  EXPECT_TRUE((a.grad.array() == b.grad.array()).all());
}

TEST(LossSliced, NegativeIdentityDirectionalTerm) {
  const auto net = negative_identity(3);
  const Matrix X = Matrix::Zero(3, 4);
  const Matrix V = Matrix::Random(3, 4);
  EXPECT_TRUE(net.directional_batch(X, times_like(X, 0.0), V).isApprox(-V.colwise().squaredNorm().transpose(), 1e-14));
}

TEST(LossSliced, UnbiasedForDivergence) {
  const auto net = MlpScoreNetwork::random(2, {16, 16}, 5);
  Vector x(2);
  x << 0.3, -0.8;
  const int M = 100'000;
  const Matrix X = x.replicate(1, M);
  Matrix V(2, M);
  NormalStream s(17);
  for (Eigen::Index i = 0; i < V.size(); ++i) V.data()[i] = s();
  const Vector q = net.directional_batch(X, Vector::Constant(M, 0.5), V);
  const double mean = q.mean();
  const double se = std::sqrt((q.array() - mean).square().mean() / M);
  EXPECT_NEAR(mean, net.divergence(x, 0.5), 3 * se);
}

TEST(Gradients, MatchFiniteDifferences) {
  auto net = MlpScoreNetwork::random(2, {8, 8}, 6);
  const Matrix X = Matrix::Random(2, 16) * 1.5;
  const Vector t = Vector::LinSpaced(16, 0.01, 1.0);
  NormalStream s(8);
  std::vector<Matrix> dirs(2, Matrix(2, 16));
  for (auto& V : dirs)
    for (Eigen::Index i = 0; i < V.size(); ++i) V.data()[i] = s();

  for (int kind = 0; kind < 2; ++kind) {
    auto eval = [&](const MlpScoreNetwork& n) { return kind == 0 ? loss_implicit(n, X, t) : loss_sliced(n, X, t, dirs); };
    const Vector g = eval(net).grad;
    const double h = 1e-5;
    for (Eigen::Index p = 0; p < net.params().size(); ++p) {
      auto plus = net, minus = net;
      plus.params()(p) += h;
      minus.params()(p) -= h;
      const double fd = (eval(plus).value - eval(minus).value) / (2 * h);
      EXPECT_LE(std::abs(g(p) - fd), 1e-4 * std::max(std::abs(fd), 1e-6)) << "kind " << kind << " param " << p;
    }
  }
}

TEST(Train, ZeroEpochsLeavesNetUnchanged) {
  const auto net = MlpScoreNetwork::random(1, {8}, 1);
  const auto data = simulate_forward(SdeModel::brownian(1, 1, 1), SampleSet::Random(1, 100), TimeGrid{0, 0.1, 10}, 1);
  TrainConfig cfg;
  cfg.epochs = 0;
  const auto r = train(net, data, cfg);
  EXPECT_TRUE((r.net.params().array() == net.params().array()).all());
  EXPECT_TRUE(r.loss_history.empty());
}

TEST(Train, Deterministic) {
  const auto net = MlpScoreNetwork::random(2, {8, 8}, 1);
  const auto data = simulate_forward(SdeModel::brownian(2, 1, 1), SampleSet::Random(2, 200), TimeGrid{0, 0.1, 10}, 1);
  TrainConfig cfg;
  cfg.epochs = 50;
  cfg.batch_size = 64;
  cfg.learning_rate = 1e-3;
  cfg.seed = 5;
  for (auto kind : {LossKind::implicit, LossKind::sliced}) {
    cfg.loss = kind;
    const auto a = train(net, data, cfg);
    const auto b = train(net, data, cfg);
    EXPECT_TRUE((a.net.params().array() == b.net.params().array()).all());
    EXPECT_EQ(a.loss_history, b.loss_history);
  }
}

TEST(Train, DivergenceAbortsWithHistory) {
  const auto net = MlpScoreNetwork::random(1, {8}, 1);
  const auto data = simulate_forward(SdeModel::brownian(1, 1, 1), SampleSet::Constant(1, 50, 1e5), TimeGrid{0, 0.1, 10}, 1);
  TrainConfig cfg;
  cfg.epochs = 10;
  cfg.batch_size = 10;
  auto big = net;
  big.weight(1).setConstant(1e5);
  big.bias(1).setConstant(1e5);
  try {
    train(big, data, cfg);
    FAIL() << "expected TrainingDiverged";
  } catch (const TrainingDiverged& e) {
    EXPECT_EQ(e.history().size(), 1u);
  }
}

TEST(Train, BrownianGaussianScore) {
  // Analytic oracle: Y_t ~ N(0, 1 + t), score -x / (1 + t).
  const std::size_t N = 100'000;
  const auto y0 = sample(GaussianMixturePrior(GaussianComponent(Vector::Zero(1), Matrix::Identity(1, 1))), N, 1);
  const auto data = simulate_forward(SdeModel::brownian(1, 1.0, 1.0), y0, TimeGrid{0, 0.01, 100}, 2);
  TrainConfig cfg;
  cfg.epochs = 10000;
  cfg.batch_size = 1000;
  cfg.learning_rate = 1e-3;
  cfg.seed = 3;
  const auto r = train(MlpScoreNetwork::random(1, {50, 50}, 4), data, cfg);
  double se = 0;
  int cnt = 0;
  for (double t : {0.1, 0.5, 1.0})
    for (int i = 0; i <= 60; ++i) {
      const double x = -3 + 0.1 * i;
      const double d = r.net.forward(Vector::Constant(1, x), t)(0) + x / (1 + t);
      se += d * d;
      ++cnt;
    }
  EXPECT_LE(std::sqrt(se / cnt), 0.05);

  // Epoch averages are non-increasing after the first 10% of updates, within a 5% band.
  const auto& h = r.loss_history;
  const std::size_t start = h.size() / 10, win = (h.size() - start) / 9;
  double prev = 0;
  for (std::size_t w = 0; w < 9; ++w) {
    double avg = 0;
    for (std::size_t i = 0; i < win; ++i) avg += h[start + w * win + i];
    avg /= double(win);
    if (w > 0) EXPECT_LE(avg, prev + 0.05 * std::abs(prev)) << "window " << w;
    prev = avg;
  }

  // As a control field: |eps s_W - analytic control| small on [-2, 2].
  const ScoreControl sc(r.net, 1.0, 1.0);
  for (double tau : {0.0, 0.5, 0.9})
    for (int i = 0; i <= 40; ++i) {
      const double x = -2 + 0.1 * i;
      EXPECT_LE(std::abs(sc.evaluate(Vector::Constant(1, x), tau)(0) + x / (2 - tau)), 0.1);
    }
}

TEST(ScoreControl, Examples) {
  const ScoreControl sc(negative_identity(1), 2.0, 1.0);
  EXPECT_DOUBLE_EQ(sc.evaluate(Vector::Ones(1), 0.37)(0), -2.0);
  const ScoreControl z(MlpScoreNetwork::zeros(2, {3}), 1.0, 1.0);
  EXPECT_TRUE(z.evaluate(Vector::Random(2), 0.1).isZero(0));
}

TEST(Checkpoint, RoundTrip) {
  const auto net = MlpScoreNetwork::random(3, {7, 5}, 9);
  const auto path = (std::filesystem::temp_directory_path() / "hjs_ckpt_test.json").string();
  save_checkpoint(path, net);
  const auto back = load_checkpoint(path);
  std::remove(path.c_str());
  EXPECT_EQ(back.widths(), net.widths());
  EXPECT_TRUE((back.params().array() == net.params().array()).all());
  EXPECT_THROW(network_from_json(nlohmann::json{{"format", "other"}}), ConfigError);
}
