#pragma once

#include <Eigen/Dense>

#include <vector>

#include "hjs/error.hpp"
#include "hjs/models.hpp"
#include "hjs/numerics.hpp"

namespace hjs {

/// grad_x S(x, tau) on [0, horizon]. Implementations must be safe for concurrent reads.
class ControlField {
 public:
  virtual ~ControlField() = default;

  virtual int dimension() const = 0;
  virtual double horizon() const = 0;

  /// out.col(j) = grad_x S(X.col(j), tau).
  virtual void evaluate_batch(const Eigen::Ref<const Matrix>& X, double tau, Eigen::Ref<Matrix> out) const = 0;

  Vector evaluate(const Eigen::Ref<const Vector>& x, double tau) const {
    require(x.size() == dimension(), "ControlField::evaluate: dimension mismatch");
    Matrix out(dimension(), 1);
    evaluate_batch(x, tau, out);
    return out.col(0);
  }
};

namespace detail {

/// One term of sum_i exp(log_offset_i) N(x; mean_i, C_i), with C_i = L_i L_i^T.
struct WeightedGaussian {
  Vector mean;
  Eigen::LLT<Matrix> chol;
  double log_offset;
};

/// Responsibilities p_i(x) of a Gaussian mixture for every column of X (rows = components).
inline Matrix mixture_responsibilities(const std::vector<WeightedGaussian>& comps,
                                       const Eigen::Ref<const Matrix>& X) {
  const auto m = static_cast<Eigen::Index>(comps.size());
  Matrix logits(m, X.cols());
  for (Eigen::Index i = 0; i < m; ++i) {
    const auto& c = comps[static_cast<std::size_t>(i)];
    Matrix Z = X.colwise() - c.mean;
    c.chol.matrixL().solveInPlace(Z);
    logits.row(i) = (-0.5 * Z.colwise().squaredNorm()).array() + c.log_offset;
  }
  for (Eigen::Index j = 0; j < X.cols(); ++j) {
    Vector l = logits.col(j);
    num::softmax_inplace(l);
    logits.col(j) = l;
  }
  return logits;
}

/// out = scale * sum_i p_i(x) (-C_i^{-1} (x - mean_i)), i.e. scale * grad log of the mixture.
inline void mixture_score(const std::vector<WeightedGaussian>& comps, const Eigen::Ref<const Matrix>& X,
                          double scale, Eigen::Ref<Matrix> out) {
  if (comps.size() == 1) {
    Matrix D = X.colwise() - comps.front().mean;
    comps.front().chol.solveInPlace(D);
    out = -scale * D;
    return;
  }
  const Matrix p = mixture_responsibilities(comps, X);
  out.setZero();
  for (std::size_t i = 0; i < comps.size(); ++i) {
    Matrix D = X.colwise() - comps[i].mean;
    comps[i].chol.solveInPlace(D);
    out -= scale * (D.array().rowwise() * p.row(static_cast<Eigen::Index>(i)).array()).matrix();
  }
}

}  // namespace detail

}  // namespace hjs
