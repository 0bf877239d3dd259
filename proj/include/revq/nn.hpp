#pragma once

// Dense building blocks with hand-written backward passes. Activations are
// row-major (rows = tokens or examples); every backward accumulates into the
// parameter gradients and returns the gradient with respect to its input.

#include <Eigen/Dense>

#include <cmath>
#include <string>
#include <vector>

#include "detail/random.hpp"

namespace revq::nn {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::RowVectorXd;

/// A named 2-D tensor. Bias vectors are 1 x n. Storage is allocated lazily so
/// full-size configurations can be inspected without materializing weights.
struct Param {
  std::string name;
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;
  bool trainable = true;
  Matrix value;
  Matrix grad;

  Param() = default;
  Param(std::string n, Eigen::Index r, Eigen::Index c, bool train = true)
      : name(std::move(n)), rows(r), cols(c), trainable(train) {}

  std::size_t size() const { return static_cast<std::size_t>(rows * cols); }
  bool allocated() const { return value.rows() == rows && value.cols() == cols && size() > 0; }

  void fill(double v) {
    value = Matrix::Constant(rows, cols, v);
    grad = Matrix::Zero(rows, cols);
  }
  void fill_normal(detail::Rng& rng, double stddev) {
    value.resize(rows, cols);
    for (Eigen::Index i = 0; i < value.size(); ++i) {
      value.data()[i] = stddev * detail::standard_normal(rng);
    }
    grad = Matrix::Zero(rows, cols);
  }
  void zero_grad() {
    if (grad.rows() != rows || grad.cols() != cols) {
      grad = Matrix::Zero(rows, cols);
    } else {
      grad.setZero();
    }
  }
};

struct Linear {
  Param weight;  // in x out
  Param bias;    // 1 x out

  Linear() = default;
  Linear(const std::string& name, Eigen::Index in, Eigen::Index out)
      : weight(name + ".weight", in, out), bias(name + ".bias", 1, out) {}

  void init(detail::Rng& rng, double stddev) {
    weight.fill_normal(rng, stddev);
    bias.fill(0.0);
  }

  Matrix forward(const Matrix& x) const {
    Matrix y = x * weight.value;
    y.rowwise() += bias.value.row(0);
    return y;
  }

  Matrix backward(const Matrix& x, const Matrix& dy) {
    weight.grad.noalias() += x.transpose() * dy;
    bias.grad.row(0) += dy.colwise().sum();
    return dy * weight.value.transpose();
  }

  template <typename F>
  void for_each_param(F&& f) {
    f(weight);
    f(bias);
  }
};

/// Per-row layer normalization with learned gain and shift.
struct LayerNorm {
  Param gamma;
  Param beta;
  double eps = 1e-12;

  struct Cache {
    Matrix xhat;
    Eigen::VectorXd inv_std;
  };

  LayerNorm() = default;
  LayerNorm(const std::string& name, Eigen::Index width, double epsilon = 1e-12)
      : gamma(name + ".gamma", 1, width), beta(name + ".beta", 1, width), eps(epsilon) {}

  void init() {
    gamma.fill(1.0);
    beta.fill(0.0);
  }

  Matrix forward(const Matrix& x, Cache* cache = nullptr) const {
    const auto width = static_cast<double>(x.cols());
    Eigen::VectorXd mean = x.rowwise().sum() / width;
    Matrix centered = x.colwise() - mean;
    Eigen::VectorXd var = centered.array().square().rowwise().sum() / width;
    Eigen::VectorXd inv_std = (var.array() + eps).rsqrt();
    Matrix xhat = centered.array().colwise() * inv_std.array();
    Matrix y = xhat.array().rowwise() * gamma.value.row(0).array();
    y.rowwise() += beta.value.row(0);
    if (cache) {
      cache->xhat = std::move(xhat);
      cache->inv_std = std::move(inv_std);
    }
    return y;
  }

  Matrix backward(const Cache& c, const Matrix& dy) {
    gamma.grad.row(0) += (dy.array() * c.xhat.array()).colwise().sum().matrix();
    beta.grad.row(0) += dy.colwise().sum();
    const auto width = static_cast<double>(dy.cols());
    Matrix dxhat = dy.array().rowwise() * gamma.value.row(0).array();
    Eigen::VectorXd mean_dxhat = dxhat.rowwise().sum() / width;
    Eigen::VectorXd mean_dxhat_xhat = (dxhat.array() * c.xhat.array()).rowwise().sum() / width;
    Matrix dx = dxhat.colwise() - mean_dxhat;
    dx -= (c.xhat.array().colwise() * mean_dxhat_xhat.array()).matrix();
    return dx.array().colwise() * c.inv_std.array();
  }

  template <typename F>
  void for_each_param(F&& f) {
    f(gamma);
    f(beta);
  }
};

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }

inline double gelu_grad(double x) {
  static const double kInvSqrt2Pi = 1.0 / std::sqrt(2.0 * M_PI);
  return 0.5 * (1.0 + std::erf(x * M_SQRT1_2)) + x * std::exp(-0.5 * x * x) * kInvSqrt2Pi;
}

/// Row-wise softmax, max-shifted.
inline Matrix softmax_rows(const Matrix& s) {
  Matrix p = s.colwise() - s.rowwise().maxCoeff();
  p = p.array().exp();
  Eigen::VectorXd sums = p.rowwise().sum();
  return p.array().colwise() / sums.array();
}

/// Inverted-dropout scale mask: entries are 0 or 1/(1-rate). Empty when rate == 0.
inline Matrix dropout_mask(Eigen::Index rows, Eigen::Index cols, double rate, detail::Rng& rng) {
  if (rate <= 0.0) return {};
  Matrix m(rows, cols);
  const double keep = 1.0 / (1.0 - rate);
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    m.data()[i] = detail::uniform01(rng) < rate ? 0.0 : keep;
  }
  return m;
}

inline Matrix apply_mask(const Matrix& x, const Matrix& mask) {
  if (mask.size() == 0) return x;
  return x.cwiseProduct(mask);
}

}  // namespace revq::nn
