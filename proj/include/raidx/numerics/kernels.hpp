#pragma once

#include <algorithm>
#include <cmath>
#include <limits>

#include "raidx/numerics/tensor.hpp"

// Plain value-level kernels. The autodiff graph calls these for its forward
// pass; modules that need no gradients (saliency, retrieval) use them directly.
namespace raidx::kernels {

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows())
    throw ShapeError("matmul: inner dimensions differ (" + a.shape_string() +
                     " x " + b.shape_string() + ")");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Tensor c(m, n);
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = &c.data()[i * n];
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a(i, p);
      const double* brow = &b.data()[p * n];
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  return c;
}

// a · bᵀ
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.cols())
    throw ShapeError("matmul_nt: inner dimensions differ (" + a.shape_string() +
                     " x " + b.shape_string() + "ᵀ)");
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  Tensor c(m, n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a(i, p) * b(j, p);
      c(i, j) = s;
    }
  return c;
}

// aᵀ · b
inline Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows())
    throw ShapeError("matmul_tn: inner dimensions differ (" + a.shape_string() +
                     "ᵀ x " + b.shape_string() + ")");
  const std::size_t m = a.cols(), k = a.rows(), n = b.cols();
  Tensor c(m, n);
  for (std::size_t p = 0; p < k; ++p)
    for (std::size_t i = 0; i < m; ++i) {
      const double av = a(p, i);
      for (std::size_t j = 0; j < n; ++j) c(i, j) += av * b(p, j);
    }
  return c;
}

inline Tensor transpose(const Tensor& a) {
  Tensor t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

inline Tensor softmax_rows(const Tensor& x) {
  Tensor y(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < x.cols(); ++j) mx = std::max(mx, x(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j < x.cols(); ++j) {
      const double e = std::exp(x(i, j) - mx);
      y(i, j) = e;
      z += e;
    }
    for (std::size_t j = 0; j < x.cols(); ++j) y(i, j) /= z;
  }
  return y;
}

inline double sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return s;
}

inline bool all_finite(const Tensor& x) {
  return std::all_of(x.data().begin(), x.data().end(),
                     [](double v) { return std::isfinite(v); });
}

inline double l2_norm(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v * v;
  return std::sqrt(s);
}

}  // namespace raidx::kernels
