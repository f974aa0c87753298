#include "finedeb/kernels.hpp"

#include <cmath>
#include <limits>

namespace finedeb::kernels {

namespace {

inline double dot(const double* a, const double* b, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

inline void softmax_row(const double* x, const double* mask, double* y,
                        std::size_t n) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < n; ++j) {
    const double v = x[j] + (mask ? mask[j] : 0.0);
    if (v > mx) mx = v;
  }
  double sum = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    const double v = std::exp(x[j] + (mask ? mask[j] : 0.0) - mx);
    y[j] = v;
    sum += v;
  }
  const double inv = 1.0 / sum;
  for (std::size_t j = 0; j < n; ++j) y[j] *= inv;
}

inline void layer_norm_row(const double* x, const double* gain,
                           const double* bias, double* y, double* xhat,
                           double* inv_std, std::size_t n, double eps) {
  double mean = 0.0;
  for (std::size_t j = 0; j < n; ++j) mean += x[j];
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    const double d = x[j] - mean;
    var += d * d;
  }
  var /= static_cast<double>(n);
  const double is = 1.0 / std::sqrt(var + eps);
  if (inv_std) *inv_std = is;
  for (std::size_t j = 0; j < n; ++j) {
    const double h = (x[j] - mean) * is;
    if (xhat) xhat[j] = h;
    y[j] = h * gain[j] + bias[j];
  }
}

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

inline double gelu_one(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }

inline double gelu_grad_one(double x) {
  // d/dx [x * Phi(x)] = Phi(x) + x * phi(x)
  const double phi = kInvSqrt2Pi * std::exp(-0.5 * x * x);
  const double Phi = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
  return Phi + x * phi;
}

}  // namespace

namespace serial {

void matmul_nn(const double* a, const double* b, double* c, MatDims d) {
  for (std::size_t i = 0; i < d.m; ++i) {
    double* crow = c + i * d.n;
    for (std::size_t j = 0; j < d.n; ++j) crow[j] = 0.0;
    for (std::size_t p = 0; p < d.k; ++p) {
      const double av = a[i * d.k + p];
      const double* brow = b + p * d.n;
      for (std::size_t j = 0; j < d.n; ++j) crow[j] += av * brow[j];
    }
  }
}

void matmul_nt(const double* a, const double* b, double* c, MatDims d) {
  for (std::size_t i = 0; i < d.m; ++i)
    for (std::size_t j = 0; j < d.n; ++j)
      c[i * d.n + j] = dot(a + i * d.k, b + j * d.k, d.k);
}

void matmul_tn(const double* a, const double* b, double* c, MatDims d) {
  for (std::size_t i = 0; i < d.m; ++i) {
    double* crow = c + i * d.n;
    for (std::size_t j = 0; j < d.n; ++j) crow[j] = 0.0;
    for (std::size_t p = 0; p < d.k; ++p) {
      const double av = a[p * d.m + i];
      const double* brow = b + p * d.n;
      for (std::size_t j = 0; j < d.n; ++j) crow[j] += av * brow[j];
    }
  }
}

void softmax_rows(const double* x, const double* mask, double* y,
                  std::size_t rows, std::size_t n) {
  for (std::size_t r = 0; r < rows; ++r)
    softmax_row(x + r * n, mask ? mask + r * n : nullptr, y + r * n, n);
}

void layer_norm_rows(const double* x, const double* gain, const double* bias,
                     double* y, double* xhat, double* inv_std,
                     std::size_t rows, std::size_t n, double eps) {
  for (std::size_t r = 0; r < rows; ++r)
    layer_norm_row(x + r * n, gain, bias, y + r * n,
                   xhat ? xhat + r * n : nullptr,
                   inv_std ? inv_std + r : nullptr, n, eps);
}

void gelu(const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = gelu_one(x[i]);
}

void gelu_grad(const double* x, const double* dy, double* dx, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) dx[i] += dy[i] * gelu_grad_one(x[i]);
}

}  // namespace serial

namespace par {

void matmul_nn(const double* a, const double* b, double* c, MatDims d) {
  const std::ptrdiff_t m = static_cast<std::ptrdiff_t>(d.m);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < m; ++i) {
    double* crow = c + i * d.n;
    for (std::size_t j = 0; j < d.n; ++j) crow[j] = 0.0;
    for (std::size_t p = 0; p < d.k; ++p) {
      const double av = a[i * d.k + p];
      const double* brow = b + p * d.n;
      for (std::size_t j = 0; j < d.n; ++j) crow[j] += av * brow[j];
    }
  }
}

void matmul_nt(const double* a, const double* b, double* c, MatDims d) {
  const std::ptrdiff_t m = static_cast<std::ptrdiff_t>(d.m);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < d.n; ++j)
      c[i * d.n + j] = dot(a + i * d.k, b + j * d.k, d.k);
}

void matmul_tn(const double* a, const double* b, double* c, MatDims d) {
  const std::ptrdiff_t m = static_cast<std::ptrdiff_t>(d.m);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < m; ++i) {
    double* crow = c + i * d.n;
    for (std::size_t j = 0; j < d.n; ++j) crow[j] = 0.0;
    for (std::size_t p = 0; p < d.k; ++p) {
      const double av = a[p * d.m + i];
      const double* brow = b + p * d.n;
      for (std::size_t j = 0; j < d.n; ++j) crow[j] += av * brow[j];
    }
  }
}

void softmax_rows(const double* x, const double* mask, double* y,
                  std::size_t rows, std::size_t n) {
  const std::ptrdiff_t r_end = static_cast<std::ptrdiff_t>(rows);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t r = 0; r < r_end; ++r)
    softmax_row(x + r * n, mask ? mask + r * n : nullptr, y + r * n, n);
}

void layer_norm_rows(const double* x, const double* gain, const double* bias,
                     double* y, double* xhat, double* inv_std,
                     std::size_t rows, std::size_t n, double eps) {
  const std::ptrdiff_t r_end = static_cast<std::ptrdiff_t>(rows);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t r = 0; r < r_end; ++r)
    layer_norm_row(x + r * n, gain, bias, y + r * n,
                   xhat ? xhat + r * n : nullptr,
                   inv_std ? inv_std + r : nullptr, n, eps);
}

void gelu(const double* x, double* y, std::size_t n) {
  const std::ptrdiff_t n_end = static_cast<std::ptrdiff_t>(n);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < n_end; ++i) y[i] = gelu_one(x[i]);
}

void gelu_grad(const double* x, const double* dy, double* dx, std::size_t n) {
  const std::ptrdiff_t n_end = static_cast<std::ptrdiff_t>(n);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < n_end; ++i) dx[i] += dy[i] * gelu_grad_one(x[i]);
}

}  // namespace par

}  // namespace finedeb::kernels
