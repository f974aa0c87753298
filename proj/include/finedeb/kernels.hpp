#pragma once

#include <cstddef>

// Dense row-major kernels. Every kernel exists twice: kernels::serial is the
// plain reference, kernels::par is the OpenMP version used by the tensor
// engine. Both compute each output element with the same serial inner-loop
// order, so their results are bit-identical for any thread count; tests and
// the bench tool compare them.
namespace finedeb::kernels {

struct MatDims {
  std::size_t m, n, k;  // C is m x n
};

namespace serial {

// C = A(m x k) * B(k x n)
void matmul_nn(const double* a, const double* b, double* c, MatDims d);
// C = A(m x k) * B(n x k)^T
void matmul_nt(const double* a, const double* b, double* c, MatDims d);
// C = A(k x m)^T * B(k x n)
void matmul_tn(const double* a, const double* b, double* c, MatDims d);

// Row-wise softmax over n columns; mask (may be null) is added to the logits
// before normalization.
void softmax_rows(const double* x, const double* mask, double* y,
                  std::size_t rows, std::size_t n);

// Row-wise layer norm: y = (x - mean) / sqrt(var + eps) * gain + bias.
// xhat (may be null) receives the pre-gain normalized values, inv_std (may be
// null, length rows) the 1/sqrt(var+eps) per row; both are needed by backward.
void layer_norm_rows(const double* x, const double* gain, const double* bias,
                     double* y, double* xhat, double* inv_std,
                     std::size_t rows, std::size_t n, double eps);

void gelu(const double* x, double* y, std::size_t n);
void gelu_grad(const double* x, const double* dy, double* dx, std::size_t n);

}  // namespace serial

namespace par {

void matmul_nn(const double* a, const double* b, double* c, MatDims d);
void matmul_nt(const double* a, const double* b, double* c, MatDims d);
void matmul_tn(const double* a, const double* b, double* c, MatDims d);
void softmax_rows(const double* x, const double* mask, double* y,
                  std::size_t rows, std::size_t n);
void layer_norm_rows(const double* x, const double* gain, const double* bias,
                     double* y, double* xhat, double* inv_std,
                     std::size_t rows, std::size_t n, double eps);
void gelu(const double* x, double* y, std::size_t n);
void gelu_grad(const double* x, const double* dy, double* dx, std::size_t n);

}  // namespace par

}  // namespace finedeb::kernels
