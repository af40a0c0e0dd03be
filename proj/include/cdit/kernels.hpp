#pragma once

#include <cstddef>

#include "cdit/tensor.hpp"

namespace cdit::kern {

// Runtime switch between the serial reference path and the OpenMP path.
// Both call the same per-row routines, so results are bitwise identical;
// the serial path is kept as the reference the tests compare against.
void set_parallel(bool on);
bool parallel();
void set_threads(int n);  // 0 = runtime default
int max_threads();

// Conventions (row-major):
//   nn: c[m x n] (+)= a[m x k] * b[k x n]
//   nt: c[m x n] (+)= a[m x k] * b[n x k]^T
//   tn: c[m x n] (+)= a[k x m]^T * b[k x n]
namespace serial {
void matmul_nn(const real* a, const real* b, real* c, int m, int k, int n, bool accumulate);
void matmul_nt(const real* a, const real* b, real* c, int m, int k, int n, bool accumulate);
void matmul_tn(const real* a, const real* b, real* c, int m, int k, int n, bool accumulate);
}  // namespace serial

namespace par {
void matmul_nn(const real* a, const real* b, real* c, int m, int k, int n, bool accumulate);
void matmul_nt(const real* a, const real* b, real* c, int m, int k, int n, bool accumulate);
void matmul_tn(const real* a, const real* b, real* c, int m, int k, int n, bool accumulate);
}  // namespace par

void matmul_nn(const real* a, const real* b, real* c, int m, int k, int n, bool accumulate);
void matmul_nt(const real* a, const real* b, real* c, int m, int k, int n, bool accumulate);
void matmul_tn(const real* a, const real* b, real* c, int m, int k, int n, bool accumulate);

// Elementwise / row kernels used by the op layer. All parallelize over
// rows or elements only, never over a reduction, so thread count does not
// change results.
void add(const real* a, const real* b, real* c, std::size_t n);
void sub(const real* a, const real* b, real* c, std::size_t n);
void mul(const real* a, const real* b, real* c, std::size_t n);
void axpy(real alpha, const real* x, real* y, std::size_t n);  // y += alpha*x
void scale(const real* a, real alpha, real* c, std::size_t n);

void gelu(const real* x, real* y, std::size_t n);
void gelu_backward(const real* x, const real* dy, real* dx, std::size_t n);  // dx += ...

// y_i = x_i / sqrt(mean(x^2) + eps), per row.
void rmsnorm_rows(const real* x, real* y, int rows, int cols, real eps);
void rmsnorm_rows_backward(const real* x, const real* dy, real* dx, int rows, int cols, real eps);

}  // namespace cdit::kern
