#include "cdit/kernels.hpp"

#include <cmath>
#include <cstring>

#if defined(_OPENMP)
#include <omp.h>
#endif

namespace cdit::kern {

namespace {

bool g_parallel =
#if defined(_OPENMP)
    true;
#else
    false;
#endif

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

// One output row of c (+)= a_row * b. Accumulates k in ascending order for
// every element, matching the plain ijk reference ordering bit for bit.
inline void nn_row(const real* a_row, const real* b, real* c_row, int k, int n, bool accumulate) {
    if (!accumulate) {
        std::memset(c_row, 0, static_cast<std::size_t>(n) * sizeof(real));
    }
    for (int kk = 0; kk < k; ++kk) {
        const real av = a_row[kk];
        const real* b_row = b + static_cast<std::size_t>(kk) * n;
        for (int j = 0; j < n; ++j) {
            c_row[j] += av * b_row[j];
        }
    }
}

inline void nt_row(const real* a_row, const real* b, real* c_row, int k, int n, bool accumulate) {
    for (int j = 0; j < n; ++j) {
        const real* b_row = b + static_cast<std::size_t>(j) * k;
        real acc = 0;
        for (int kk = 0; kk < k; ++kk) {
            acc += a_row[kk] * b_row[kk];
        }
        if (accumulate) {
            c_row[j] += acc;
        } else {
            c_row[j] = acc;
        }
    }
}

inline void tn_row(const real* a, const real* b, real* c_row, int i, int k, int m, int n,
                   bool accumulate) {
    if (!accumulate) {
        std::memset(c_row, 0, static_cast<std::size_t>(n) * sizeof(real));
    }
    for (int kk = 0; kk < k; ++kk) {
        const real av = a[static_cast<std::size_t>(kk) * m + i];
        const real* b_row = b + static_cast<std::size_t>(kk) * n;
        for (int j = 0; j < n; ++j) {
            c_row[j] += av * b_row[j];
        }
    }
}

inline real gelu_one(real x) {
    return static_cast<real>(0.5 * x * (1.0 + std::erf(x * kInvSqrt2)));
}

inline real gelu_grad_one(real x) {
    const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
    const double pdf = kInvSqrt2Pi * std::exp(-0.5 * double(x) * double(x));
    return static_cast<real>(cdf + double(x) * pdf);
}

}  // namespace

void set_parallel(bool on) {
#if defined(_OPENMP)
    g_parallel = on;
#else
    g_parallel = false;
    (void)on;
#endif
}

bool parallel() { return g_parallel; }

void set_threads(int n) {
#if defined(_OPENMP)
    if (n > 0) {
        omp_set_num_threads(n);
    }
#else
    (void)n;
#endif
}

int max_threads() {
#if defined(_OPENMP)
    return omp_get_max_threads();
#else
    return 1;
#endif
}

namespace serial {

void matmul_nn(const real* a, const real* b, real* c, int m, int k, int n, bool accumulate) {
    for (int i = 0; i < m; ++i) {
        nn_row(a + static_cast<std::size_t>(i) * k, b, c + static_cast<std::size_t>(i) * n, k, n,
               accumulate);
    }
}

void matmul_nt(const real* a, const real* b, real* c, int m, int k, int n, bool accumulate) {
    for (int i = 0; i < m; ++i) {
        nt_row(a + static_cast<std::size_t>(i) * k, b, c + static_cast<std::size_t>(i) * n, k, n,
               accumulate);
    }
}

void matmul_tn(const real* a, const real* b, real* c, int m, int k, int n, bool accumulate) {
    for (int i = 0; i < m; ++i) {
        tn_row(a, b, c + static_cast<std::size_t>(i) * n, i, k, m, n, accumulate);
    }
}

}  // namespace serial

namespace par {

void matmul_nn(const real* a, const real* b, real* c, int m, int k, int n, bool accumulate) {
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i) {
        nn_row(a + static_cast<std::size_t>(i) * k, b, c + static_cast<std::size_t>(i) * n, k, n,
               accumulate);
    }
}

void matmul_nt(const real* a, const real* b, real* c, int m, int k, int n, bool accumulate) {
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i) {
        nt_row(a + static_cast<std::size_t>(i) * k, b, c + static_cast<std::size_t>(i) * n, k, n,
               accumulate);
    }
}

void matmul_tn(const real* a, const real* b, real* c, int m, int k, int n, bool accumulate) {
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i) {
        tn_row(a, b, c + static_cast<std::size_t>(i) * n, i, k, m, n, accumulate);
    }
}

}  // namespace par

void matmul_nn(const real* a, const real* b, real* c, int m, int k, int n, bool accumulate) {
    if (g_parallel && m > 1) {
        par::matmul_nn(a, b, c, m, k, n, accumulate);
    } else {
        serial::matmul_nn(a, b, c, m, k, n, accumulate);
    }
}

void matmul_nt(const real* a, const real* b, real* c, int m, int k, int n, bool accumulate) {
    if (g_parallel && m > 1) {
        par::matmul_nt(a, b, c, m, k, n, accumulate);
    } else {
        serial::matmul_nt(a, b, c, m, k, n, accumulate);
    }
}

void matmul_tn(const real* a, const real* b, real* c, int m, int k, int n, bool accumulate) {
    if (g_parallel && m > 1) {
        par::matmul_tn(a, b, c, m, k, n, accumulate);
    } else {
        serial::matmul_tn(a, b, c, m, k, n, accumulate);
    }
}

void add(const real* a, const real* b, real* c, std::size_t n) {
#pragma omp parallel for schedule(static) if (g_parallel && n > 4096)
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(n); ++i) {
        c[i] = a[i] + b[i];
    }
}

void sub(const real* a, const real* b, real* c, std::size_t n) {
#pragma omp parallel for schedule(static) if (g_parallel && n > 4096)
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(n); ++i) {
        c[i] = a[i] - b[i];
    }
}

void mul(const real* a, const real* b, real* c, std::size_t n) {
#pragma omp parallel for schedule(static) if (g_parallel && n > 4096)
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(n); ++i) {
        c[i] = a[i] * b[i];
    }
}

void axpy(real alpha, const real* x, real* y, std::size_t n) {
#pragma omp parallel for schedule(static) if (g_parallel && n > 4096)
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(n); ++i) {
        y[i] += alpha * x[i];
    }
}

void scale(const real* a, real alpha, real* c, std::size_t n) {
#pragma omp parallel for schedule(static) if (g_parallel && n > 4096)
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(n); ++i) {
        c[i] = alpha * a[i];
    }
}

void gelu(const real* x, real* y, std::size_t n) {
#pragma omp parallel for schedule(static) if (g_parallel && n > 1024)
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(n); ++i) {
        y[i] = gelu_one(x[i]);
    }
}

void gelu_backward(const real* x, const real* dy, real* dx, std::size_t n) {
#pragma omp parallel for schedule(static) if (g_parallel && n > 1024)
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(n); ++i) {
        dx[i] += dy[i] * gelu_grad_one(x[i]);
    }
}

void rmsnorm_rows(const real* x, real* y, int rows, int cols, real eps) {
#pragma omp parallel for schedule(static) if (g_parallel && rows > 1)
    for (int r = 0; r < rows; ++r) {
        const real* xr = x + static_cast<std::size_t>(r) * cols;
        real* yr = y + static_cast<std::size_t>(r) * cols;
        real ms = 0;
        for (int j = 0; j < cols; ++j) {
            ms += xr[j] * xr[j];
        }
        ms = ms / static_cast<real>(cols) + eps;
        const real s = real(1) / std::sqrt(ms);
        for (int j = 0; j < cols; ++j) {
            yr[j] = xr[j] * s;
        }
    }
}

void rmsnorm_rows_backward(const real* x, const real* dy, real* dx, int rows, int cols, real eps) {
#pragma omp parallel for schedule(static) if (g_parallel && rows > 1)
    for (int r = 0; r < rows; ++r) {
        const real* xr = x + static_cast<std::size_t>(r) * cols;
        const real* dyr = dy + static_cast<std::size_t>(r) * cols;
        real* dxr = dx + static_cast<std::size_t>(r) * cols;
        real ms = 0;
        real dot = 0;
        for (int j = 0; j < cols; ++j) {
            ms += xr[j] * xr[j];
            dot += dyr[j] * xr[j];
        }
        ms = ms / static_cast<real>(cols) + eps;
        const real s = real(1) / std::sqrt(ms);
        const real s3 = s * s * s;
        const real coef = s3 * dot / static_cast<real>(cols);
        for (int j = 0; j < cols; ++j) {
            dxr[j] += s * dyr[j] - coef * xr[j];
        }
    }
}

}  // namespace cdit::kern
