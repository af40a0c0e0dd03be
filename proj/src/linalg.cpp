#include "cdit/linalg.hpp"

#include <algorithm>
#include <cmath>

namespace cdit {

std::vector<double> singular_values(const Tensor& a) {
    const int m = a.rows(), n = a.cols();
    // G = A^T A, symmetric n x n.
    std::vector<double> g(static_cast<std::size_t>(n) * n, 0.0);
    for (int i = 0; i < n; ++i) {
        for (int j = i; j < n; ++j) {
            double acc = 0;
            for (int r = 0; r < m; ++r) {
                acc += double(a.at2(r, i)) * double(a.at2(r, j));
            }
            g[static_cast<std::size_t>(i) * n + j] = acc;
            g[static_cast<std::size_t>(j) * n + i] = acc;
        }
    }

    auto at = [&](int i, int j) -> double& { return g[static_cast<std::size_t>(i) * n + j]; };

    // Cyclic Jacobi sweeps until off-diagonal mass is negligible.
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0;
        for (int i = 0; i < n; ++i) {
            for (int j = i + 1; j < n; ++j) {
                off += at(i, j) * at(i, j);
            }
        }
        if (off < 1e-30) break;
        for (int p = 0; p < n - 1; ++p) {
            for (int q = p + 1; q < n; ++q) {
                const double apq = at(p, q);
                if (std::abs(apq) < 1e-300) continue;
                const double app = at(p, p);
                const double aqq = at(q, q);
                const double tau = (aqq - app) / (2.0 * apq);
                const double t = (tau >= 0 ? 1.0 : -1.0) /
                                 (std::abs(tau) + std::sqrt(1.0 + tau * tau));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = t * c;
                for (int k = 0; k < n; ++k) {
                    const double akp = at(k, p);
                    const double akq = at(k, q);
                    at(k, p) = c * akp - s * akq;
                    at(k, q) = s * akp + c * akq;
                }
                for (int k = 0; k < n; ++k) {
                    const double apk = at(p, k);
                    const double aqk = at(q, k);
                    at(p, k) = c * apk - s * aqk;
                    at(q, k) = s * apk + c * aqk;
                }
            }
        }
    }

    std::vector<double> sv(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        sv[static_cast<std::size_t>(i)] = std::sqrt(std::max(0.0, at(i, i)));
    }
    std::sort(sv.begin(), sv.end(), std::greater<double>());
    return sv;
}

int numeric_rank(const Tensor& a, double threshold) {
    int rank = 0;
    for (double s : singular_values(a)) {
        if (s > threshold) ++rank;
    }
    return rank;
}

}  // namespace cdit
