// Shared helpers for the test suite: independent numerical oracles
// (finite differences, Jacobi eigenvalues) that never touch the library's
// own differentiation or linear-algebra paths.
#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <stdexcept>
#include <vector>

#include "cotmap/tensor.hpp"

namespace testutil {

// Central finite differences of a scalar function with respect to one
// tensor's entries. The callback must recompute the function from the
// tensor's current values on every call.
template <typename LossFn>
std::vector<double> finite_diff_grad(cotmap::Tensor& p, LossFn loss, double h = 1e-5) {
    std::vector<double> g(p.numel());
    for (std::size_t i = 0; i < p.numel(); ++i) {
        const double orig = p.values()[i];
        p.values()[i] = orig + h;
        const double fp = loss();
        p.values()[i] = orig - h;
        const double fm = loss();
        p.values()[i] = orig;
        g[i] = (fp - fm) / (2.0 * h);
    }
    return g;
}

// max over entries of |a-b| / (max(|a|,|b|) + floor); the floor keeps the
// ratio meaningful near zero where finite differences bottom out.
inline double max_rel_err(const std::vector<double>& a, const std::vector<double>& b,
                          double floor = 1e-3) {
    if (a.size() != b.size()) throw std::invalid_argument("max_rel_err: size mismatch");
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double denom = std::max({std::fabs(a[i]), std::fabs(b[i]), floor});
        worst = std::max(worst, std::fabs(a[i] - b[i]) / denom);
    }
    return worst;
}

// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations. Used as an
// SVD oracle: singular values of W are sqrt(eig(W^T W)).
inline std::vector<double> sym_eigenvalues(std::vector<double> a, std::size_t n) {
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (std::size_t p = 0; p < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q) off += a[p * n + q] * a[p * n + q];
        if (off < 1e-24) break;
        for (std::size_t p = 0; p < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                const double apq = a[p * n + q];
                if (std::fabs(apq) < 1e-18) continue;
                const double app = a[p * n + p], aqq = a[q * n + q];
                const double theta = (aqq - app) / (2.0 * apq);
                const double t = (theta >= 0 ? 1.0 : -1.0) /
                                 (std::fabs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
                for (std::size_t k = 0; k < n; ++k) {
                    const double akp = a[k * n + p], akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double apk = a[p * n + k], aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    std::vector<double> eig(n);
    for (std::size_t i = 0; i < n; ++i) eig[i] = a[i * n + i];
    return eig;
}

} // namespace testutil
