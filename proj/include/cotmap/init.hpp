// Parameter initialization.
#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "cotmap/rng.hpp"
#include "cotmap/tensor.hpp"

namespace cotmap {

namespace detail {

// Householder QR of a (rows x cols) matrix with rows >= cols. Returns the
// thin Q (rows x cols) with orthonormal columns, sign-corrected so that the
// diagonal of R is positive (makes the distribution Haar-uniform instead of
// biased by the QR convention).
inline std::vector<double> thin_q(std::vector<double> a, std::size_t rows, std::size_t cols) {
    std::vector<std::vector<double>> vs; // Householder vectors
    std::vector<double> rdiag(cols);
    for (std::size_t k = 0; k < cols; ++k) {
        double norm = 0.0;
        for (std::size_t i = k; i < rows; ++i) norm += a[i * cols + k] * a[i * cols + k];
        norm = std::sqrt(norm);
        if (norm == 0.0) throw std::runtime_error("orthogonal_init: rank-deficient draw");
        double alpha = a[k * cols + k] > 0 ? -norm : norm;
        std::vector<double> v(rows, 0.0);
        for (std::size_t i = k; i < rows; ++i) v[i] = a[i * cols + k];
        v[k] -= alpha;
        double vnorm2 = 0.0;
        for (std::size_t i = k; i < rows; ++i) vnorm2 += v[i] * v[i];
        if (vnorm2 > 0.0) {
            for (std::size_t j = k; j < cols; ++j) {
                double dot = 0.0;
                for (std::size_t i = k; i < rows; ++i) dot += v[i] * a[i * cols + j];
                const double f = 2.0 * dot / vnorm2;
                for (std::size_t i = k; i < rows; ++i) a[i * cols + j] -= f * v[i];
            }
        }
        rdiag[k] = a[k * cols + k];
        vs.push_back(std::move(v));
    }
    // Q = H_0 H_1 ... H_{cols-1} applied to the first `cols` identity columns.
    std::vector<double> q(rows * cols, 0.0);
    for (std::size_t j = 0; j < cols; ++j) q[j * cols + j] = 1.0;
    for (std::size_t k = cols; k-- > 0;) {
        const auto& v = vs[k];
        double vnorm2 = 0.0;
        for (std::size_t i = k; i < rows; ++i) vnorm2 += v[i] * v[i];
        if (vnorm2 == 0.0) continue;
        for (std::size_t j = 0; j < cols; ++j) {
            double dot = 0.0;
            for (std::size_t i = k; i < rows; ++i) dot += v[i] * q[i * cols + j];
            const double f = 2.0 * dot / vnorm2;
            for (std::size_t i = k; i < rows; ++i) q[i * cols + j] -= f * v[i];
        }
    }
    for (std::size_t j = 0; j < cols; ++j) {
        if (rdiag[j] < 0.0)
            for (std::size_t i = 0; i < rows; ++i) q[i * cols + j] = -q[i * cols + j];
    }
    return q;
}

} // namespace detail

// Orthogonal (semi-orthogonal) matrix scaled by gain, from the QR
// decomposition of a standard-normal draw. For shape (m,n) with m <= n the
// rows are orthonormal up to gain (W W^T = gain^2 I); for m > n the columns
// are (W^T W = gain^2 I).
inline Tensor orthogonal_init(const Shape& shape, double gain, Rng& rng,
                              bool requires_grad = true) {
    if (shape.size() != 2)
        throw std::invalid_argument("orthogonal_init: expected 2-D shape, got " +
                                    detail::shape_str(shape));
    const std::size_t m = shape[0], n = shape[1];
    const std::size_t rows = std::max(m, n), cols = std::min(m, n);
    std::vector<double> a(rows * cols);
    for (auto& v : a) v = rng.normal();
    std::vector<double> q = detail::thin_q(std::move(a), rows, cols);
    std::vector<double> w(m * n);
    if (m <= n) {
        // q is (n x m): transpose into row-orthonormal W
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) w[i * n + j] = gain * q[j * cols + i];
    } else {
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) w[i * n + j] = gain * q[i * cols + j];
    }
    return Tensor(shape, std::move(w), requires_grad);
}

inline Tensor normal_init(const Shape& shape, double stddev, Rng& rng,
                          bool requires_grad = true) {
    std::vector<double> v(detail::numel_of(shape));
    for (auto& x : v) x = rng.normal(0.0, stddev);
    return Tensor(shape, std::move(v), requires_grad);
}

inline Tensor zeros_init(const Shape& shape, bool requires_grad = true) {
    return Tensor::zeros(shape, requires_grad);
}

inline Tensor ones_init(const Shape& shape, bool requires_grad = true) {
    return Tensor::full(shape, 1.0, requires_grad);
}

} // namespace cotmap
