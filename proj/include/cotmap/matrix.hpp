// Plain row-major matrix for sample sets and solver inputs (no autodiff).
#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace cotmap {

struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}
    Matrix(std::size_t r, std::size_t c, std::vector<double> d)
        : rows(r), cols(c), data(std::move(d)) {
        if (data.size() != rows * cols)
            throw std::invalid_argument("Matrix: data size " + std::to_string(data.size()) +
                                        " != " + std::to_string(rows) + "x" + std::to_string(cols));
    }

    double& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

    std::span<const double> row(std::size_t r) const {
        return {data.data() + r * cols, cols};
    }
    std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }

    Matrix take_rows(const std::vector<std::size_t>& idx) const {
        Matrix out(idx.size(), cols);
        for (std::size_t k = 0; k < idx.size(); ++k)
            for (std::size_t c = 0; c < cols; ++c) out.at(k, c) = at(idx[k], c);
        return out;
    }

    bool operator==(const Matrix& o) const {
        return rows == o.rows && cols == o.cols && data == o.data;
    }
};

inline double sq_dist(std::span<const double> a, std::span<const double> b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        acc += d * d;
    }
    return acc;
}

} // namespace cotmap
