// Dense tensors with reverse-mode automatic differentiation.
//
// Tensors are value types over shared storage; a Tape records the forward
// primitives applied to them and replays exact backward rules in reverse.
// Restrictions kept deliberately: row-major, rank <= 2, double precision,
// single-threaded per tape. Matrix products go through BLAS; everything
// else is a plain loop.
#pragma once

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace cotmap {

using Shape = std::vector<std::size_t>;

namespace detail {

inline std::size_t numel_of(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

// Allocator that skips value-initialization; op outputs are always fully
// overwritten, so the default zero-fill is pure cost on the training path.
template <typename T>
struct NoInitAllocator : std::allocator<T> {
    template <typename U>
    struct rebind {
        using other = NoInitAllocator<U>;
    };
    template <typename U, typename... Args>
    void construct(U* p, Args&&... args) {
        if constexpr (sizeof...(Args) > 0)
            ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
    }
};

// Branch-light double exp for the silu hot loop: 2^n * poly(r) with the
// argument clamped to the non-overflowing range. Relative error < 1e-12.
inline double fast_exp(double x) {
    x = std::min(700.0, std::max(-700.0, x));
    const double n = std::nearbyint(x * 1.4426950408889634074);
    const double r = x - n * 6.93147180369123816490e-01 - n * 1.90821492927058770002e-10;
    double p = 1.0 / 39916800.0;
    p = p * r + 1.0 / 3628800.0;
    p = p * r + 1.0 / 362880.0;
    p = p * r + 1.0 / 40320.0;
    p = p * r + 1.0 / 5040.0;
    p = p * r + 1.0 / 720.0;
    p = p * r + 1.0 / 120.0;
    p = p * r + 1.0 / 24.0;
    p = p * r + 1.0 / 6.0;
    p = p * r + 0.5;
    p = p * r + 1.0;
    p = p * r + 1.0;
    std::uint64_t bits;
    std::memcpy(&bits, &p, sizeof(bits));
    bits += static_cast<std::uint64_t>(static_cast<std::int64_t>(n)) << 52;
    std::memcpy(&p, &bits, sizeof(bits));
    return p;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ")";
    return os.str();
}

[[noreturn]] inline void shape_error(const char* op, const Shape& a, const Shape& b) {
    throw std::invalid_argument(std::string(op) + ": incompatible shapes " + shape_str(a) +
                                " and " + shape_str(b));
}

} // namespace detail

using Buffer = std::vector<double, detail::NoInitAllocator<double>>;

namespace detail {

struct Storage {
    Buffer values;
    Buffer grad; // empty until first accumulation
};

} // namespace detail

class Tape;

class Tensor {
public:
    Tensor() = default;

    Tensor(Shape shape, const std::vector<double>& values, bool requires_grad = false)
        : shape_(std::move(shape)),
          st_(std::make_shared<detail::Storage>()),
          requires_grad_(requires_grad) {
        st_->values.assign(values.begin(), values.end());
        if (st_->values.size() != detail::numel_of(shape_))
            throw std::invalid_argument("Tensor: values size " +
                                        std::to_string(st_->values.size()) +
                                        " does not match shape " + detail::shape_str(shape_));
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return Tensor::full(std::move(shape), 0.0, requires_grad);
    }

    static Tensor full(Shape shape, double v, bool requires_grad = false) {
        Tensor t = uninitialized(std::move(shape), requires_grad);
        std::fill(t.st_->values.begin(), t.st_->values.end(), v);
        return t;
    }

    static Tensor uninitialized(Shape shape, bool requires_grad = false) {
        Tensor t;
        t.shape_ = std::move(shape);
        t.st_ = std::make_shared<detail::Storage>();
        t.st_->values.resize(detail::numel_of(t.shape_));
        t.requires_grad_ = requires_grad;
        return t;
    }

    static Tensor scalar(double v, bool requires_grad = false) {
        return Tensor({1}, {v}, requires_grad);
    }

    const Shape& shape() const { return shape_; }
    std::size_t numel() const { return st_ ? st_->values.size() : 0; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t rows() const { return shape_.empty() ? 0 : shape_[0]; }
    std::size_t cols() const { return shape_.size() < 2 ? 1 : shape_[1]; }
    bool defined() const { return static_cast<bool>(st_); }

    bool requires_grad() const { return requires_grad_; }
    void set_requires_grad(bool v) { requires_grad_ = v; }

    std::int64_t node() const { return node_; }

    double* data() { return st_->values.data(); }
    const double* data() const { return st_->values.data(); }
    Buffer& values() { return st_->values; }
    const Buffer& values() const { return st_->values; }

    double item() const {
        if (numel() != 1)
            throw std::invalid_argument("Tensor::item: tensor has " + std::to_string(numel()) +
                                        " elements, expected 1");
        return st_->values[0];
    }

    double at(std::size_t i, std::size_t j) const { return st_->values[i * cols() + j]; }
    double& at(std::size_t i, std::size_t j) { return st_->values[i * cols() + j]; }

    bool has_grad() const { return st_ && !st_->grad.empty(); }

    // Allocates (zeroed) on first use; all copies of this tensor see it.
    Buffer& ensure_grad() const {
        if (st_->grad.empty()) st_->grad.assign(st_->values.size(), 0.0);
        return st_->grad;
    }

    const Buffer& grad() const {
        if (!has_grad())
            throw std::runtime_error("Tensor::grad: no gradient accumulated");
        return st_->grad;
    }

    void zero_grad() {
        if (st_ && !st_->grad.empty()) std::fill(st_->grad.begin(), st_->grad.end(), 0.0);
    }

    Tensor detached() const {
        Tensor t = *this;
        t.requires_grad_ = false;
        t.node_ = -1;
        t.tape_id_ = 0;
        return t;
    }

private:
    friend class Tape;

    Shape shape_;
    std::shared_ptr<detail::Storage> st_;
    bool requires_grad_ = false;
    std::int64_t node_ = -1;   // id of the op that produced this tensor, -1 for leaves
    std::uint64_t tape_id_ = 0;
};

// Records forward primitives and replays their backward rules in reverse
// order. Ops are appended in creation order, so inputs always precede the
// op that consumes them; backward() runs each recorded op exactly once.
class Tape {
public:
    explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled), id_(next_tape_id()) {}

    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool grad_enabled() const { return grad_enabled_; }
    std::size_t num_ops() const { return ops_.size(); }

    struct OpRecord {
        std::int64_t out;
        std::vector<std::int64_t> inputs;
    };
    // Node bookkeeping for inspection/tests: inputs of op k all have id < k.
    OpRecord op_record(std::size_t k) const { return {ops_[k].out, ops_[k].inputs}; }

    void reset() {
        ops_.clear();
        next_node_ = 0;
        consumed_ = false;
    }

    void backward(const Tensor& loss) {
        if (loss.numel() != 1)
            throw std::invalid_argument("Tape::backward: loss must be scalar, got shape " +
                                        detail::shape_str(loss.shape()));
        if (!loss.requires_grad())
            throw std::invalid_argument("Tape::backward: loss does not require grad");
        if (loss.tape_id_ != id_)
            throw std::invalid_argument("Tape::backward: loss was not recorded on this tape");
        if (consumed_)
            throw std::runtime_error("Tape::backward: tape already consumed; reset() first");
        loss.ensure_grad()[0] = 1.0;
        for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) it->backward();
        consumed_ = true;
    }

    // ---- primitives ----

    Tensor matmul(const Tensor& a, const Tensor& b) {
        if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows())
            detail::shape_error("matmul", a.shape(), b.shape());
        const int m = static_cast<int>(a.rows());
        const int k = static_cast<int>(a.cols());
        const int n = static_cast<int>(b.cols());
        Tensor out = make({a.rows(), b.cols()}, a, b);
        cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, m, n, k, 1.0, a.data(), k,
                    b.data(), n, 0.0, out.data(), n);
        if (out.requires_grad()) {
            record(out, {a, b}, [a, b, out, m, n, k] {
                const double* g = out.grad().data();
                if (a.requires_grad()) {
                    // dA += G * B^T
                    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, m, k, n, 1.0, g, n,
                                b.data(), n, 1.0, a.ensure_grad().data(), k);
                }
                if (b.requires_grad()) {
                    // dB += A^T * G
                    cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, k, n, m, 1.0, a.data(),
                                k, g, n, 1.0, b.ensure_grad().data(), n);
                }
            });
        }
        return out;
    }

    // Fused x W + b (bias broadcast over rows); one op record instead of a
    // matmul + add pair on the training hot path.
    Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
        if (x.rank() != 2 || w.rank() != 2 || x.cols() != w.rows() || b.numel() != w.cols())
            detail::shape_error("linear", x.shape(), w.shape());
        const int m = static_cast<int>(x.rows());
        const int k = static_cast<int>(x.cols());
        const int n = static_cast<int>(w.cols());
        Tensor out = make({x.rows(), w.cols()}, x, w, b);
        for (std::size_t r = 0; r < x.rows(); ++r)
            std::copy_n(b.data(), w.cols(), out.data() + r * w.cols());
        cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, m, n, k, 1.0, x.data(), k,
                    w.data(), n, 1.0, out.data(), n);
        if (out.requires_grad()) {
            record(out, {x, w, b}, [x, w, b, out, m, n, k] {
                const double* g = out.grad().data();
                if (x.requires_grad())
                    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, m, k, n, 1.0, g, n,
                                w.data(), n, 1.0, x.ensure_grad().data(), k);
                if (w.requires_grad())
                    cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, k, n, m, 1.0, x.data(),
                                k, g, n, 1.0, w.ensure_grad().data(), n);
                if (b.requires_grad()) {
                    auto& gb = b.ensure_grad();
                    for (int r = 0; r < m; ++r)
                        for (int c = 0; c < n; ++c) gb[c] += g[r * n + c];
                }
            });
        }
        return out;
    }

    // a + b; b may be a row vector broadcast over a's rows.
    Tensor add(const Tensor& a, const Tensor& b) {
        if (a.shape() == b.shape()) {
            Tensor out = make(a.shape(), a, b);
            const std::size_t n = a.numel();
            for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
            if (out.requires_grad()) {
                record(out, {a, b}, [a, b, out] {
                    const auto& g = out.grad();
                    if (a.requires_grad()) {
                        auto& ga = a.ensure_grad();
                        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                    }
                    if (b.requires_grad()) {
                        auto& gb = b.ensure_grad();
                        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
                    }
                });
            }
            return out;
        }
        if (b.numel() == a.cols() && a.rank() == 2) { // row broadcast
            Tensor out = make(a.shape(), a, b);
            const std::size_t rows = a.rows(), cols = a.cols();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < cols; ++c)
                    out.data()[r * cols + c] = a.data()[r * cols + c] + b.data()[c];
            if (out.requires_grad()) {
                record(out, {a, b}, [a, b, out, rows, cols] {
                    const auto& g = out.grad();
                    if (a.requires_grad()) {
                        auto& ga = a.ensure_grad();
                        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                    }
                    if (b.requires_grad()) {
                        auto& gb = b.ensure_grad();
                        for (std::size_t r = 0; r < rows; ++r)
                            for (std::size_t c = 0; c < cols; ++c) gb[c] += g[r * cols + c];
                    }
                });
            }
            return out;
        }
        detail::shape_error("add", a.shape(), b.shape());
    }

    Tensor sub(const Tensor& a, const Tensor& b) {
        if (a.shape() != b.shape()) detail::shape_error("sub", a.shape(), b.shape());
        Tensor out = make(a.shape(), a, b);
        const std::size_t n = a.numel();
        for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] - b.data()[i];
        if (out.requires_grad()) {
            record(out, {a, b}, [a, b, out] {
                const auto& g = out.grad();
                if (a.requires_grad()) {
                    auto& ga = a.ensure_grad();
                    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                }
                if (b.requires_grad()) {
                    auto& gb = b.ensure_grad();
                    for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
                }
            });
        }
        return out;
    }

    // Elementwise product; b may be scalar ({1}) or a row vector broadcast
    // over a's rows.
    Tensor mul(const Tensor& a, const Tensor& b) {
        if (a.shape() == b.shape()) {
            Tensor out = make(a.shape(), a, b);
            const std::size_t n = a.numel();
            for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
            if (out.requires_grad()) {
                record(out, {a, b}, [a, b, out] {
                    const auto& g = out.grad();
                    if (a.requires_grad()) {
                        auto& ga = a.ensure_grad();
                        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b.data()[i];
                    }
                    if (b.requires_grad()) {
                        auto& gb = b.ensure_grad();
                        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a.data()[i];
                    }
                });
            }
            return out;
        }
        if (b.numel() == 1) {
            Tensor out = make(a.shape(), a, b);
            const double s = b.data()[0];
            const std::size_t n = a.numel();
            for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * s;
            if (out.requires_grad()) {
                record(out, {a, b}, [a, b, out, s] {
                    const auto& g = out.grad();
                    if (a.requires_grad()) {
                        auto& ga = a.ensure_grad();
                        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
                    }
                    if (b.requires_grad()) {
                        double acc = 0.0;
                        for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * a.data()[i];
                        b.ensure_grad()[0] += acc;
                    }
                });
            }
            return out;
        }
        if (b.numel() == a.cols() && a.rank() == 2) {
            Tensor out = make(a.shape(), a, b);
            const std::size_t rows = a.rows(), cols = a.cols();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < cols; ++c)
                    out.data()[r * cols + c] = a.data()[r * cols + c] * b.data()[c];
            if (out.requires_grad()) {
                record(out, {a, b}, [a, b, out, rows, cols] {
                    const auto& g = out.grad();
                    if (a.requires_grad()) {
                        auto& ga = a.ensure_grad();
                        for (std::size_t r = 0; r < rows; ++r)
                            for (std::size_t c = 0; c < cols; ++c)
                                ga[r * cols + c] += g[r * cols + c] * b.data()[c];
                    }
                    if (b.requires_grad()) {
                        auto& gb = b.ensure_grad();
                        for (std::size_t r = 0; r < rows; ++r)
                            for (std::size_t c = 0; c < cols; ++c)
                                gb[c] += g[r * cols + c] * a.data()[r * cols + c];
                    }
                });
            }
            return out;
        }
        detail::shape_error("mul", a.shape(), b.shape());
    }

    Tensor add_scalar(const Tensor& a, double s) {
        Tensor out = make(a.shape(), a);
        const std::size_t n = a.numel();
        for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + s;
        if (out.requires_grad()) {
            record(out, {a}, [a, out] {
                const auto& g = out.grad();
                auto& ga = a.ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            });
        }
        return out;
    }

    Tensor mul_scalar(const Tensor& a, double s) {
        Tensor out = make(a.shape(), a);
        const std::size_t n = a.numel();
        for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * s;
        if (out.requires_grad()) {
            record(out, {a}, [a, out, s] {
                const auto& g = out.grad();
                auto& ga = a.ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
            });
        }
        return out;
    }

    Tensor concat_last_dim(const Tensor& a, const Tensor& b) {
        if (a.rank() != 2 || b.rank() != 2 || a.rows() != b.rows())
            detail::shape_error("concat_last_dim", a.shape(), b.shape());
        const std::size_t rows = a.rows(), ca = a.cols(), cb = b.cols();
        Tensor out = make({rows, ca + cb}, a, b);
        for (std::size_t r = 0; r < rows; ++r) {
            std::copy_n(a.data() + r * ca, ca, out.data() + r * (ca + cb));
            std::copy_n(b.data() + r * cb, cb, out.data() + r * (ca + cb) + ca);
        }
        if (out.requires_grad()) {
            record(out, {a, b}, [a, b, out, rows, ca, cb] {
                const auto& g = out.grad();
                if (a.requires_grad()) {
                    auto& ga = a.ensure_grad();
                    for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t c = 0; c < ca; ++c)
                            ga[r * ca + c] += g[r * (ca + cb) + c];
                }
                if (b.requires_grad()) {
                    auto& gb = b.ensure_grad();
                    for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t c = 0; c < cb; ++c)
                            gb[r * cb + c] += g[r * (ca + cb) + ca + c];
                }
            });
        }
        return out;
    }

    // {1,N} (or {N}) replicated to {B,N}.
    Tensor broadcast_rows(const Tensor& a, std::size_t b_rows) {
        if (a.rows() != 1 && a.rank() != 1)
            throw std::invalid_argument("broadcast_rows: expected a single row, got " +
                                        detail::shape_str(a.shape()));
        const std::size_t cols = a.numel();
        Tensor out = make({b_rows, cols}, a);
        for (std::size_t r = 0; r < b_rows; ++r) std::copy_n(a.data(), cols, out.data() + r * cols);
        if (out.requires_grad()) {
            record(out, {a}, [a, out, b_rows, cols] {
                const auto& g = out.grad();
                auto& ga = a.ensure_grad();
                for (std::size_t r = 0; r < b_rows; ++r)
                    for (std::size_t c = 0; c < cols; ++c) ga[c] += g[r * cols + c];
            });
        }
        return out;
    }

    Tensor sum(const Tensor& a) {
        Tensor out = make({1}, a);
        out.data()[0] = std::accumulate(a.data(), a.data() + a.numel(), 0.0);
        if (out.requires_grad()) {
            record(out, {a}, [a, out] {
                const double g = out.grad()[0];
                auto& ga = a.ensure_grad();
                for (auto& v : ga) v += g;
            });
        }
        return out;
    }

    Tensor mean(const Tensor& a) {
        if (a.numel() == 0) throw std::invalid_argument("mean: empty tensor");
        Tensor out = make({1}, a);
        const double inv = 1.0 / static_cast<double>(a.numel());
        out.data()[0] = std::accumulate(a.data(), a.data() + a.numel(), 0.0) * inv;
        if (out.requires_grad()) {
            record(out, {a}, [a, out, inv] {
                const double g = out.grad()[0] * inv;
                auto& ga = a.ensure_grad();
                for (auto& v : ga) v += g;
            });
        }
        return out;
    }

    Tensor silu(const Tensor& a) {
        Tensor out = make(a.shape(), a);
        const std::size_t n = a.numel();
        // sigmoids cached for the backward pass
        auto sig = std::make_shared<Buffer>();
        sig->resize(n);
        double* sp = sig->data();
        for (std::size_t i = 0; i < n; ++i) {
            const double x = a.data()[i];
            const double s = 1.0 / (1.0 + detail::fast_exp(-x));
            sp[i] = s;
            out.data()[i] = x * s;
        }
        if (out.requires_grad()) {
            record(out, {a}, [a, out, sig] {
                const auto& g = out.grad();
                auto& ga = a.ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) {
                    const double s = (*sig)[i];
                    ga[i] += g[i] * s * (1.0 + a.data()[i] * (1.0 - s));
                }
            });
        }
        return out;
    }

    Tensor relu(const Tensor& a) {
        Tensor out = make(a.shape(), a);
        const std::size_t n = a.numel();
        for (std::size_t i = 0; i < n; ++i) out.data()[i] = std::max(0.0, a.data()[i]);
        if (out.requires_grad()) {
            record(out, {a}, [a, out] {
                const auto& g = out.grad();
                auto& ga = a.ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i)
                    if (a.data()[i] > 0.0) ga[i] += g[i];
            });
        }
        return out;
    }

    Tensor sin(const Tensor& a) {
        Tensor out = make(a.shape(), a);
        for (std::size_t i = 0; i < a.numel(); ++i) out.data()[i] = std::sin(a.data()[i]);
        if (out.requires_grad()) {
            record(out, {a}, [a, out] {
                const auto& g = out.grad();
                auto& ga = a.ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * std::cos(a.data()[i]);
            });
        }
        return out;
    }

    Tensor cos(const Tensor& a) {
        Tensor out = make(a.shape(), a);
        for (std::size_t i = 0; i < a.numel(); ++i) out.data()[i] = std::cos(a.data()[i]);
        if (out.requires_grad()) {
            record(out, {a}, [a, out] {
                const auto& g = out.grad();
                auto& ga = a.ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] -= g[i] * std::sin(a.data()[i]);
            });
        }
        return out;
    }

    Tensor abs(const Tensor& a) {
        Tensor out = make(a.shape(), a);
        for (std::size_t i = 0; i < a.numel(); ++i) out.data()[i] = std::fabs(a.data()[i]);
        if (out.requires_grad()) {
            record(out, {a}, [a, out] {
                const auto& g = out.grad();
                auto& ga = a.ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) {
                    const double x = a.data()[i];
                    ga[i] += g[i] * (x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0));
                }
            });
        }
        return out;
    }

    // Normalizes each row to zero mean / unit variance (epsilon-regularized),
    // then applies the affine gain/bias over the last dimension.
    Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                      double eps = 1e-5) {
        if (x.rank() != 2) throw std::invalid_argument("layer_norm: expected rank-2 input");
        const std::size_t rows = x.rows(), cols = x.cols();
        if (gain.numel() != cols) detail::shape_error("layer_norm gain", x.shape(), gain.shape());
        if (bias.numel() != cols) detail::shape_error("layer_norm bias", x.shape(), bias.shape());
        Tensor out = make(x.shape(), x, gain, bias);
        // keep per-row statistics and normalized values for backward
        auto xhat = std::make_shared<Buffer>();
        xhat->resize(rows * cols);
        auto inv_std = std::make_shared<Buffer>();
        inv_std->resize(rows);
        for (std::size_t r = 0; r < rows; ++r) {
            const double* xr = x.data() + r * cols;
            double mu = 0.0;
            for (std::size_t c = 0; c < cols; ++c) mu += xr[c];
            mu /= static_cast<double>(cols);
            double var = 0.0;
            for (std::size_t c = 0; c < cols; ++c) {
                const double d = xr[c] - mu;
                var += d * d;
            }
            var /= static_cast<double>(cols);
            const double is = 1.0 / std::sqrt(var + eps);
            (*inv_std)[r] = is;
            for (std::size_t c = 0; c < cols; ++c) {
                const double h = (xr[c] - mu) * is;
                (*xhat)[r * cols + c] = h;
                out.data()[r * cols + c] = gain.data()[c] * h + bias.data()[c];
            }
        }
        if (out.requires_grad()) {
            record(out, {x, gain, bias}, [x, gain, bias, out, xhat, inv_std, rows, cols] {
                const auto& g = out.grad();
                if (gain.requires_grad()) {
                    auto& gg = gain.ensure_grad();
                    for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t c = 0; c < cols; ++c)
                            gg[c] += g[r * cols + c] * (*xhat)[r * cols + c];
                }
                if (bias.requires_grad()) {
                    auto& gb = bias.ensure_grad();
                    for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t c = 0; c < cols; ++c) gb[c] += g[r * cols + c];
                }
                if (x.requires_grad()) {
                    auto& gx = x.ensure_grad();
                    const double invn = 1.0 / static_cast<double>(cols);
                    for (std::size_t r = 0; r < rows; ++r) {
                        // dy = gain .* g ; dx = (dy - mean(dy) - xhat*mean(dy.*xhat)) * inv_std
                        double m1 = 0.0, m2 = 0.0;
                        for (std::size_t c = 0; c < cols; ++c) {
                            const double dy = g[r * cols + c] * gain.data()[c];
                            m1 += dy;
                            m2 += dy * (*xhat)[r * cols + c];
                        }
                        m1 *= invn;
                        m2 *= invn;
                        const double is = (*inv_std)[r];
                        for (std::size_t c = 0; c < cols; ++c) {
                            const double dy = g[r * cols + c] * gain.data()[c];
                            gx[r * cols + c] +=
                                (dy - m1 - (*xhat)[r * cols + c] * m2) * is;
                        }
                    }
                }
            });
        }
        return out;
    }

    // Row-wise squared Euclidean distance: out[r] = ||a_r - b_r||^2, shape {B,1}.
    Tensor sq_l2(const Tensor& a, const Tensor& b) {
        if (a.shape() != b.shape()) detail::shape_error("sq_l2", a.shape(), b.shape());
        const std::size_t rows = a.rank() == 2 ? a.rows() : 1;
        const std::size_t cols = a.rank() == 2 ? a.cols() : a.numel();
        Tensor out = make({rows, 1}, a, b);
        for (std::size_t r = 0; r < rows; ++r) {
            double acc = 0.0;
            for (std::size_t c = 0; c < cols; ++c) {
                const double d = a.data()[r * cols + c] - b.data()[r * cols + c];
                acc += d * d;
            }
            out.data()[r] = acc;
        }
        if (out.requires_grad()) {
            record(out, {a, b}, [a, b, out, rows, cols] {
                const auto& g = out.grad();
                for (std::size_t r = 0; r < rows; ++r) {
                    const double gr = 2.0 * g[r];
                    if (a.requires_grad()) {
                        auto& ga = a.ensure_grad();
                        for (std::size_t c = 0; c < cols; ++c)
                            ga[r * cols + c] +=
                                gr * (a.data()[r * cols + c] - b.data()[r * cols + c]);
                    }
                    if (b.requires_grad()) {
                        auto& gb = b.ensure_grad();
                        for (std::size_t c = 0; c < cols; ++c)
                            gb[r * cols + c] -=
                                gr * (a.data()[r * cols + c] - b.data()[r * cols + c]);
                    }
                }
            });
        }
        return out;
    }

    // Embedding lookup. Gradients flow only to the selected rows.
    Tensor gather_rows(const Tensor& table, const std::vector<std::size_t>& idx) {
        if (table.rank() != 2)
            throw std::invalid_argument("gather_rows: table must be rank-2");
        const std::size_t cols = table.cols();
        for (auto i : idx)
            if (i >= table.rows())
                throw std::invalid_argument("gather_rows: index " + std::to_string(i) +
                                            " out of range [0," + std::to_string(table.rows()) +
                                            ")");
        Tensor out = make({idx.size(), cols}, table);
        for (std::size_t r = 0; r < idx.size(); ++r)
            std::copy_n(table.data() + idx[r] * cols, cols, out.data() + r * cols);
        if (out.requires_grad()) {
            record(out, {table}, [table, out, idx, cols] {
                const auto& g = out.grad();
                auto& gt = table.ensure_grad();
                for (std::size_t r = 0; r < idx.size(); ++r)
                    for (std::size_t c = 0; c < cols; ++c)
                        gt[idx[r] * cols + c] += g[r * cols + c];
            });
        }
        return out;
    }

    // y = h W + b where [W|b] is packed flat as wb = [W row-major (d x n), b (n)].
    // The packed form is what a hypernetwork emits for one condition.
    Tensor hyper_linear(const Tensor& h, const Tensor& wb, std::size_t n_out) {
        if (h.rank() != 2) throw std::invalid_argument("hyper_linear: h must be rank-2");
        const std::size_t rows = h.rows(), d = h.cols();
        if (wb.numel() != d * n_out + n_out)
            throw std::invalid_argument("hyper_linear: packed parameter size " +
                                        std::to_string(wb.numel()) + " != " +
                                        std::to_string(d * n_out + n_out));
        Tensor out = make({rows, n_out}, h, wb);
        const double* w = wb.data();            // (d x n_out) row-major
        const double* bias = wb.data() + d * n_out;
        const int m = static_cast<int>(rows), nn = static_cast<int>(n_out),
                  kk = static_cast<int>(d);
        cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, m, nn, kk, 1.0, h.data(), kk, w,
                    nn, 0.0, out.data(), nn);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < n_out; ++c) out.data()[r * n_out + c] += bias[c];
        if (out.requires_grad()) {
            record(out, {h, wb}, [h, wb, out, rows, d, n_out, m, nn, kk] {
                const double* g = out.grad().data();
                if (h.requires_grad()) {
                    // dh += G * W^T
                    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, m, kk, nn, 1.0, g, nn,
                                wb.data(), nn, 1.0, h.ensure_grad().data(), kk);
                }
                if (wb.requires_grad()) {
                    auto& gw = wb.ensure_grad();
                    // dW += h^T * G, db += column sums of G
                    cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, kk, nn, m, 1.0, h.data(),
                                kk, g, nn, 1.0, gw.data(), nn);
                    double* gb = gw.data() + d * n_out;
                    for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t c = 0; c < n_out; ++c) gb[c] += g[r * n_out + c];
                }
            });
        }
        return out;
    }

    // Registers externally created data (e.g. a batch) on this tape.
    Tensor constant(const Tensor& t) { return t.detached(); }

private:
    struct Op {
        std::int64_t out;
        std::vector<std::int64_t> inputs;
        std::function<void()> backward;
    };

    static std::uint64_t next_tape_id() {
        static std::uint64_t counter = 0;
        return ++counter;
    }

    template <typename... Ts>
    Tensor make(Shape shape, const Ts&... inputs) {
        (check_tape(inputs), ...);
        Tensor out = Tensor::uninitialized(std::move(shape));
        out.requires_grad_ = grad_enabled_ && (inputs.requires_grad() || ...);
        if (out.requires_grad_) {
            out.node_ = next_node_++;
            out.tape_id_ = id_;
        }
        return out;
    }

    void check_tape(const Tensor& t) const {
        if (t.node_ >= 0 && t.tape_id_ != id_)
            throw std::invalid_argument("Tape: input tensor belongs to a different tape");
    }

    template <typename F>
    void record(const Tensor& out, std::initializer_list<Tensor> inputs, F&& backward) {
        Op op;
        op.out = out.node_;
        for (const auto& t : inputs) op.inputs.push_back(t.node_);
        op.backward = std::forward<F>(backward);
        ops_.push_back(std::move(op));
    }

    std::vector<Op> ops_;
    bool grad_enabled_ = true;
    std::int64_t next_node_ = 0;
    std::uint64_t id_ = 0;
    bool consumed_ = false;
};

} // namespace cotmap
