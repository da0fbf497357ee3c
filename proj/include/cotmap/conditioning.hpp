// Condition encoding and latent modulation.
//
// A Condition carries an optional category index and an optional continuous
// value normalized to [0,1]. The encoder turns whichever parts are enabled
// into a single vector c through learnable embeddings, a fixed positional /
// Fourier / scalar featurization, and a small SiLU MLP. Four interchangeable
// mechanisms then apply c to the latent; the hypernetwork variant generates
// the weights of the conditioned layer from c.
#pragma once

#include <cmath>
#include <optional>
#include <stdexcept>
#include <vector>

#include "cotmap/init.hpp"
#include "cotmap/rng.hpp"
#include "cotmap/tensor.hpp"

namespace cotmap {

struct Condition {
    std::optional<std::size_t> discrete;  // category index in [0,K)
    std::optional<double> continuous;     // min-max normalized to [0,1]

    static Condition categorical(std::size_t k) { return {k, std::nullopt}; }
    static Condition scalar(double p) { return {std::nullopt, p}; }
    static Condition both(std::size_t k, double p) { return {k, p}; }

    void validate() const {
        if (!discrete && !continuous)
            throw std::invalid_argument("Condition: at least one of discrete/continuous required");
        if (continuous && (*continuous < 0.0 || *continuous > 1.0))
            throw std::invalid_argument("Condition: continuous value " +
                                        std::to_string(*continuous) + " outside [0,1]");
    }
};

enum class ContEncoding { positional, fourier, scalar };

inline const char* to_string(ContEncoding e) {
    switch (e) {
        case ContEncoding::positional: return "pe";
        case ContEncoding::fourier: return "fourier";
        case ContEncoding::scalar: return "scalar";
    }
    return "?";
}

// Interleaved sinusoidal features:
//   out[2i]   = sin(p / 10000^{2i/d})
//   out[2i+1] = cos(p / 10000^{2i/d})
inline std::vector<double> positional_encode(double p, std::size_t d) {
    if (d == 0 || d % 2 != 0)
        throw std::invalid_argument("positional_encode: dimension must be even and positive");
    std::vector<double> out(d);
    for (std::size_t i = 0; i < d / 2; ++i) {
        const double freq = std::pow(10000.0, 2.0 * static_cast<double>(i) / static_cast<double>(d));
        out[2 * i] = std::sin(p / freq);
        out[2 * i + 1] = std::cos(p / freq);
    }
    return out;
}

// Random Fourier features with frozen frequencies: [sin(2 pi f p), cos(2 pi f p)].
inline std::vector<double> fourier_encode(double p, const std::vector<double>& freqs) {
    std::vector<double> out(2 * freqs.size());
    for (std::size_t k = 0; k < freqs.size(); ++k) {
        out[2 * k] = std::sin(2.0 * M_PI * freqs[k] * p);
        out[2 * k + 1] = std::cos(2.0 * M_PI * freqs[k] * p);
    }
    return out;
}

inline std::vector<double> fourier_frequencies(std::size_t d, double sigma, Rng& rng) {
    if (d == 0 || d % 2 != 0)
        throw std::invalid_argument("fourier_encode: dimension must be even and positive");
    std::vector<double> f(d / 2);
    for (auto& v : f) v = rng.normal(0.0, sigma);
    return f;
}

inline std::vector<double> scalar_encode(double p) { return {p}; }

struct CondEncoderConfig {
    std::size_t n_categories = 0;       // 0 disables the discrete part
    bool continuous = false;
    ContEncoding encoding = ContEncoding::positional;
    std::size_t enc_dim = 64;           // continuous featurization width
    std::size_t cond_dim = 64;          // d_c, output width
    std::size_t hidden = 128;           // combine MLP width
    double fourier_sigma = 1.0;

    bool discrete_enabled() const { return n_categories > 0; }
    std::size_t mlp_in() const {
        return (discrete_enabled() ? cond_dim : 0) +
               (continuous ? (encoding == ContEncoding::scalar ? 1 : enc_dim) : 0);
    }
};

// Embedding table + combine MLP. T and f hold separate instances unless the
// shared-embedding ablation is enabled.
struct CondEncoderParams {
    CondEncoderConfig cfg;
    Tensor embedding; // K x cond_dim
    Tensor mlp_w1, mlp_b1, mlp_w2, mlp_b2;
    std::vector<double> fourier_freqs; // frozen at init

    static CondEncoderParams init(const CondEncoderConfig& cfg, Rng& rng) {
        if (!cfg.discrete_enabled() && !cfg.continuous)
            throw std::invalid_argument("CondEncoderParams: no conditioning enabled");
        CondEncoderParams p;
        p.cfg = cfg;
        if (cfg.discrete_enabled())
            p.embedding = normal_init({cfg.n_categories, cfg.cond_dim}, 1.0, rng);
        if (cfg.continuous && cfg.encoding == ContEncoding::fourier)
            p.fourier_freqs = fourier_frequencies(cfg.enc_dim, cfg.fourier_sigma, rng);
        p.mlp_w1 = orthogonal_init({cfg.mlp_in(), cfg.hidden}, 1.0, rng);
        p.mlp_b1 = Tensor::zeros({cfg.hidden}, true);
        p.mlp_w2 = orthogonal_init({cfg.hidden, cfg.cond_dim}, 1.0, rng);
        p.mlp_b2 = Tensor::zeros({cfg.cond_dim}, true);
        return p;
    }

    // c = MLP([e_discrete, enc(p)]) as a {1, cond_dim} row.
    Tensor encode(Tape& tape, const Condition& cond) const {
        cond.validate();
        Tensor parts;
        if (cfg.discrete_enabled()) {
            if (!cond.discrete)
                throw std::invalid_argument("Condition: discrete part required by configuration");
            parts = tape.gather_rows(embedding, {*cond.discrete});
        } else if (cond.discrete) {
            throw std::invalid_argument("Condition: discrete part not configured");
        }
        if (cfg.continuous) {
            if (!cond.continuous)
                throw std::invalid_argument("Condition: continuous part required by configuration");
            std::vector<double> enc;
            switch (cfg.encoding) {
                case ContEncoding::positional: enc = positional_encode(*cond.continuous, cfg.enc_dim); break;
                case ContEncoding::fourier: enc = fourier_encode(*cond.continuous, fourier_freqs); break;
                case ContEncoding::scalar: enc = scalar_encode(*cond.continuous); break;
            }
            Tensor enc_t({1, enc.size()}, std::move(enc), false);
            parts = parts.defined() ? tape.concat_last_dim(parts, enc_t) : enc_t;
        } else if (cond.continuous) {
            throw std::invalid_argument("Condition: continuous part not configured");
        }
        Tensor h = tape.silu(tape.add(tape.matmul(parts, mlp_w1), mlp_b1));
        return tape.add(tape.matmul(h, mlp_w2), mlp_b2);
    }

    void collect(std::vector<Tensor*>& out) {
        if (embedding.defined()) out.push_back(&embedding);
        out.push_back(&mlp_w1);
        out.push_back(&mlp_b1);
        out.push_back(&mlp_w2);
        out.push_back(&mlp_b2);
    }
};

// Shallow MLP c -> [W|b] for the conditioned layer y = h W + b. The output
// head starts with near-zero weights and a bias packing an orthogonal W0, so
// the conditioned layer begins as a fixed orthogonal map no matter the
// condition; this keeps pretrained behavior intact when conditioning starts
// to move.
struct HyperParams {
    std::size_t d_in = 0, d_out = 0;
    Tensor w1, b1, w2, b2;

    static HyperParams init(std::size_t cond_dim, std::size_t hidden, std::size_t d_in,
                            std::size_t d_out, Rng& rng) {
        HyperParams p;
        p.d_in = d_in;
        p.d_out = d_out;
        p.w1 = orthogonal_init({cond_dim, hidden}, 1.0, rng);
        p.b1 = Tensor::zeros({hidden}, true);
        const std::size_t out = d_in * d_out + d_out;
        p.w2 = normal_init({hidden, out}, 1e-3, rng);
        Tensor w0 = orthogonal_init({d_in, d_out}, 1.0, rng, false);
        std::vector<double> bias(out, 0.0);
        std::copy(w0.values().begin(), w0.values().end(), bias.begin());
        p.b2 = Tensor({out}, std::move(bias), true);
        return p;
    }

    // Packed [W|b] of the conditioned layer for one condition vector {1,d_c}.
    Tensor generate(Tape& tape, const Tensor& c) const {
        Tensor h = tape.silu(tape.add(tape.matmul(c, w1), b1));
        return tape.add(tape.matmul(h, w2), b2);
    }

    void collect(std::vector<Tensor*>& out) {
        out.push_back(&w1);
        out.push_back(&b1);
        out.push_back(&w2);
        out.push_back(&b2);
    }
};

inline Tensor apply_hypernet(Tape& tape, const Tensor& h, const Tensor& c,
                             const HyperParams& hp) {
    if (h.cols() != hp.d_in)
        throw std::invalid_argument("apply_hypernet: latent width " + std::to_string(h.cols()) +
                                    " != " + std::to_string(hp.d_in));
    Tensor wb = hp.generate(tape, c);
    return tape.hyper_linear(h, wb, hp.d_out);
}

inline Tensor apply_concat(Tape& tape, const Tensor& h, const Tensor& c) {
    return tape.concat_last_dim(h, tape.broadcast_rows(c, h.rows()));
}

// Linear maps of c for gamma/beta; gamma starts at 1, beta at 0.
struct FilmParams {
    Tensor wg, bg, wb, bb;

    static FilmParams init(std::size_t cond_dim, std::size_t d, Rng& rng) {
        FilmParams p;
        p.wg = normal_init({cond_dim, d}, 1e-3, rng);
        p.bg = Tensor::full({d}, 1.0, true);
        p.wb = normal_init({cond_dim, d}, 1e-3, rng);
        p.bb = Tensor::zeros({d}, true);
        return p;
    }

    void collect(std::vector<Tensor*>& out) {
        out.push_back(&wg);
        out.push_back(&bg);
        out.push_back(&wb);
        out.push_back(&bb);
    }
};

inline Tensor apply_film(Tape& tape, const Tensor& h, const Tensor& c, const FilmParams& fp) {
    Tensor gamma = tape.add(tape.matmul(c, fp.wg), fp.bg); // {1,d}
    Tensor beta = tape.add(tape.matmul(c, fp.wb), fp.bb);
    return tape.add(tape.mul(h, tape.broadcast_rows(gamma, h.rows())),
                    tape.broadcast_rows(beta, h.rows()));
}

inline Tensor apply_cln(Tape& tape, const Tensor& h, const Tensor& c, const FilmParams& fp) {
    Tensor ones = Tensor::full({h.cols()}, 1.0, false);
    Tensor zeros = Tensor::zeros({h.cols()}, false);
    Tensor normalized = tape.layer_norm(h, ones, zeros);
    return apply_film(tape, normalized, c, fp);
}

} // namespace cotmap
