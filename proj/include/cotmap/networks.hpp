// Residual encoder/decoder transport map T(x,z,c) and critic f(y,c).
//
// Both networks share one structure: a linear stem into the hidden width,
// residual blocks, a projection to the latent, the conditioning mechanism,
// then a decoder stack back out. The transport map consumes [x,z]; the
// critic reads target-space samples and emits one score per row.
#pragma once

#include <cstdint>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "cotmap/conditioning.hpp"
#include "cotmap/init.hpp"
#include "cotmap/matrix.hpp"
#include "cotmap/rng.hpp"
#include "cotmap/tensor.hpp"

namespace cotmap {

enum class CondKind { none, hypernet, concat, film, cln };

inline const char* to_string(CondKind k) {
    switch (k) {
        case CondKind::none: return "none";
        case CondKind::hypernet: return "hypernet";
        case CondKind::concat: return "concat";
        case CondKind::film: return "film";
        case CondKind::cln: return "cln";
    }
    return "?";
}

inline CondKind cond_kind_from(const std::string& s) {
    if (s == "none") return CondKind::none;
    if (s == "hypernet") return CondKind::hypernet;
    if (s == "concat") return CondKind::concat;
    if (s == "film") return CondKind::film;
    if (s == "cln") return CondKind::cln;
    throw std::invalid_argument("unknown conditioning kind: " + s);
}

inline ContEncoding cont_encoding_from(const std::string& s) {
    if (s == "pe" || s == "positional") return ContEncoding::positional;
    if (s == "fourier") return ContEncoding::fourier;
    if (s == "scalar") return ContEncoding::scalar;
    throw std::invalid_argument("unknown continuous encoding: " + s);
}

struct ArchConfig {
    std::size_t input_dim = 2; // n; source and target share the dimension
    std::size_t noise_dim = 2; // s

    std::size_t hidden = 128;
    std::size_t t_encoder_blocks = 4;
    std::size_t t_decoder_blocks = 8;
    std::size_t t_latent = 64;      // d
    std::size_t t_cond_latent = 64; // d'
    std::size_t f_encoder_blocks = 3;
    std::size_t f_decoder_blocks = 3;
    std::size_t f_latent = 32;
    std::size_t f_cond_latent = 32;

    CondKind conditioning = CondKind::none;
    std::size_t n_categories = 0; // 0 disables the discrete condition
    bool continuous_condition = false;
    ContEncoding cont_encoding = ContEncoding::positional;
    std::size_t cond_dim = 64; // d_c
    std::size_t enc_dim = 64;
    std::size_t cond_hidden = 128;  // combine MLP width
    std::size_t hyper_hidden = 128; // hypernetwork width
    double fourier_sigma = 1.0;
    bool shared_embeddings = false;

    double resblock_alpha = 0.1;

    bool has_condition() const { return n_categories > 0 || continuous_condition; }

    void validate() const {
        if (input_dim == 0 || hidden == 0) throw std::invalid_argument("ArchConfig: zero width");
        if (has_condition() && conditioning == CondKind::none)
            throw std::invalid_argument("ArchConfig: condition declared but mechanism is none");
        if (!has_condition() && conditioning != CondKind::none)
            throw std::invalid_argument("ArchConfig: conditioning mechanism without condition");
    }

    // width of the decoder stem input under the chosen mechanism
    std::size_t conditioned_latent(bool transport) const {
        const std::size_t d = transport ? t_latent : f_latent;
        switch (conditioning) {
            case CondKind::none: return d;
            case CondKind::hypernet: return transport ? t_cond_latent : f_cond_latent;
            case CondKind::concat: return d + cond_dim;
            case CondKind::film:
            case CondKind::cln: return d;
        }
        return d;
    }

    CondEncoderConfig encoder_config() const {
        return {n_categories, continuous_condition, cont_encoding,
                enc_dim,      cond_dim,             cond_hidden,  fourier_sigma};
    }
};

struct LinearParams {
    Tensor w, b;

    static LinearParams init(std::size_t in, std::size_t out, Rng& rng) {
        return {orthogonal_init({in, out}, 1.0, rng), Tensor::zeros({out}, true)};
    }

    Tensor forward(Tape& tape, const Tensor& x) const { return tape.linear(x, w, b); }

    void collect(std::vector<Tensor*>& out) {
        out.push_back(&w);
        out.push_back(&b);
    }
};

// h + alpha * F(h) with F = LayerNorm -> Linear -> SiLU -> Linear.
// alpha starts small so the block opens near the identity.
struct ResBlockParams {
    Tensor ln_gain, ln_bias;
    LinearParams fc1, fc2;
    Tensor alpha;

    static ResBlockParams init(std::size_t width, double alpha0, Rng& rng) {
        ResBlockParams p;
        p.ln_gain = Tensor::full({width}, 1.0, true);
        p.ln_bias = Tensor::zeros({width}, true);
        p.fc1 = LinearParams::init(width, width, rng);
        p.fc2 = LinearParams::init(width, width, rng);
        p.alpha = Tensor::scalar(alpha0, true);
        return p;
    }

    Tensor forward(Tape& tape, const Tensor& h) const {
        Tensor f = tape.layer_norm(h, ln_gain, ln_bias);
        f = tape.silu(fc1.forward(tape, f));
        f = fc2.forward(tape, f);
        return tape.add(h, tape.mul(f, alpha));
    }

    void collect(std::vector<Tensor*>& out) {
        out.push_back(&ln_gain);
        out.push_back(&ln_bias);
        fc1.collect(out);
        fc2.collect(out);
        out.push_back(&alpha);
    }
};

struct ConditioningParams {
    CondKind kind = CondKind::none;
    CondEncoderParams encoder;
    HyperParams hyper;
    FilmParams film;

    static ConditioningParams init(const ArchConfig& arch, bool transport, Rng& rng) {
        ConditioningParams p;
        p.kind = arch.conditioning;
        if (p.kind == CondKind::none) return p;
        p.encoder = CondEncoderParams::init(arch.encoder_config(), rng);
        const std::size_t d = transport ? arch.t_latent : arch.f_latent;
        const std::size_t dp = transport ? arch.t_cond_latent : arch.f_cond_latent;
        switch (p.kind) {
            case CondKind::hypernet:
                p.hyper = HyperParams::init(arch.cond_dim, arch.hyper_hidden, d, dp, rng);
                break;
            case CondKind::film:
            case CondKind::cln:
                p.film = FilmParams::init(arch.cond_dim, d, rng);
                break;
            default: break;
        }
        return p;
    }

    Tensor apply(Tape& tape, const Tensor& h, const std::optional<Condition>& cond) const {
        if (kind == CondKind::none) {
            if (cond)
                throw std::invalid_argument("forward: condition given to an unconditional network");
            return h;
        }
        if (!cond)
            throw std::invalid_argument("forward: configuration declares conditioning, none given");
        Tensor c = encoder.encode(tape, *cond);
        switch (kind) {
            case CondKind::hypernet: return apply_hypernet(tape, h, c, hyper);
            case CondKind::concat: return apply_concat(tape, h, c);
            case CondKind::film: return apply_film(tape, h, c, film);
            case CondKind::cln: return apply_cln(tape, h, c, film);
            default: return h;
        }
    }

    void collect(std::vector<Tensor*>& out) {
        if (kind == CondKind::none) return;
        encoder.collect(out);
        if (kind == CondKind::hypernet) hyper.collect(out);
        if (kind == CondKind::film || kind == CondKind::cln) film.collect(out);
    }
};

struct NetworkParams {
    LinearParams stem;
    std::vector<ResBlockParams> enc_blocks;
    LinearParams proj;
    ConditioningParams cond;
    LinearParams dec_stem;
    std::vector<ResBlockParams> dec_blocks;
    LinearParams head;

    static NetworkParams init(const ArchConfig& arch, bool transport, Rng& rng) {
        NetworkParams p;
        const std::size_t in = transport ? arch.input_dim + arch.noise_dim : arch.input_dim;
        const std::size_t out = transport ? arch.input_dim : 1;
        const std::size_t enc_n = transport ? arch.t_encoder_blocks : arch.f_encoder_blocks;
        const std::size_t dec_n = transport ? arch.t_decoder_blocks : arch.f_decoder_blocks;
        const std::size_t latent = transport ? arch.t_latent : arch.f_latent;
        p.stem = LinearParams::init(in, arch.hidden, rng);
        for (std::size_t i = 0; i < enc_n; ++i)
            p.enc_blocks.push_back(ResBlockParams::init(arch.hidden, arch.resblock_alpha, rng));
        p.proj = LinearParams::init(arch.hidden, latent, rng);
        p.cond = ConditioningParams::init(arch, transport, rng);
        p.dec_stem = LinearParams::init(arch.conditioned_latent(transport), arch.hidden, rng);
        for (std::size_t i = 0; i < dec_n; ++i)
            p.dec_blocks.push_back(ResBlockParams::init(arch.hidden, arch.resblock_alpha, rng));
        p.head = LinearParams::init(arch.hidden, out, rng);
        return p;
    }

    Tensor forward(Tape& tape, const Tensor& input, const std::optional<Condition>& c) const {
        Tensor h = stem.forward(tape, input);
        for (const auto& b : enc_blocks) h = b.forward(tape, h);
        h = proj.forward(tape, h);
        h = cond.apply(tape, h, c);
        h = dec_stem.forward(tape, h);
        for (const auto& b : dec_blocks) h = b.forward(tape, h);
        return head.forward(tape, h);
    }

    void collect(std::vector<Tensor*>& out) {
        stem.collect(out);
        for (auto& b : enc_blocks) b.collect(out);
        proj.collect(out);
        cond.collect(out);
        dec_stem.collect(out);
        for (auto& b : dec_blocks) b.collect(out);
        head.collect(out);
    }
};

// Normalization metadata for the continuous condition: stored with the model
// so evaluation maps user-facing values (e.g. years) exactly like training.
struct CondNormalization {
    double lo = 0.0;
    double hi = 1.0;

    double normalize(double raw) const {
        if (hi == lo) return 0.0;
        return (raw - lo) / (hi - lo);
    }
    double denormalize(double p) const { return lo + p * (hi - lo); }
};

struct Model {
    ArchConfig arch;
    NetworkParams transport; // T
    NetworkParams critic;    // f
    CondNormalization normalization;
    std::uint64_t init_seed = 0;

    static Model init(const ArchConfig& arch, Rng& rng) {
        arch.validate();
        Model m;
        m.arch = arch;
        m.init_seed = rng.seed();
        Rng t_rng = rng.split(1);
        Rng f_rng = rng.split(2);
        m.transport = NetworkParams::init(arch, true, t_rng);
        m.critic = NetworkParams::init(arch, false, f_rng);
        if (arch.shared_embeddings && arch.conditioning != CondKind::none)
            m.critic.cond.encoder = m.transport.cond.encoder; // shared storage
        return m;
    }

    // y = T(x, z, c)
    Tensor transport_forward(Tape& tape, const Tensor& x, const Tensor& z,
                             const std::optional<Condition>& c) const {
        if (x.cols() != arch.input_dim || z.cols() != arch.noise_dim || x.rows() != z.rows())
            throw std::invalid_argument("transport_forward: bad input shapes " +
                                        detail::shape_str(x.shape()) + " / " +
                                        detail::shape_str(z.shape()));
        return transport.forward(tape, tape.concat_last_dim(x.detached(), z.detached()), c);
    }

    // per-sample critic score f(y, c), shape {B,1}
    Tensor critic_forward(Tape& tape, const Tensor& y,
                          const std::optional<Condition>& c) const {
        if (y.cols() != arch.input_dim)
            throw std::invalid_argument("critic_forward: bad input shape " +
                                        detail::shape_str(y.shape()));
        return critic.forward(tape, y, c);
    }

    std::vector<Tensor*> transport_params() {
        std::vector<Tensor*> out;
        transport.collect(out);
        return out;
    }

    std::vector<Tensor*> critic_params() {
        std::vector<Tensor*> out;
        critic.collect(out);
        if (arch.shared_embeddings && arch.conditioning != CondKind::none) {
            // shared encoder tensors alias the transport's: drop duplicates
            std::vector<Tensor*> t;
            transport.collect(t);
            std::set<const void*> t_storage;
            for (auto* p : t) t_storage.insert(static_cast<const void*>(p->data()));
            std::vector<Tensor*> dedup;
            for (auto* p : out)
                if (!t_storage.count(static_cast<const void*>(p->data()))) dedup.push_back(p);
            return dedup;
        }
        return out;
    }

    std::vector<Tensor*> all_params() {
        std::vector<Tensor*> out = transport_params();
        for (auto* p : critic_params()) out.push_back(p);
        return out;
    }

    std::size_t transport_param_count() {
        std::size_t n = 0;
        for (auto* p : transport_params()) n += p->numel();
        return n;
    }

    std::size_t critic_param_count() {
        std::size_t n = 0;
        for (auto* p : critic_params()) n += p->numel();
        return n;
    }
};

// Uniform noise on [-1,1]^s.
inline Tensor sample_noise(std::size_t batch, std::size_t dim, Rng& rng) {
    return Tensor({batch, dim}, rng.uniform_vec(batch * dim, -1.0, 1.0), false);
}

inline Tensor batch_tensor(const Matrix& m) {
    return Tensor({m.rows, m.cols}, m.data, false);
}

inline Matrix to_matrix(const Tensor& t) {
    return Matrix(t.rows(), t.cols(), std::vector<double>(t.values().begin(), t.values().end()));
}

// Analytic parameter count for a configuration; must agree with the sum of
// registered tensor sizes.
inline std::size_t analytic_param_count(const ArchConfig& arch, bool transport) {
    auto linear = [](std::size_t in, std::size_t out) { return in * out + out; };
    const std::size_t in = transport ? arch.input_dim + arch.noise_dim : arch.input_dim;
    const std::size_t out = transport ? arch.input_dim : 1;
    const std::size_t latent = transport ? arch.t_latent : arch.f_latent;
    const std::size_t enc_n = transport ? arch.t_encoder_blocks : arch.f_encoder_blocks;
    const std::size_t dec_n = transport ? arch.t_decoder_blocks : arch.f_decoder_blocks;
    const std::size_t block = 2 * arch.hidden + 2 * linear(arch.hidden, arch.hidden) + 1;
    std::size_t total = linear(in, arch.hidden) + enc_n * block + linear(arch.hidden, latent) +
                        linear(arch.conditioned_latent(transport), arch.hidden) +
                        dec_n * block + linear(arch.hidden, out);
    if (arch.conditioning != CondKind::none) {
        const auto ec = arch.encoder_config();
        total += (ec.discrete_enabled() ? ec.n_categories * ec.cond_dim : 0) +
                 linear(ec.mlp_in(), ec.hidden) + linear(ec.hidden, ec.cond_dim);
        const std::size_t d = latent;
        const std::size_t dp = transport ? arch.t_cond_latent : arch.f_cond_latent;
        if (arch.conditioning == CondKind::hypernet)
            total += linear(arch.cond_dim, arch.hyper_hidden) +
                     linear(arch.hyper_hidden, d * dp + dp);
        if (arch.conditioning == CondKind::film || arch.conditioning == CondKind::cln)
            total += 2 * linear(arch.cond_dim, d);
    }
    return total;
}

} // namespace cotmap
