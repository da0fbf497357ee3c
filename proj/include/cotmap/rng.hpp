// Deterministic splittable random number generator.
//
// Every stochastic component takes an Rng by reference; there is no global
// generator state. split() derives an independent child stream from the
// parent's seed and a stream label, so subsystems can be reseeded
// reproducibly regardless of how many draws other subsystems consumed.
#pragma once

#include <cstdint>
#include <cmath>
#include <stdexcept>
#include <vector>

namespace cotmap {

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t& x) {
    x += 0x9E3779B97F4A7C15ULL;
    std::uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

} // namespace detail

class Rng {
public:
    explicit Rng(std::uint64_t seed) : seed_(seed) {
        std::uint64_t s = seed;
        for (auto& w : state_) w = detail::splitmix64(s);
    }

    std::uint64_t seed() const { return seed_; }

    // Child generator identified by (parent seed, stream). Pure function of
    // its arguments: splitting is unaffected by draws made on the parent.
    Rng split(std::uint64_t stream) const {
        std::uint64_t s = seed_ ^ (0xD1B54A32D192ED03ULL * (stream + 1));
        return Rng(detail::splitmix64(s));
    }

    // xoshiro256++
    std::uint64_t next_u64() {
        const std::uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
        const std::uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    // Uniform on [0,1) with 53-bit resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    std::size_t index(std::size_t n) {
        if (n == 0) throw std::invalid_argument("Rng::index: n must be positive");
        return static_cast<std::size_t>(next_u64() % n);
    }

    // Box-Muller without caching; one value per call keeps the stream layout
    // independent of call parity.
    double normal() {
        double u1;
        do { u1 = uniform(); } while (u1 <= 0.0);
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // Marsaglia-Tsang; shape < 1 handled by the boost G(a) = G(a+1) * U^{1/a}.
    double gamma(double shape) {
        if (shape <= 0.0) throw std::invalid_argument("Rng::gamma: shape must be positive");
        if (shape < 1.0) {
            const double u = std::max(uniform(), 1e-300);
            return gamma(shape + 1.0) * std::pow(u, 1.0 / shape);
        }
        const double d = shape - 1.0 / 3.0;
        const double c = 1.0 / std::sqrt(9.0 * d);
        for (;;) {
            double x, v;
            do {
                x = normal();
                v = 1.0 + c * x;
            } while (v <= 0.0);
            v = v * v * v;
            const double u = uniform();
            if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
            if (u > 0.0 && std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
        }
    }

    double beta(double a, double b) {
        const double x = gamma(a);
        const double y = gamma(b);
        return x / (x + y);
    }

    std::vector<double> normal_vec(std::size_t n, double mean = 0.0, double stddev = 1.0) {
        std::vector<double> out(n);
        for (auto& v : out) v = normal(mean, stddev);
        return out;
    }

    std::vector<double> uniform_vec(std::size_t n, double lo, double hi) {
        std::vector<double> out(n);
        for (auto& v : out) v = uniform(lo, hi);
        return out;
    }

private:
    static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    std::uint64_t seed_;
    std::uint64_t state_[4];
};

} // namespace cotmap
