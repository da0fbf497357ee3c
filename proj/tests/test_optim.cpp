#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "cotmap/optim.hpp"
#include "cotmap/rng.hpp"
#include "cotmap/tensor.hpp"

using namespace cotmap;

TEST_CASE("zero gradients leave parameters unchanged", "[optim]") {
    Tensor p({3}, {1.0, -2.0, 0.5}, true);
    p.ensure_grad();
    AdamW opt({.lr = 0.1, .weight_decay = 0.0});
    opt.step({&p});
    CHECK(p.values()[0] == 1.0);
    CHECK(p.values()[1] == -2.0);
    CHECK(p.values()[2] == 0.5);
}

TEST_CASE("first step matches the hand-computed update", "[optim]") {
    Tensor p({1}, {1.0}, true);
    p.ensure_grad()[0] = 1.0;
    AdamW opt({.lr = 0.1, .beta1 = 0.9, .beta2 = 0.999, .eps = 1e-8, .weight_decay = 0.0});
    opt.step({&p});

    // Hand computation: m = (1-b1)g, v = (1-b2)g^2; bias-corrected
    // mhat = g, vhat = g^2; step = lr * g / (|g| + eps).
    const double g = 1.0;
    const double mhat = g;
    const double vhat = g * g;
    const double expected = 1.0 - 0.1 * mhat / (std::sqrt(vhat) + 1e-8);
    CHECK(std::fabs(p.values()[0] - expected) < 1e-15);
    // The epsilon shifts the step by ~1e-9 from the idealized -lr.
    CHECK(std::fabs(p.values()[0] - 0.9) < 3e-9);
}

TEST_CASE("decoupled weight decay applies before the moment update", "[optim]") {
    Tensor p({1}, {1.0}, true);
    p.ensure_grad();
    AdamW opt({.lr = 0.1, .weight_decay = 0.5});
    opt.step({&p});
    CHECK(p.values()[0] == Catch::Approx(0.95).epsilon(1e-14));
}

TEST_CASE("gradient norm 10 is scaled to the clip threshold", "[optim]") {
    Tensor a({1}, {0.0}, true);
    Tensor b({1}, {0.0}, true);
    a.ensure_grad()[0] = 6.0;
    b.ensure_grad()[0] = 8.0;
    const double norm = clip_global_grad_norm({&a, &b}, 1.0);
    CHECK(norm == Catch::Approx(10.0));
    CHECK(a.grad()[0] == Catch::Approx(0.6));
    CHECK(b.grad()[0] == Catch::Approx(0.8));
}

TEST_CASE("clipping never increases the norm and preserves direction", "[optim]") {
    Rng rng(31337);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor p({16}, rng.normal_vec(16), true);
        auto& g = p.ensure_grad();
        const double scale = rng.uniform(0.0, 3.0);
        for (auto& v : g) v = rng.normal() * scale;
        const std::vector<double> before(g.begin(), g.end());
        double norm_before = 0.0;
        for (double v : before) norm_before += v * v;
        norm_before = std::sqrt(norm_before);

        clip_global_grad_norm({&p}, 1.0);

        double norm_after = 0.0;
        for (double v : p.grad()) norm_after += v * v;
        norm_after = std::sqrt(norm_after);
        CHECK(norm_after <= norm_before + 1e-12);
        CHECK(norm_after <= 1.0 + 1e-12);
        // direction: after = c * before for a single nonnegative c
        if (norm_before > 0) {
            const double c = norm_after / norm_before;
            for (std::size_t i = 0; i < before.size(); ++i)
                CHECK(p.grad()[i] == Catch::Approx(c * before[i]).margin(1e-12));
        }
    }
}

TEST_CASE("NaN gradients skip the step and bump the warning counter", "[optim]") {
    Tensor p({2}, {1.0, 2.0}, true);
    auto& g = p.ensure_grad();
    g[0] = std::nan("");
    g[1] = 1.0;
    AdamW opt({.lr = 0.1});
    opt.step({&p});
    CHECK(p.values()[0] == 1.0);
    CHECK(p.values()[1] == 2.0);
    CHECK(opt.skipped_steps() == 1);
    CHECK(opt.step_count() == 0);
}
