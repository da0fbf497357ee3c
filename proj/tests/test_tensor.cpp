#include <catch2/catch_amalgamated.hpp>

#include <cstring>

#include "cotmap/init.hpp"
#include "cotmap/rng.hpp"
#include "cotmap/tensor.hpp"
#include "testutil.hpp"

using namespace cotmap;

namespace {

Tensor rand_tensor(Shape shape, Rng& rng, bool rg = true) {
    std::vector<double> v(detail::numel_of(shape));
    for (auto& x : v) x = rng.normal();
    return Tensor(std::move(shape), std::move(v), rg);
}

// Scalar readout with fixed random weights so every output entry gets a
// distinct upstream gradient.
Tensor weighted_readout(Tape& tape, const Tensor& out, Rng& rng) {
    std::vector<double> w(out.numel());
    for (auto& x : w) x = rng.normal();
    Tensor weights(out.shape(), std::move(w), false);
    return tape.sum(tape.mul(out, weights));
}

} // namespace

TEST_CASE("silu zero case and basic forward values", "[tensor]") {
    Tape tape;
    Tensor x({3}, {0.0, 1.0, -1.0}, false);
    Tensor y = tape.silu(x);
    CHECK(y.values()[0] == 0.0);
    CHECK(y.values()[1] == Catch::Approx(1.0 / (1.0 + std::exp(-1.0))).epsilon(1e-14));
}

TEST_CASE("layer_norm of a constant row is zero before affine", "[tensor]") {
    Tape tape;
    Tensor x({2, 4}, {3.0, 3.0, 3.0, 3.0, -1.5, -1.5, -1.5, -1.5}, false);
    Tensor gain = Tensor::full({4}, 1.0);
    Tensor bias = Tensor::zeros({4});
    Tensor y = tape.layer_norm(x, gain, bias);
    for (double v : y.values()) CHECK(v == 0.0);
}

TEST_CASE("sq_l2 analytic gradient", "[tensor]") {
    Tape tape;
    Tensor x({1, 2}, {1.0, 2.0}, true);
    Tensor y({1, 2}, {0.0, 0.0}, false);
    Tensor d = tape.sq_l2(x, y);
    CHECK(d.item() == Catch::Approx(5.0));
    tape.backward(d);
    CHECK(x.grad()[0] == Catch::Approx(2.0));
    CHECK(x.grad()[1] == Catch::Approx(4.0));
}

TEST_CASE("backward of sum and mean of squares", "[tensor]") {
    {
        Tape tape;
        Tensor x({3}, {5.0, -2.0, 0.5}, true);
        Tensor loss = tape.sum(x);
        tape.backward(loss);
        for (double g : x.grad()) CHECK(g == 1.0);
    }
    {
        Tape tape;
        Tensor x({3}, {1.0, 2.0, 3.0}, true);
        Tensor loss = tape.mean(tape.mul(x, x));
        tape.backward(loss);
        CHECK(x.grad()[0] == Catch::Approx(2.0 / 3.0).epsilon(1e-14));
        CHECK(x.grad()[1] == Catch::Approx(4.0 / 3.0).epsilon(1e-14));
        CHECK(x.grad()[2] == Catch::Approx(2.0).epsilon(1e-14));
    }
}

TEST_CASE("non-scalar loss and consumed tape are rejected", "[tensor]") {
    Tape tape;
    Tensor x({2}, {1.0, 2.0}, true);
    Tensor y = tape.mul(x, x);
    CHECK_THROWS_AS(tape.backward(y), std::invalid_argument);
    Tensor loss = tape.sum(y);
    tape.backward(loss);
    CHECK_THROWS_AS(tape.backward(loss), std::runtime_error);
    tape.reset();
}

TEST_CASE("shape mismatch reports both shapes", "[tensor]") {
    Tape tape;
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({2, 3});
    try {
        tape.matmul(a, b);
        FAIL("expected throw");
    } catch (const std::invalid_argument& e) {
        const std::string msg = e.what();
        CHECK(msg.find("(2,3)") != std::string::npos);
    }
}

TEST_CASE("every primitive matches central finite differences", "[tensor]") {
    Rng rng(20240811);

    struct Case {
        const char* name;
        std::function<Tensor(Tape&, std::vector<Tensor>&)> fwd;
        std::vector<Shape> shapes;
    };

    const std::vector<Case> cases = {
        {"matmul", [](Tape& t, std::vector<Tensor>& in) { return t.matmul(in[0], in[1]); },
         {{3, 4}, {4, 2}}},
        {"add", [](Tape& t, std::vector<Tensor>& in) { return t.add(in[0], in[1]); },
         {{3, 4}, {3, 4}}},
        {"add_rowbcast", [](Tape& t, std::vector<Tensor>& in) { return t.add(in[0], in[1]); },
         {{3, 4}, {4}}},
        {"sub", [](Tape& t, std::vector<Tensor>& in) { return t.sub(in[0], in[1]); },
         {{3, 4}, {3, 4}}},
        {"mul", [](Tape& t, std::vector<Tensor>& in) { return t.mul(in[0], in[1]); },
         {{3, 4}, {3, 4}}},
        {"mul_scalar_tensor", [](Tape& t, std::vector<Tensor>& in) { return t.mul(in[0], in[1]); },
         {{3, 4}, {1}}},
        {"mul_rowbcast", [](Tape& t, std::vector<Tensor>& in) { return t.mul(in[0], in[1]); },
         {{3, 4}, {4}}},
        {"add_scalar", [](Tape& t, std::vector<Tensor>& in) { return t.add_scalar(in[0], 0.7); },
         {{3, 4}}},
        {"mul_scalar", [](Tape& t, std::vector<Tensor>& in) { return t.mul_scalar(in[0], -1.3); },
         {{3, 4}}},
        {"concat_last_dim",
         [](Tape& t, std::vector<Tensor>& in) { return t.concat_last_dim(in[0], in[1]); },
         {{3, 2}, {3, 4}}},
        {"broadcast_rows",
         [](Tape& t, std::vector<Tensor>& in) { return t.broadcast_rows(in[0], 5); }, {{1, 4}}},
        {"sum", [](Tape& t, std::vector<Tensor>& in) { return t.sum(in[0]); }, {{3, 4}}},
        {"mean", [](Tape& t, std::vector<Tensor>& in) { return t.mean(in[0]); }, {{3, 4}}},
        {"silu", [](Tape& t, std::vector<Tensor>& in) { return t.silu(in[0]); }, {{3, 4}}},
        {"relu", [](Tape& t, std::vector<Tensor>& in) { return t.relu(in[0]); }, {{3, 4}}},
        {"sin", [](Tape& t, std::vector<Tensor>& in) { return t.sin(in[0]); }, {{3, 4}}},
        {"cos", [](Tape& t, std::vector<Tensor>& in) { return t.cos(in[0]); }, {{3, 4}}},
        {"abs", [](Tape& t, std::vector<Tensor>& in) { return t.abs(in[0]); }, {{3, 4}}},
        {"layer_norm",
         [](Tape& t, std::vector<Tensor>& in) { return t.layer_norm(in[0], in[1], in[2]); },
         {{4, 6}, {6}, {6}}},
        {"sq_l2", [](Tape& t, std::vector<Tensor>& in) { return t.sq_l2(in[0], in[1]); },
         {{4, 3}, {4, 3}}},
        {"gather_rows",
         [](Tape& t, std::vector<Tensor>& in) {
             return t.gather_rows(in[0], {2, 0, 2, 4});
         },
         {{5, 3}}},
        {"hyper_linear",
         [](Tape& t, std::vector<Tensor>& in) { return t.hyper_linear(in[0], in[1], 3); },
         {{4, 5}, {5 * 3 + 3}}},
    };

    for (const auto& c : cases) {
        INFO(c.name);
        std::vector<Tensor> inputs;
        for (const auto& s : c.shapes) inputs.push_back(rand_tensor(s, rng));
        // relu/abs kinks: keep values away from zero
        if (std::string(c.name) == "relu" || std::string(c.name) == "abs")
            for (auto& v : inputs[0].values())
                if (std::fabs(v) < 0.05) v = 0.3;

        auto loss_value = [&] {
            Tape tape(false);
            std::vector<Tensor> in = inputs;
            Rng wr(7);
            Tensor out = c.fwd(tape, in);
            return weighted_readout(tape, out, wr).item();
        };

        // autodiff gradients
        {
            Tape tape;
            Rng wr(7);
            Tensor out = c.fwd(tape, inputs);
            Tensor loss = weighted_readout(tape, out, wr);
            tape.backward(loss);
        }
        for (std::size_t k = 0; k < inputs.size(); ++k) {
            std::vector<double> ad(inputs[k].numel(), 0.0);
            if (inputs[k].has_grad())
                ad.assign(inputs[k].grad().begin(), inputs[k].grad().end());
            auto fd = testutil::finite_diff_grad(inputs[k], loss_value);
            INFO("input " << k);
            CHECK(testutil::max_rel_err(ad, fd) < 1e-4);
            inputs[k].zero_grad();
        }
    }
}

TEST_CASE("three-layer MLP gradient matches finite differences", "[tensor]") {
    Rng rng(99);
    Rng wr = rng.split(1);
    Tensor w1 = orthogonal_init({3, 8}, 1.0, wr);
    Tensor b1 = Tensor::zeros({8}, true);
    Tensor w2 = orthogonal_init({8, 8}, 1.0, wr);
    Tensor b2 = Tensor::zeros({8}, true);
    Tensor w3 = orthogonal_init({8, 2}, 1.0, wr);
    Tensor b3 = Tensor::zeros({2}, true);
    Tensor x = rand_tensor({5, 3}, rng, false);

    auto loss_value = [&] {
        Tape tape(false);
        Tensor h = tape.silu(tape.add(tape.matmul(x, w1), b1));
        h = tape.silu(tape.add(tape.matmul(h, w2), b2));
        h = tape.add(tape.matmul(h, w3), b3);
        return tape.mean(tape.mul(h, h)).item();
    };

    {
        Tape tape;
        Tensor h = tape.silu(tape.add(tape.matmul(x, w1), b1));
        h = tape.silu(tape.add(tape.matmul(h, w2), b2));
        h = tape.add(tape.matmul(h, w3), b3);
        Tensor loss = tape.mean(tape.mul(h, h));
        tape.backward(loss);
    }

    for (Tensor* p : {&w1, &b1, &w2, &b2, &w3, &b3}) {
        auto fd = testutil::finite_diff_grad(*p, loss_value);
        CHECK(testutil::max_rel_err({p->grad().begin(), p->grad().end()}, fd) < 1e-4);
    }
}

TEST_CASE("backward is deterministic for identical seeds", "[tensor]") {
    auto run = [] {
        Rng rng(4242);
        Tensor w = orthogonal_init({6, 6}, 1.0, rng);
        Tensor x({4, 6}, rng.normal_vec(24), false);
        Tape tape;
        Tensor loss = tape.mean(tape.sq_l2(tape.silu(tape.matmul(x, w)), x));
        tape.backward(loss);
        return w.grad();
    };
    auto g1 = run();
    auto g2 = run();
    REQUIRE(g1.size() == g2.size());
    CHECK(std::memcmp(g1.data(), g2.data(), g1.size() * sizeof(double)) == 0);
}

TEST_CASE("tape records ops in topological order", "[tensor]") {
    Tape tape;
    Rng rng(3);
    Tensor a = rand_tensor({2, 3}, rng);
    Tensor b = rand_tensor({3, 2}, rng);
    Tensor c = tape.matmul(a, b);
    Tensor d = tape.silu(c);
    Tensor loss = tape.sum(tape.mul(c, d));
    (void)loss;
    for (std::size_t k = 0; k < tape.num_ops(); ++k) {
        const auto rec = tape.op_record(k);
        CHECK(rec.out == static_cast<std::int64_t>(k));
        for (auto in : rec.inputs) CHECK(in < rec.out);
    }
}

TEST_CASE("no-grad tape records nothing", "[tensor]") {
    Tape tape(false);
    Rng rng(5);
    Tensor a = rand_tensor({2, 2}, rng, true);
    Tensor y = tape.silu(tape.mul(a, a));
    CHECK(tape.num_ops() == 0);
    CHECK_FALSE(y.requires_grad());
}

TEST_CASE("orthogonal init satisfies its defining identities", "[tensor]") {
    Rng rng(77);

    SECTION("square, gain 1: W^T W = I") {
        Tensor w = orthogonal_init({4, 4}, 1.0, rng);
        for (std::size_t i = 0; i < 4; ++i) {
            for (std::size_t j = 0; j < 4; ++j) {
                double dot = 0.0;
                for (std::size_t k = 0; k < 4; ++k) dot += w.at(k, i) * w.at(k, j);
                CHECK(std::fabs(dot - (i == j ? 1.0 : 0.0)) < 1e-8);
            }
        }
    }

    SECTION("wide (2,8): W W^T = I") {
        Tensor w = orthogonal_init({2, 8}, 1.0, rng);
        for (std::size_t i = 0; i < 2; ++i) {
            for (std::size_t j = 0; j < 2; ++j) {
                double dot = 0.0;
                for (std::size_t k = 0; k < 8; ++k) dot += w.at(i, k) * w.at(j, k);
                CHECK(std::fabs(dot - (i == j ? 1.0 : 0.0)) < 1e-8);
            }
        }
    }

    SECTION("gain 2: all singular values equal 2") {
        Tensor w = orthogonal_init({3, 3}, 2.0, rng);
        std::vector<double> wtw(9, 0.0);
        for (std::size_t i = 0; i < 3; ++i)
            for (std::size_t j = 0; j < 3; ++j)
                for (std::size_t k = 0; k < 3; ++k) wtw[i * 3 + j] += w.at(k, i) * w.at(k, j);
        auto eig = testutil::sym_eigenvalues(wtw, 3);
        for (double e : eig) CHECK(std::fabs(std::sqrt(e) - 2.0) < 1e-8);
    }

    SECTION("non-2-D shape rejected") {
        CHECK_THROWS_AS(orthogonal_init({4}, 1.0, rng), std::invalid_argument);
    }
}
