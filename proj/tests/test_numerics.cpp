#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <fstream>
#include <functional>
#include <map>

#include "ctxlab/adam.hpp"
#include "ctxlab/autodiff.hpp"
#include "ctxlab/finite_diff.hpp"
#include "ctxlab/params.hpp"
#include "ctxlab/rng.hpp"

using namespace ctxlab;

namespace {

using LossBuilder = std::function<Var(Tape&, const ParamStore&)>;

double eval_loss(const ParamStore& store, const LossBuilder& build) {
    Tape tape;
    return tape.value(build(tape, store)).values[0];
}

// Tape backward against the central-difference oracle, every coordinate of
// every trainable parameter.
void check_grads(ParamStore& store, const LossBuilder& build, double tol = 1e-4) {
    Tape tape;
    Var loss = build(tape, store);
    auto back = tape.backward(loss);
    auto fd = finite_difference_grad([&](const ParamStore& s) { return eval_loss(s, build); },
                                     store, 1e-3);
    for (const auto& [id, p] : store) {
        if (!p.trainable) {
            CHECK(back.count(id) == 0);
            continue;
        }
        REQUIRE_MESSAGE(fd.count(id) == 1, id);
        const Tensor& fg = fd.at(id);
        if (back.count(id) == 0) {
            // unreachable parameter: the oracle must agree the gradient is zero
            for (double v : fg.values) {
                CHECK(grad_close(v, 0.0, tol));
            }
            continue;
        }
        const Tensor& bg = back.at(id);
        REQUIRE(bg.shape == p.tensor.shape);
        for (std::size_t i = 0; i < bg.values.size(); ++i) {
            CHECK_MESSAGE(grad_close(bg.values[i], fg.values[i], tol),
                          id << "[" << i << "]: " << bg.values[i] << " vs fd " << fg.values[i]);
        }
    }
}

Tensor random_tensor(std::vector<int> shape, Rng& rng, double scale = 1.0) {
    Tensor t(std::move(shape));
    for (double& v : t.values) {
        v = rng.normal(0.0, scale);
    }
    return t;
}

// loss = sum(x * w) for a fixed probe tensor w: exercises every output
// coordinate with a distinct sensitivity. The probe must be drawn once per
// check so repeated forward evaluations see the same function.
Var weighted_sum(Tape& tape, Var x, const Tensor& w) {
    REQUIRE(tape.value(x).shape == w.shape);
    return ops::sum(ops::mul(x, tape.input(w, "probe_weights")));
}

}  // namespace

TEST_CASE("backward: sum gives all-ones gradient") {
    ParamStore store;
    store.add("p", Tensor({3}, {1.5, -2.0, 7.0}));
    Tape tape;
    auto grads = tape.backward(ops::sum(tape.param(store, "p")));
    REQUIRE(grads.count("p") == 1);
    CHECK(grads.at("p").values == std::vector<double>{1.0, 1.0, 1.0});
}

TEST_CASE("backward: dot(p,p) gives 2p") {
    ParamStore store;
    store.add("p", Tensor({2}, {1.0, 2.0}));
    Tape tape;
    Var p = tape.param(store, "p");
    auto grads = tape.backward(ops::dot(p, p));
    CHECK(grads.at("p").values == std::vector<double>{2.0, 4.0});
}

TEST_CASE("backward: non-scalar loss rejected") {
    ParamStore store;
    store.add("p", Tensor({2}, {1.0, 2.0}));
    Tape tape;
    CHECK_THROWS_AS((void)tape.backward(tape.param(store, "p")), std::invalid_argument);
}

TEST_CASE("backward: NaN carries the offending node id") {
    ParamStore store;
    store.add("p", Tensor({2}, {1.0, std::nan("")}));
    Tape tape;
    Var loss = ops::sum(tape.param(store, "p"));
    try {
        (void)tape.backward(loss);
        FAIL("expected NumericsError");
    } catch (const NumericsError& e) {
        CHECK(e.node == "sum");
    }
}

TEST_CASE("backward: non-trainable and unreachable parameters are absent") {
    ParamStore store;
    store.add("frozen", Tensor({2}, {1.0, 2.0}), /*trainable=*/false);
    store.add("used", Tensor({2}, {3.0, 4.0}));
    store.add("unused", Tensor({2}, {5.0, 6.0}));
    Tape tape;
    Var loss = ops::sum(ops::mul(tape.param(store, "used"), tape.param(store, "frozen")));
    auto grads = tape.backward(loss);
    CHECK(grads.count("used") == 1);
    CHECK(grads.count("frozen") == 0);
    CHECK(grads.count("unused") == 0);
}

TEST_CASE("finite differences: quadratic is exact to rounding") {
    ParamStore store;
    store.add("p", Tensor({1}, {3.0}));
    auto fd = finite_difference_grad(
        [](const ParamStore& s) {
            const double p = s.at("p").tensor.values[0];
            return p * p;
        },
        store, 1e-3);
    CHECK(std::abs(fd.at("p").values[0] - 6.0) < 1e-6);
}

TEST_CASE("finite differences: softmax sum conserves to zero gradient") {
    Rng rng(7);
    ParamStore store;
    store.add("p", random_tensor({5}, rng));
    auto fd = finite_difference_grad(
        [](const ParamStore& s) {
            Tape tape;
            return tape.value(ops::sum(ops::softmax(tape.param(s, "p")))).values[0];
        },
        store, 1e-3);
    for (double v : fd.at("p").values) {
        CHECK(std::abs(v) < 1e-9);
    }
}

TEST_CASE("finite differences: eps must be positive, non-finite f rejected") {
    ParamStore store;
    store.add("p", Tensor({1}, {1.0}));
    auto f = [](const ParamStore&) { return 1.0; };
    CHECK_THROWS_AS(finite_difference_grad(f, store, 0.0), std::invalid_argument);
    auto bad = [](const ParamStore&) { return std::nan(""); };
    CHECK_THROWS_AS(finite_difference_grad(bad, store, 1e-3), NumericsError);
}

TEST_CASE("gradient check: every primitive on random shapes") {
    Rng rng(42);

    SUBCASE("matmul") {
        ParamStore store;
        store.add("a", random_tensor({5, 7}, rng));
        store.add("b", random_tensor({7, 4}, rng));
        const Tensor w = random_tensor({5, 4}, rng);
        check_grads(store, [&](Tape& t, const ParamStore& s) {
            return weighted_sum(t, ops::matmul(t.param(s, "a"), t.param(s, "b")), w);
        });
    }
    SUBCASE("matmul_bt") {
        ParamStore store;
        store.add("a", random_tensor({5, 6}, rng));
        store.add("b", random_tensor({3, 6}, rng));
        const Tensor w = random_tensor({5, 3}, rng);
        check_grads(store, [&](Tape& t, const ParamStore& s) {
            return weighted_sum(t, ops::matmul_bt(t.param(s, "a"), t.param(s, "b")), w);
        });
    }
    SUBCASE("add and mul") {
        ParamStore store;
        store.add("a", random_tensor({4, 3}, rng));
        store.add("b", random_tensor({4, 3}, rng));
        const Tensor w = random_tensor({4, 3}, rng);
        check_grads(store, [&](Tape& t, const ParamStore& s) {
            return weighted_sum(
                t, ops::mul(ops::add(t.param(s, "a"), t.param(s, "b")), t.param(s, "b")), w);
        });
    }
    SUBCASE("add_bias") {
        ParamStore store;
        store.add("a", random_tensor({6, 5}, rng));
        store.add("b", random_tensor({5}, rng));
        const Tensor w = random_tensor({6, 5}, rng);
        check_grads(store, [&](Tape& t, const ParamStore& s) {
            return weighted_sum(t, ops::add_bias(t.param(s, "a"), t.param(s, "b")), w);
        });
    }
    SUBCASE("layer_norm") {
        ParamStore store;
        store.add("x", random_tensor({4, 8}, rng));
        store.add("g", random_tensor({8}, rng));
        store.add("b", random_tensor({8}, rng));
        const Tensor w = random_tensor({4, 8}, rng);
        check_grads(store, [&](Tape& t, const ParamStore& s) {
            return weighted_sum(
                t, ops::layer_norm(t.param(s, "x"), t.param(s, "g"), t.param(s, "b")), w);
        });
    }
    SUBCASE("gelu") {
        ParamStore store;
        store.add("x", random_tensor({3, 5}, rng));
        const Tensor w = random_tensor({3, 5}, rng);
        check_grads(store, [&](Tape& t, const ParamStore& s) {
            return weighted_sum(t, ops::gelu(t.param(s, "x")), w);
        });
    }
    SUBCASE("tanh") {
        ParamStore store;
        store.add("x", random_tensor({2, 7}, rng));
        const Tensor w = random_tensor({2, 7}, rng);
        check_grads(store, [&](Tape& t, const ParamStore& s) {
            return weighted_sum(t, ops::tanh_op(t.param(s, "x")), w);
        });
    }
    SUBCASE("softmax") {
        ParamStore store;
        store.add("x", random_tensor({4, 6}, rng));
        const Tensor w = random_tensor({4, 6}, rng);
        check_grads(store, [&](Tape& t, const ParamStore& s) {
            return weighted_sum(t, ops::softmax(t.param(s, "x")), w);
        });
    }
    SUBCASE("embedding_lookup") {
        ParamStore store;
        store.add("table", random_tensor({9, 4}, rng));
        const std::vector<int> ids = {3, 1, 3, 8, 0};  // repeated row accumulates
        const Tensor w = random_tensor({5, 4}, rng);
        check_grads(store, [&](Tape& t, const ParamStore& s) {
            return weighted_sum(t, ops::embedding_lookup(t.param(s, "table"), ids), w);
        });
    }
    SUBCASE("replace_rows") {
        ParamStore store;
        store.add("base", random_tensor({6, 4}, rng));
        store.add("r0", random_tensor({4}, rng));
        store.add("r1", random_tensor({4}, rng));
        const Tensor w = random_tensor({6, 4}, rng);
        check_grads(store, [&](Tape& t, const ParamStore& s) {
            Var out = ops::replace_rows(t.param(s, "base"), {1, 4},
                                        {t.param(s, "r0"), t.param(s, "r1")});
            return weighted_sum(t, out, w);
        });
    }
    SUBCASE("gather_rows and slice_cols") {
        ParamStore store;
        store.add("x", random_tensor({7, 6}, rng));
        const Tensor w = random_tensor({3, 3}, rng);
        check_grads(store, [&](Tape& t, const ParamStore& s) {
            Var g = ops::gather_rows(t.param(s, "x"), {2, 2, 5});
            return weighted_sum(t, ops::slice_cols(g, 1, 4), w);
        });
    }
    SUBCASE("concat and concat_cols") {
        ParamStore store;
        store.add("a", random_tensor({5}, rng));
        store.add("b", random_tensor({3}, rng));
        store.add("m1", random_tensor({4, 2}, rng));
        store.add("m2", random_tensor({4, 3}, rng));
        const Tensor wv = random_tensor({8}, rng);
        const Tensor wm = random_tensor({4, 5}, rng);
        check_grads(store, [&](Tape& t, const ParamStore& s) {
            Var v = ops::concat({t.param(s, "a"), t.param(s, "b")});
            Var m = ops::concat_cols({t.param(s, "m1"), t.param(s, "m2")});
            return ops::add(weighted_sum(t, v, wv), weighted_sum(t, m, wm));
        });
    }
    SUBCASE("mean_pool") {
        ParamStore store;
        store.add("x", random_tensor({6, 5}, rng));
        const Tensor w = random_tensor({5}, rng);
        check_grads(store, [&](Tape& t, const ParamStore& s) {
            return weighted_sum(t, ops::mean_pool(t.param(s, "x")), w);
        });
    }
    SUBCASE("reshape as_row as_vec scale") {
        ParamStore store;
        store.add("x", random_tensor({12}, rng));
        const Tensor w = random_tensor({1, 4}, rng);
        check_grads(store, [&](Tape& t, const ParamStore& s) {
            Var m = ops::reshape(t.param(s, "x"), {3, 4});
            Var row = ops::as_row(ops::as_vec(ops::gather_rows(m, {1})));
            return weighted_sum(t, ops::scale(row, -1.7), w);
        });
    }
    SUBCASE("cross_entropy") {
        ParamStore store;
        store.add("logits", random_tensor({5, 4}, rng));
        const std::vector<int> labels = {0, 3, 1, 1, 2};
        check_grads(store, [&](Tape& t, const ParamStore& s) {
            return ops::cross_entropy(t.param(s, "logits"), labels);
        });
    }
}

TEST_CASE("gradient check: two-layer MLP with cross-entropy on a random batch") {
    Rng rng(123);
    ParamStore store;
    store.add("w1", random_tensor({6, 8}, rng, 0.5));
    store.add("b1", random_tensor({8}, rng, 0.1));
    store.add("w2", random_tensor({8, 3}, rng, 0.5));
    store.add("b2", random_tensor({3}, rng, 0.1));
    Tensor x = random_tensor({4, 6}, rng);
    const std::vector<int> labels = {0, 2, 1, 2};
    check_grads(store, [&](Tape& t, const ParamStore& s) {
        Var h = ops::gelu(ops::linear(t.input(x, "x"), t.param(s, "w1"), t.param(s, "b1")));
        return ops::cross_entropy(ops::linear(h, t.param(s, "w2"), t.param(s, "b2")), labels);
    });
}

TEST_CASE("forward evaluation is bitwise deterministic") {
    Rng rng(5);
    ParamStore store;
    store.add("w", random_tensor({8, 8}, rng));
    store.add("x", random_tensor({3, 8}, rng));
    auto run = [&] {
        Tape t;
        Var y = ops::softmax(ops::gelu(ops::matmul(t.param(store, "x"), t.param(store, "w"))));
        return t.value(y).values;
    };
    CHECK(run() == run());
}

TEST_CASE("adam: zero gradient leaves parameters unchanged") {
    ParamStore store;
    store.add("p", Tensor({3}, {1.0, -2.0, 0.5}));
    const std::vector<double> before = store.at("p").tensor.values;
    Adam adam(AdamConfig{0.1});
    std::map<std::string, Tensor> grads;
    grads.emplace("p", Tensor({3}));
    adam.step(store, grads);
    CHECK(store.at("p").tensor.values == before);
}

TEST_CASE("adam: one step on p^2 from p=1 decreases p") {
    ParamStore store;
    store.add("p", Tensor({1}, {1.0}));
    Adam adam(AdamConfig{0.1});
    std::map<std::string, Tensor> grads;
    grads.emplace("p", Tensor({1}, {2.0}));  // d(p^2)/dp at p=1
    adam.step(store, grads);
    CHECK(store.at("p").tensor.values[0] < 1.0);
}

TEST_CASE("adam: 100 steps on (p-3)^2 converge near 3") {
    ParamStore store;
    store.add("p", Tensor({1}, {0.0}));
    Adam adam(AdamConfig{0.1});
    for (int i = 0; i < 100; ++i) {
        const double p = store.at("p").tensor.values[0];
        std::map<std::string, Tensor> grads;
        grads.emplace("p", Tensor({1}, {2.0 * (p - 3.0)}));
        adam.step(store, grads);
    }
    CHECK(std::abs(store.at("p").tensor.values[0] - 3.0) < 0.5);
}

TEST_CASE("adam: non-trainable parameters stay bitwise identical") {
    Rng rng(9);
    ParamStore store;
    store.add("frozen", random_tensor({4}, rng), /*trainable=*/false);
    store.add("live", random_tensor({4}, rng));
    const std::uint64_t before_frozen = store.value_hash("frozen");
    const std::uint64_t before_live = store.value_hash("live");
    Adam adam(AdamConfig{0.05});
    for (int i = 0; i < 25; ++i) {
        std::map<std::string, Tensor> grads;
        grads.emplace("frozen", random_tensor({4}, rng));
        grads.emplace("live", random_tensor({4}, rng));
        adam.step(store, grads);
    }
    CHECK(store.value_hash("frozen") == before_frozen);
    CHECK(store.value_hash("live") != before_live);
}

TEST_CASE("adam: gradient shape mismatch rejected") {
    ParamStore store;
    store.add("p", Tensor({3}));
    Adam adam;
    std::map<std::string, Tensor> grads;
    grads.emplace("p", Tensor({4}));
    CHECK_THROWS_AS(adam.step(store, grads), std::invalid_argument);
}

TEST_CASE("checkpoint: bit-exact round trip") {
    Rng rng(11);
    ParamStore store;
    store.add("a/w", random_tensor({5, 3}, rng));
    store.add("b", random_tensor({7}, rng), /*trainable=*/false);
    store.at("a/w").tensor.values[0] = 0.1 + 0.2;  // not exactly representable
    save_checkpoint(store, "ckpt_roundtrip.bin", "{\"note\":1}");
    Checkpoint ck = load_checkpoint("ckpt_roundtrip.bin");
    CHECK(ck.meta == "{\"note\":1}");
    CHECK(ck.store.value_hash() == store.value_hash());
    CHECK(ck.store.at("b").trainable == false);
    save_checkpoint(ck.store, "ckpt_roundtrip2.bin", ck.meta);
    std::ifstream f1("ckpt_roundtrip.bin", std::ios::binary);
    std::ifstream f2("ckpt_roundtrip2.bin", std::ios::binary);
    std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(s1 == s2);
}
