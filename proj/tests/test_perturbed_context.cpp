#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <vector>

#include "ctxlab/finite_diff.hpp"
#include "ctxlab/perturbed_context.hpp"
#include "ctxlab/rng.hpp"
#include "oracles.hpp"

using namespace ctxlab;

namespace {

Vocabulary tiny_vocab() {
    return Vocabulary({"alpha", "beta", "gamma", "delta", "eps", "zeta", "eta", "theta", "iota",
                       "kappa", "lambda", "mu"});
}

EncoderConfig tiny_config(const Vocabulary& v) {
    EncoderConfig cfg;
    cfg.vocab_size = v.size();
    cfg.d = 16;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.d_ff = 32;
    cfg.max_len = 24;
    return cfg;
}

Tensor random_table(std::vector<int> shape, Rng& rng, double mu, double sigma) {
    Tensor t(std::move(shape));
    for (double& v : t.values) {
        v = rng.normal(mu, sigma);
    }
    return t;
}

std::pair<double, double> mean_std(const std::vector<double>& xs) {
    double m = 0.0;
    for (double x : xs) {
        m += x;
    }
    m /= static_cast<double>(xs.size());
    double v = 0.0;
    for (double x : xs) {
        v += (x - m) * (x - m);
    }
    return {m, std::sqrt(v / static_cast<double>(xs.size()))};
}

}  // namespace

TEST_CASE("pc spec validation") {
    PCSpec spec;
    spec.variant = PCVariant::FactorizedRandom;
    spec.l = 16;
    CHECK_THROWS_AS(spec.validate(16), std::invalid_argument);  // l must stay below d
    spec.l = 15;
    CHECK_NOTHROW(spec.validate(16));
    spec.m = 0;
    CHECK_THROWS_AS(spec.validate(16), std::invalid_argument);
}

TEST_CASE("init_pc: zero table gives zero parameters") {
    Rng rng(1);
    ParamStore store;
    PCSpec spec;
    init_pc(store, spec, Tensor({10, 16}), 16, rng);
    for (double v : store.at("pc/0/M").tensor.values) {
        CHECK(v == 0.0);
    }
}

TEST_CASE("init_pc: empty table rejected") {
    Rng rng(1);
    ParamStore store;
    PCSpec spec;
    CHECK_THROWS_AS(init_pc(store, spec, Tensor({0, 16}), 16, rng), std::invalid_argument);
}

TEST_CASE("init_pc: sample statistics track the embedding table") {
    Rng rng(2);
    const Tensor table = random_table({200, 64}, rng, 1.0, 0.5);
    auto [mu, sigma] = mean_std(table.values);

    PCSpec spec;
    spec.m = 160;  // 160 * 64 > 10^4 drawn entries
    ParamStore store;
    init_pc(store, spec, table, 64, rng);
    auto [sm, ss] = mean_std(store.at("pc/0/M").tensor.values);
    CHECK(std::abs(sm - mu) < 0.05 * std::max(std::abs(mu), 1.0));
    CHECK(std::abs(ss - sigma) < 0.05 * sigma);
}

TEST_CASE("init_pc: identical seed is bitwise reproducible") {
    Rng table_rng(3);
    const Tensor table = random_table({30, 16}, table_rng, 0.0, 0.1);
    PCSpec spec;
    spec.variant = PCVariant::FactorizedRandom;
    spec.l = 4;
    ParamStore a, b;
    Rng ra(99), rb(99);
    init_pc(a, spec, table, 16, ra);
    init_pc(b, spec, table, 16, rb);
    CHECK(a.value_hash() == b.value_hash());
}

TEST_CASE("context_embeddings: Random returns the rows of M exactly") {
    Rng rng(4);
    const Tensor table = random_table({30, 16}, rng, 0.0, 0.1);
    PCSpec spec;  // Random, m=4
    ParamStore store;
    init_pc(store, spec, table, 16, rng);
    Tape tape;
    Var ce = context_embeddings(tape, store, spec, 16, std::nullopt);
    CHECK(tape.value(ce).values == store.at("pc/0/M").tensor.values);
}

TEST_CASE("context_embeddings: FixedRandom is constant w.r.t. training") {
    Rng rng(5);
    const Tensor table = random_table({30, 16}, rng, 0.0, 0.1);
    PCSpec spec;
    spec.variant = PCVariant::FixedRandom;
    ParamStore store;
    init_pc(store, spec, table, 16, rng);
    CHECK(store.at("pc/0/M").trainable == false);
    Tape tape;
    Var ce = context_embeddings(tape, store, spec, 16, std::nullopt);
    auto grads = tape.backward(ops::sum(ce));
    CHECK(grads.count("pc/0/M") == 0);
}

TEST_CASE("context_embeddings: factorized stack has numerical rank <= l") {
    Rng rng(6);
    const Tensor table = random_table({40, 64}, rng, 0.0, 0.05);
    PCSpec spec;
    spec.variant = PCVariant::FactorizedRandom;
    spec.m = 8;
    spec.l = 2;
    ParamStore store;
    init_pc(store, spec, table, 64, rng);
    Tape tape;
    Var ce = context_embeddings(tape, store, spec, 64, std::nullopt);
    const std::vector<double> sv = oracles::singular_values(tape.value(ce));
    REQUIRE(sv.size() == 8);
    CHECK(sv[0] > 0.0);
    for (std::size_t i = 2; i < sv.size(); ++i) {
        CHECK(sv[i] < 1e-8 * sv[0]);
    }
}

TEST_CASE("context_embeddings: conditional depends on x_pool and requires it") {
    Rng rng(7);
    const Tensor table = random_table({30, 16}, rng, 0.0, 0.1);
    PCSpec spec;
    spec.variant = PCVariant::Conditional;
    spec.m = 3;
    ParamStore store;
    init_pc(store, spec, table, 16, rng);

    Tape tape;
    CHECK_THROWS_AS(context_embeddings(tape, store, spec, 16, std::nullopt),
                    std::invalid_argument);

    Tensor xa({16}), xb({16});
    for (int i = 0; i < 16; ++i) {
        xa.values[static_cast<std::size_t>(i)] = rng.normal();
        xb.values[static_cast<std::size_t>(i)] = rng.normal();
    }
    Var va = context_embeddings(tape, store, spec, 16, tape.input(xa, "xa"));
    Var vb = context_embeddings(tape, store, spec, 16, tape.input(xb, "xb"));
    Var va2 = context_embeddings(tape, store, spec, 16, tape.input(xa, "xa2"));
    CHECK(tape.value(va).values != tape.value(vb).values);
    CHECK(tape.value(va).values == tape.value(va2).values);
    CHECK(tape.value(va).shape == std::vector<int>{3, 16});
}

TEST_CASE("pc_features: shape, literal-token reduction and gradient flow") {
    Vocabulary v = tiny_vocab();
    EncoderConfig cfg = tiny_config(v);
    Rng rng(8);
    ParamStore store;
    init_encoder_params(store, cfg, rng);
    PCSpec spec;  // Random, m=4
    init_pc(store, spec, store.at("enc/tok_emb").tensor, cfg.d, rng);

    const std::vector<std::string> s = {"alpha", "beta", "gamma", "delta"};
    const std::vector<std::string> o1 = {"alpha"};
    const std::vector<std::string> o2 = {"delta"};

    SUBCASE("output is a d-vector") {
        Tape tape;
        Var f = pc_features(tape, store, cfg, v, spec, s, o1, o2);
        CHECK(tape.value(f).shape == std::vector<int>{cfg.d});
    }

    SUBCASE("M frozen to real token rows reproduces the literal context") {
        const std::vector<std::string> literal = {"eta", "theta", "iota", "kappa"};
        Tensor& m = store.at("pc/0/M").tensor;
        const Tensor& table = store.at("enc/tok_emb").tensor;
        for (int i = 0; i < spec.m; ++i) {
            const int tid = v.id(literal[static_cast<std::size_t>(i)]);
            for (int c = 0; c < cfg.d; ++c) {
                m.at(i, c) = table.at(tid, c);
            }
        }
        Tape tape;
        Var f = pc_features(tape, store, cfg, v, spec, s, o1, o2);

        std::vector<std::string> ctx = o1;
        ctx.insert(ctx.end(), literal.begin(), literal.end());
        ctx.insert(ctx.end(), o2.begin(), o2.end());
        Tape tape2;
        PackedInput packed = pack_pair(v, v.to_ids(s), v.to_ids(ctx), cfg.max_len);
        Var g = encode(tape2, store, cfg, packed).pooled;
        CHECK(tape.value(f).values == tape2.value(g).values);
    }

    SUBCASE("loss gradient w.r.t. M is nonzero and fd-correct at a coordinate") {
        Tensor readout({cfg.d});
        for (double& x : readout.values) {
            x = rng.normal();
        }
        auto loss_of = [&](const ParamStore& ps) {
            Tape tape;
            Var f = pc_features(tape, ps, cfg, v, spec, s, o1, o2);
            return tape.value(ops::dot(f, tape.input(readout, "r"))).values[0];
        };
        Tape tape;
        Var f = pc_features(tape, store, cfg, v, spec, s, o1, o2);
        auto grads = tape.backward(ops::dot(f, tape.input(readout, "r")));
        REQUIRE(grads.count("pc/0/M") == 1);
        double max_abs = 0.0;
        for (double gv : grads.at("pc/0/M").values) {
            max_abs = std::max(max_abs, std::abs(gv));
        }
        CHECK(max_abs > 1e-12);

        ParamStore copy = store;
        double& coord = copy.at("pc/0/M").tensor.values[5];
        const double orig = coord, eps = 1e-3;
        coord = orig + eps;
        const double fp = loss_of(copy);
        coord = orig - eps;
        const double fm = loss_of(copy);
        CHECK(grad_close(grads.at("pc/0/M").values[5], (fp - fm) / (2 * eps), 1e-4));
    }
}

TEST_CASE("multi_pc_features: concatenation, degenerate case, parameter count") {
    Vocabulary v = tiny_vocab();
    EncoderConfig cfg = tiny_config(v);
    Rng rng(9);
    ParamStore store;
    init_encoder_params(store, cfg, rng);
    PCSpec spec;
    spec.n_contexts = 5;
    for (int c = 0; c < spec.n_contexts; ++c) {
        init_pc(store, spec, store.at("enc/tok_emb").tensor, cfg.d, rng,
                "pc/" + std::to_string(c));
    }

    const std::vector<std::string> s = {"alpha", "beta", "gamma"};
    Tape tape;
    Var f = multi_pc_features(tape, store, cfg, v, spec, s, {"alpha"}, {"gamma"});
    CHECK(tape.value(f).shape == std::vector<int>{5 * cfg.d});

    // n=1 degenerates to pc_features
    PCSpec one = spec;
    one.n_contexts = 1;
    Tape ta, tb;
    Var fa = multi_pc_features(ta, store, cfg, v, one, s, {"alpha"}, {"gamma"});
    Var fb = pc_features(tb, store, cfg, v, one, s, {"alpha"}, {"gamma"});
    CHECK(ta.value(fa).values == tb.value(fb).values);

    // n Random contexts hold n*m*d parameter entries
    std::size_t pc_entries = 0;
    for (const auto& [id, p] : store) {
        if (id.rfind("pc/", 0) == 0) {
            pc_entries += p.tensor.size();
        }
    }
    CHECK(pc_entries == static_cast<std::size_t>(5 * spec.m * cfg.d));
}

TEST_CASE("mixture_features: layout and degenerate empty set") {
    Vocabulary v = tiny_vocab();
    EncoderConfig cfg = tiny_config(v);
    Rng rng(10);
    ParamStore store;
    init_encoder_params(store, cfg, rng);
    PCSpec spec;
    init_pc(store, spec, store.at("enc/tok_emb").tensor, cfg.d, rng);

    ExplanationSet set{{Explanation{{kO1, "eta", kO2}}, Explanation{{kO1, "theta", kO2}},
                        Explanation{{kO1, "iota", kO2}}}};
    const std::vector<std::string> s = {"alpha", "beta", "gamma"};

    Tape tape;
    Var f = mixture_features(tape, store, cfg, v, spec, s, {"alpha"}, {"gamma"}, set);
    CHECK(tape.value(f).shape == std::vector<int>{4 * cfg.d});

    // pc block last
    Tape tp;
    Var pc = pc_features(tp, store, cfg, v, spec, s, {"alpha"}, {"gamma"});
    const auto& fv = tape.value(f).values;
    const auto& pv = tp.value(pc).values;
    for (int c = 0; c < cfg.d; ++c) {
        CHECK(fv[static_cast<std::size_t>(3 * cfg.d + c)] == pv[static_cast<std::size_t>(c)]);
    }

    Tape te;
    Var fe = mixture_features(te, store, cfg, v, spec, s, {"alpha"}, {"gamma"}, ExplanationSet{});
    CHECK(te.value(fe).values == pv);
}

TEST_CASE("param_count: closed forms match the initialized stores") {
    const int d = 16;
    Rng rng(11);
    const Tensor table = random_table({30, d}, rng, 0.0, 0.1);
    for (PCVariant variant :
         {PCVariant::Random, PCVariant::FixedRandom, PCVariant::Conditional,
          PCVariant::FactorizedRandom, PCVariant::FactorizedConditional}) {
        PCSpec spec;
        spec.variant = variant;
        spec.m = 4;
        spec.l = 8;
        ParamStore store;
        init_pc(store, spec, table, d, rng);
        std::size_t total = 0, trainable = 0;
        for (const auto& [id, p] : store) {
            total += p.tensor.size();
            if (p.trainable) {
                trainable += p.tensor.size();
            }
        }
        const PCParamCount c = param_count(spec, d);
        CHECK_MESSAGE(static_cast<std::size_t>(c.total) == total, to_string(variant));
        CHECK_MESSAGE(static_cast<std::size_t>(c.trainable) == trainable, to_string(variant));
    }

    CHECK(param_count(PCSpec{PCVariant::Random, 4, 32, 1}, 64).total == 256);
    CHECK(param_count(PCSpec{PCVariant::FactorizedRandom, 4, 8, 1}, 64).total == 544);
    CHECK(param_count(PCSpec{PCVariant::FixedRandom, 4, 32, 1}, 64).trainable == 0);
}

TEST_CASE("factorized conditional: rank bound also holds") {
    Vocabulary v = tiny_vocab();
    EncoderConfig cfg = tiny_config(v);
    Rng rng(12);
    ParamStore store;
    init_encoder_params(store, cfg, rng);
    PCSpec spec;
    spec.variant = PCVariant::FactorizedConditional;
    spec.m = 6;
    spec.l = 2;
    init_pc(store, spec, store.at("enc/tok_emb").tensor, cfg.d, rng);

    Tape tape;
    Tensor x({cfg.d});
    for (double& xv : x.values) {
        xv = rng.normal();
    }
    Var ce = context_embeddings(tape, store, spec, cfg.d, tape.input(x, "x"));
    const std::vector<double> sv = oracles::singular_values(tape.value(ce));
    for (std::size_t i = 2; i < sv.size(); ++i) {
        CHECK(sv[i] < 1e-8 * sv[0]);
    }
}
