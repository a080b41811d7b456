#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <set>
#include <vector>

#include "ctxlab/adam.hpp"
#include "ctxlab/encoder.hpp"
#include "ctxlab/finite_diff.hpp"
#include "ctxlab/rng.hpp"

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
    cfg.max_len = 16;
    return cfg;
}

}  // namespace

TEST_CASE("pack_pair: layout and segment ids") {
    Vocabulary v = tiny_vocab();
    const std::vector<int> s = {4, 5, 6};
    const std::vector<int> ctx = {7, 8};
    PackedInput p = pack_pair(v, s, ctx, 16);
    CHECK(p.length() == 8);
    CHECK(p.segment_ids == std::vector<int>{0, 0, 0, 0, 0, 1, 1, 1});
    CHECK(p.token_ids[0] == v.cls_id());
    CHECK(p.token_ids[4] == v.sep_id());
    CHECK(p.token_ids[7] == v.sep_id());
    CHECK(p.ctx_begin == 5);
    CHECK(p.ctx_end == 7);
}

TEST_CASE("pack_pair: empty context rejected, overflow reported") {
    Vocabulary v = tiny_vocab();
    CHECK_THROWS_AS(pack_pair(v, {4, 5}, {}, 16), std::invalid_argument);
    CHECK_THROWS_AS(pack_pair(v, {4, 5, 6, 7, 8, 9, 10, 11}, {4, 5, 6, 7, 8, 9}, 16),
                    std::length_error);
}

TEST_CASE("pack_single: all segment zero") {
    Vocabulary v = tiny_vocab();
    PackedInput p = pack_single(v, {4, 5, 6}, 16);
    CHECK(p.length() == 5);
    CHECK(p.segment_ids == std::vector<int>(5, 0));
    CHECK(!p.has_context());
}

TEST_CASE("encode: output shapes and determinism") {
    Vocabulary v = tiny_vocab();
    EncoderConfig cfg = tiny_config(v);
    Rng rng(3);
    ParamStore store;
    init_encoder_params(store, cfg, rng);
    PackedInput p = pack_pair(v, {4, 5, 6}, {7, 8}, cfg.max_len);

    Tape t1;
    EncoderOutput out1 = encode(t1, store, cfg, p);
    CHECK(t1.value(out1.hidden).shape == std::vector<int>{p.length(), cfg.d});
    CHECK(t1.value(out1.pooled).shape == std::vector<int>{cfg.d});

    Tape t2;
    EncoderOutput out2 = encode(t2, store, cfg, p);
    CHECK(t1.value(out1.pooled).values == t2.value(out2.pooled).values);
    CHECK(t1.value(out1.hidden).values == t2.value(out2.hidden).values);
}

TEST_CASE("encode: token id out of range rejected") {
    Vocabulary v = tiny_vocab();
    EncoderConfig cfg = tiny_config(v);
    Rng rng(3);
    ParamStore store;
    init_encoder_params(store, cfg, rng);
    PackedInput p = pack_single(v, {4, 5}, cfg.max_len);
    p.token_ids[1] = cfg.vocab_size + 3;
    Tape tape;
    CHECK_THROWS_AS(encode(tape, store, cfg, p), std::invalid_argument);
}

TEST_CASE("encode: identity override is bitwise equal at every position") {
    Vocabulary v = tiny_vocab();
    EncoderConfig cfg = tiny_config(v);
    Rng rng(17);
    ParamStore store;
    init_encoder_params(store, cfg, rng);
    const std::vector<int> words = v.word_ids();

    for (int trial = 0; trial < 4; ++trial) {
        std::vector<int> s, ctx;
        for (int i = 0; i < 3 + trial; ++i) {
            s.push_back(words[rng.uniform_below(words.size())]);
        }
        for (int i = 0; i < 2 + trial; ++i) {
            ctx.push_back(words[rng.uniform_below(words.size())]);
        }
        PackedInput p = pack_pair(v, s, ctx, cfg.max_len);

        Tape plain_tape;
        const Tensor plain = plain_tape.value(encode(plain_tape, store, cfg, p).hidden);

        for (int pos = 0; pos < p.length(); ++pos) {
            Tape tape;
            Var row = ops::as_vec(ops::slice_row(
                tape.param(store, "enc/tok_emb"), p.token_ids[static_cast<std::size_t>(pos)]));
            EncoderOutput out = encode(tape, store, cfg, p, {{pos, row}});
            CHECK(tape.value(out.hidden).values == plain.values);
        }
    }
}

TEST_CASE("encode: permutation of sentence tokens changes the pooled output") {
    Vocabulary v = tiny_vocab();
    EncoderConfig cfg = tiny_config(v);
    Rng rng(23);
    ParamStore store;
    init_encoder_params(store, cfg, rng);

    Tape ta, tb;
    const Tensor a =
        ta.value(encode(ta, store, cfg, pack_single(v, {4, 5, 6, 7}, cfg.max_len)).pooled);
    const Tensor b =
        tb.value(encode(tb, store, cfg, pack_single(v, {7, 6, 5, 4}, cfg.max_len)).pooled);
    CHECK(a.values != b.values);
}

TEST_CASE("encode: override vector receives a finite-difference-correct gradient") {
    Vocabulary v = tiny_vocab();
    EncoderConfig cfg = tiny_config(v);
    Rng rng(31);
    ParamStore store;
    init_encoder_params(store, cfg, rng);
    store.add_normal("probe/ov", {cfg.d}, rng, 0.1);
    Tensor readout({cfg.d});
    for (double& x : readout.values) {
        x = rng.normal(0.0, 1.0);
    }

    PackedInput p = pack_pair(v, {4, 5, 6}, {7, v.slot_id(), 8}, cfg.max_len);
    const int pos = p.ctx_begin + 1;
    auto loss_of = [&](const ParamStore& s) {
        Tape tape;
        EncoderOutput out = encode(tape, s, cfg, p, {{pos, tape.param(s, "probe/ov")}});
        return tape.value(ops::dot(out.pooled, tape.input(readout, "readout"))).values[0];
    };

    Tape tape;
    EncoderOutput out = encode(tape, store, cfg, p, {{pos, tape.param(store, "probe/ov")}});
    auto grads = tape.backward(ops::dot(out.pooled, tape.input(readout, "readout")));
    REQUIRE(grads.count("probe/ov") == 1);

    // central-difference probe on a single override coordinate
    ParamStore copy = store;
    const double eps = 1e-3;
    double& coord = copy.at("probe/ov").tensor.values[3];
    const double orig = coord;
    coord = orig + eps;
    const double fp = loss_of(copy);
    coord = orig - eps;
    const double fm = loss_of(copy);
    const double fd = (fp - fm) / (2 * eps);
    CHECK(grad_close(grads.at("probe/ov").values[3], fd, 1e-4));
    CHECK(std::abs(grads.at("probe/ov").values[3]) > 1e-12);
}

TEST_CASE("encode: training only an override source reduces the loss") {
    Vocabulary v = tiny_vocab();
    EncoderConfig cfg = tiny_config(v);
    Rng rng(37);
    ParamStore store;
    init_encoder_params(store, cfg, rng);
    store.add_normal("probe/ov", {cfg.d}, rng, 0.1);
    Tensor w({cfg.d, 2});
    for (double& x : w.values) {
        x = rng.normal(0.0, 1.0);
    }

    PackedInput p = pack_pair(v, {4, 5, 6}, {v.slot_id()}, cfg.max_len);
    const std::uint64_t encoder_hash_before = store.value_hash("enc/");
    double initial = 0.0, final_loss = 0.0;
    Adam adam(AdamConfig{0.05});
    const std::set<std::string> active = {"probe/ov"};
    for (int step = 0; step < 30; ++step) {
        Tape tape;
        EncoderOutput out =
            encode(tape, store, cfg, p, {{p.ctx_begin, tape.param(store, "probe/ov")}});
        Var logits = ops::matmul(ops::as_row(out.pooled), tape.input(w, "w"));
        Var loss = ops::cross_entropy(logits, {1});
        const double lv = tape.value(loss).values[0];
        if (step == 0) {
            initial = lv;
        }
        final_loss = lv;
        adam.step(store, tape.backward(loss), &active);
    }
    CHECK(final_loss < initial);
    CHECK(store.value_hash("enc/") == encoder_hash_before);
}

TEST_CASE("mlm head: logits shape and untied weights") {
    Vocabulary v = tiny_vocab();
    EncoderConfig cfg = tiny_config(v);
    Rng rng(41);
    ParamStore store;
    init_encoder_params(store, cfg, rng);
    init_mlm_params(store, cfg, rng);

    PackedInput p = pack_pair(v, {4, 5, 6}, {7, 8}, cfg.max_len);
    Tape tape;
    EncoderOutput out = encode(tape, store, cfg, p);
    Var logits = mlm_logits(tape, store, out.hidden);
    CHECK(tape.value(logits).shape == std::vector<int>{p.length(), cfg.vocab_size});

    // untied head: projecting through the embedding table instead gives
    // different logits for a generic init
    Var tied = ops::matmul_bt(out.hidden, tape.param(store, "enc/tok_emb"));
    CHECK(tape.value(logits).values != tape.value(tied).values);
}

TEST_CASE("encoder config: JSON round trip and validation") {
    Vocabulary v = tiny_vocab();
    EncoderConfig cfg = tiny_config(v);
    EncoderConfig back = EncoderConfig::from_json(cfg.to_json());
    CHECK(back.to_json() == cfg.to_json());

    EncoderConfig bad = cfg;
    bad.d = 15;  // not divisible by heads
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}
