#pragma once

#include <stdexcept>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "ctxlab/autodiff.hpp"
#include "ctxlab/params.hpp"
#include "ctxlab/rng.hpp"
#include "ctxlab/vocab.hpp"

namespace ctxlab {

// Two-segment transformer encoder, BERT layout: learned token/position/
// segment embeddings, post-layer-norm blocks, tanh pooler over [CLS].
struct EncoderConfig {
    int vocab_size = 0;
    int d = 64;
    int n_layers = 2;
    int n_heads = 4;
    int d_ff = 128;
    int max_len = 64;
    int n_segments = 2;
    double init_sigma = 0.02;      // weight matrices
    double init_sigma_emb = 0.1;   // embedding tables; tokens need to start distinct

    void validate() const {
        if (vocab_size <= 0 || d <= 0 || n_layers <= 0 || n_heads <= 0 || d_ff <= 0 ||
            max_len <= 0) {
            throw std::invalid_argument("encoder config: all sizes must be positive");
        }
        if (d % n_heads != 0) {
            throw std::invalid_argument("encoder config: d must be divisible by n_heads");
        }
        if (n_segments != 2) {
            throw std::invalid_argument("encoder config: pair encoding needs 2 segments");
        }
    }

    nlohmann::json to_json() const {
        return {{"vocab_size", vocab_size}, {"d", d},           {"n_layers", n_layers},
                {"n_heads", n_heads},       {"d_ff", d_ff},     {"max_len", max_len},
                {"n_segments", n_segments}, {"init_sigma", init_sigma},
                {"init_sigma_emb", init_sigma_emb}};
    }

    static EncoderConfig from_json(const nlohmann::json& j) {
        EncoderConfig c;
        c.vocab_size = j.value("vocab_size", c.vocab_size);
        c.d = j.value("d", c.d);
        c.n_layers = j.value("n_layers", c.n_layers);
        c.n_heads = j.value("n_heads", c.n_heads);
        c.d_ff = j.value("d_ff", c.d_ff);
        c.max_len = j.value("max_len", c.max_len);
        c.n_segments = j.value("n_segments", c.n_segments);
        c.init_sigma = j.value("init_sigma", c.init_sigma);
        c.init_sigma_emb = j.value("init_sigma_emb", c.init_sigma_emb);
        return c;
    }
};

// [CLS] s [SEP] ctx [SEP] with segment 0 over [CLS] s [SEP] and segment 1
// over ctx [SEP]. ctx_begin/ctx_end delimit the context tokens (no [SEP]).
struct PackedInput {
    std::vector<int> token_ids;
    std::vector<int> segment_ids;
    int ctx_begin = 0;
    int ctx_end = 0;

    int length() const { return static_cast<int>(token_ids.size()); }
    bool has_context() const { return ctx_end > ctx_begin; }
};

// Embedding override: the token-embedding term at `position` is replaced by
// the given graph node (segment and position embeddings still apply).
struct Override {
    int position;
    Var source;
};

inline PackedInput pack_pair(const Vocabulary& vocab, const std::vector<int>& s_ids,
                             const std::vector<int>& ctx_ids, int max_len) {
    if (s_ids.empty()) {
        throw std::invalid_argument("pack_pair: empty sentence");
    }
    if (ctx_ids.empty()) {
        throw std::invalid_argument("pack_pair: empty context");
    }
    const int len = static_cast<int>(s_ids.size() + ctx_ids.size()) + 3;
    if (len > max_len) {
        throw std::length_error("pack_pair: packed length " + std::to_string(len) +
                                " exceeds max_len " + std::to_string(max_len));
    }
    PackedInput p;
    p.token_ids.reserve(static_cast<std::size_t>(len));
    p.token_ids.push_back(vocab.cls_id());
    p.token_ids.insert(p.token_ids.end(), s_ids.begin(), s_ids.end());
    p.token_ids.push_back(vocab.sep_id());
    p.ctx_begin = static_cast<int>(p.token_ids.size());
    p.token_ids.insert(p.token_ids.end(), ctx_ids.begin(), ctx_ids.end());
    p.ctx_end = static_cast<int>(p.token_ids.size());
    p.token_ids.push_back(vocab.sep_id());
    p.segment_ids.assign(static_cast<std::size_t>(len), 1);
    for (int i = 0; i < p.ctx_begin; ++i) {
        p.segment_ids[static_cast<std::size_t>(i)] = 0;
    }
    return p;
}

// [CLS] s [SEP], all segment 0; no context span.
inline PackedInput pack_single(const Vocabulary& vocab, const std::vector<int>& s_ids,
                               int max_len) {
    if (s_ids.empty()) {
        throw std::invalid_argument("pack_single: empty sentence");
    }
    const int len = static_cast<int>(s_ids.size()) + 2;
    if (len > max_len) {
        throw std::length_error("pack_single: packed length exceeds max_len");
    }
    PackedInput p;
    p.token_ids.push_back(vocab.cls_id());
    p.token_ids.insert(p.token_ids.end(), s_ids.begin(), s_ids.end());
    p.token_ids.push_back(vocab.sep_id());
    p.segment_ids.assign(p.token_ids.size(), 0);
    p.ctx_begin = p.ctx_end = len - 1;
    return p;
}

inline void init_encoder_params(ParamStore& store, const EncoderConfig& cfg, Rng& rng) {
    cfg.validate();
    const double s = cfg.init_sigma;
    store.add_normal("enc/tok_emb", {cfg.vocab_size, cfg.d}, rng, cfg.init_sigma_emb);
    store.add_normal("enc/pos_emb", {cfg.max_len, cfg.d}, rng, cfg.init_sigma_emb);
    store.add_normal("enc/seg_emb", {cfg.n_segments, cfg.d}, rng, cfg.init_sigma_emb);
    store.add("enc/emb_ln/g", Tensor({cfg.d}, std::vector<double>(cfg.d, 1.0)));
    store.add("enc/emb_ln/b", Tensor({cfg.d}));
    for (int l = 0; l < cfg.n_layers; ++l) {
        const std::string pre = "enc/l" + std::to_string(l) + "/";
        for (const char* w : {"attn/wq", "attn/wk", "attn/wv", "attn/wo"}) {
            store.add_normal(pre + w, {cfg.d, cfg.d}, rng, s);
        }
        for (const char* b : {"attn/bq", "attn/bk", "attn/bv", "attn/bo"}) {
            store.add(pre + b, Tensor({cfg.d}));
        }
        store.add(pre + "ln1/g", Tensor({cfg.d}, std::vector<double>(cfg.d, 1.0)));
        store.add(pre + "ln1/b", Tensor({cfg.d}));
        store.add_normal(pre + "ff/w1", {cfg.d, cfg.d_ff}, rng, s);
        store.add(pre + "ff/b1", Tensor({cfg.d_ff}));
        store.add_normal(pre + "ff/w2", {cfg.d_ff, cfg.d}, rng, s);
        store.add(pre + "ff/b2", Tensor({cfg.d}));
        store.add(pre + "ln2/g", Tensor({cfg.d}, std::vector<double>(cfg.d, 1.0)));
        store.add(pre + "ln2/b", Tensor({cfg.d}));
    }
    store.add_normal("enc/pooler/w", {cfg.d, cfg.d}, rng, s);
    store.add("enc/pooler/b", Tensor({cfg.d}));
}

// Output projection of the masked-LM head; untied from the embedding table.
inline void init_mlm_params(ParamStore& store, const EncoderConfig& cfg, Rng& rng) {
    store.add_normal("mlm/w", {cfg.d, cfg.vocab_size}, rng, cfg.init_sigma);
    store.add("mlm/b", Tensor({cfg.vocab_size}));
}

struct EncoderOutput {
    Var hidden;  // [len, d]
    Var pooled;  // [d]
};

inline EncoderOutput encode(Tape& tape, const ParamStore& store, const EncoderConfig& cfg,
                            const PackedInput& input, const std::vector<Override>& overrides = {}) {
    const int len = input.length();
    if (len > cfg.max_len) {
        throw std::length_error("encode: input longer than max_len");
    }
    for (int id : input.token_ids) {
        if (id < 0 || id >= cfg.vocab_size) {
            throw std::invalid_argument("encode: token id out of range");
        }
    }

    Var tok = ops::embedding_lookup(tape.param(store, "enc/tok_emb"), input.token_ids);
    if (!overrides.empty()) {
        std::vector<int> positions;
        std::vector<Var> sources;
        for (const Override& o : overrides) {
            if (o.position < 0 || o.position >= len) {
                throw std::invalid_argument("encode: override position out of range");
            }
            positions.push_back(o.position);
            sources.push_back(o.source);
        }
        tok = ops::replace_rows(tok, positions, sources);
    }
    std::vector<int> pos_ids(static_cast<std::size_t>(len));
    for (int i = 0; i < len; ++i) {
        pos_ids[static_cast<std::size_t>(i)] = i;
    }
    Var pos = ops::embedding_lookup(tape.param(store, "enc/pos_emb"), pos_ids);
    Var seg = ops::embedding_lookup(tape.param(store, "enc/seg_emb"), input.segment_ids);
    Var h = ops::layer_norm(ops::add(ops::add(tok, pos), seg), tape.param(store, "enc/emb_ln/g"),
                            tape.param(store, "enc/emb_ln/b"));

    const int hd = cfg.d / cfg.n_heads;
    const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(hd));
    for (int l = 0; l < cfg.n_layers; ++l) {
        const std::string pre = "enc/l" + std::to_string(l) + "/";
        Var q = ops::linear(h, tape.param(store, pre + "attn/wq"), tape.param(store, pre + "attn/bq"));
        Var k = ops::linear(h, tape.param(store, pre + "attn/wk"), tape.param(store, pre + "attn/bk"));
        Var v = ops::linear(h, tape.param(store, pre + "attn/wv"), tape.param(store, pre + "attn/bv"));
        std::vector<Var> heads;
        heads.reserve(static_cast<std::size_t>(cfg.n_heads));
        for (int hI = 0; hI < cfg.n_heads; ++hI) {
            Var qh = ops::slice_cols(q, hI * hd, (hI + 1) * hd);
            Var kh = ops::slice_cols(k, hI * hd, (hI + 1) * hd);
            Var vh = ops::slice_cols(v, hI * hd, (hI + 1) * hd);
            Var scores = ops::scale(ops::matmul_bt(qh, kh), inv_sqrt_hd);
            Var attn = ops::softmax(scores);
            heads.push_back(ops::matmul(attn, vh));
        }
        Var ctx = cfg.n_heads == 1 ? heads[0] : ops::concat_cols(heads);
        Var attn_out =
            ops::linear(ctx, tape.param(store, pre + "attn/wo"), tape.param(store, pre + "attn/bo"));
        h = ops::layer_norm(ops::add(h, attn_out), tape.param(store, pre + "ln1/g"),
                            tape.param(store, pre + "ln1/b"));
        Var ff = ops::linear(ops::gelu(ops::linear(h, tape.param(store, pre + "ff/w1"),
                                                   tape.param(store, pre + "ff/b1"))),
                             tape.param(store, pre + "ff/w2"), tape.param(store, pre + "ff/b2"));
        h = ops::layer_norm(ops::add(h, ff), tape.param(store, pre + "ln2/g"),
                            tape.param(store, pre + "ln2/b"));
    }

    Var cls = ops::slice_row(h, 0);  // [1, d]
    Var pooled = ops::as_vec(ops::tanh_op(ops::add_bias(
        ops::matmul(cls, tape.param(store, "enc/pooler/w")), tape.param(store, "enc/pooler/b"))));
    return EncoderOutput{h, pooled};
}

// Per-position vocabulary logits, [len, vocab_size].
inline Var mlm_logits(Tape& tape, const ParamStore& store, Var hidden) {
    return ops::linear(hidden, tape.param(store, "mlm/w"), tape.param(store, "mlm/b"));
}

}  // namespace ctxlab
