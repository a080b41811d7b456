#pragma once

#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "ctxlab/encoder.hpp"
#include "ctxlab/explanations.hpp"
#include "ctxlab/params.hpp"
#include "ctxlab/rng.hpp"

namespace ctxlab {

// Perturbed context: o1 [M]_1 ... [M]_m o2, with the m slot embeddings coming
// from learned parameters instead of the vocabulary. The variants differ in
// where those embeddings come from and whether they train.
enum class PCVariant {
    Random,                 // M[m,d], trainable
    FixedRandom,            // M[m,d], frozen
    Conditional,            // per-slot MLP of the pooled sentence encoding
    FactorizedRandom,       // rank <= l: W_fr[d,l] * MF[m,l] rows
    FactorizedConditional,  // W_fc2[d,l] * (W_fc1[l,d] * F_i(x_pool))
};

inline const char* to_string(PCVariant v) {
    switch (v) {
        case PCVariant::Random: return "Random";
        case PCVariant::FixedRandom: return "FixedRandom";
        case PCVariant::Conditional: return "Conditional";
        case PCVariant::FactorizedRandom: return "FactorizedRandom";
        case PCVariant::FactorizedConditional: return "FactorizedConditional";
    }
    return "?";
}

inline PCVariant pc_variant_from_string(const std::string& s) {
    for (PCVariant v : {PCVariant::Random, PCVariant::FixedRandom, PCVariant::Conditional,
                        PCVariant::FactorizedRandom, PCVariant::FactorizedConditional}) {
        if (s == to_string(v)) {
            return v;
        }
    }
    throw std::invalid_argument("unknown perturbed-context variant: " + s);
}

struct PCSpec {
    PCVariant variant = PCVariant::Random;
    int m = 4;
    int l = 32;
    int n_contexts = 1;

    bool conditional() const {
        return variant == PCVariant::Conditional || variant == PCVariant::FactorizedConditional;
    }
    bool factorized() const {
        return variant == PCVariant::FactorizedRandom ||
               variant == PCVariant::FactorizedConditional;
    }

    void validate(int d) const {
        if (m < 1) {
            throw std::invalid_argument("pc spec: m must be >= 1");
        }
        if (n_contexts < 1) {
            throw std::invalid_argument("pc spec: n_contexts must be >= 1");
        }
        if (factorized() && (l < 1 || l >= d)) {
            throw std::invalid_argument("pc spec: factorization size l must satisfy 1 <= l < d");
        }
    }
};

// Appendix-style initialization: every entry i.i.d. normal with the scalar
// mean/std of the token-embedding table; the projection matrices additionally
// scaled by 1/sqrt(l) so initial row norms stay comparable to token rows.
// Parameters are created under "<prefix>/..." (default context 0: "pc/0").
inline void init_pc(ParamStore& store, const PCSpec& spec, const Tensor& embedding_table,
                    int d, Rng& rng, const std::string& prefix = "pc/0") {
    spec.validate(d);
    if (embedding_table.values.empty()) {
        throw std::invalid_argument("init_pc: empty embedding table");
    }
    double mu = 0.0;
    for (double v : embedding_table.values) {
        mu += v;
    }
    mu /= static_cast<double>(embedding_table.values.size());
    double var = 0.0;
    for (double v : embedding_table.values) {
        var += (v - mu) * (v - mu);
    }
    var /= static_cast<double>(embedding_table.values.size());
    const double sigma = std::sqrt(var);

    auto draw = [&](const std::string& id, std::vector<int> shape, double scale, bool trainable) {
        Tensor t(std::move(shape));
        for (double& v : t.values) {
            v = rng.normal(mu, sigma) * scale;
        }
        store.add(prefix + "/" + id, std::move(t), trainable);
    };

    const double proj_scale = 1.0 / std::sqrt(static_cast<double>(spec.l));
    switch (spec.variant) {
        case PCVariant::Random:
            draw("M", {spec.m, d}, 1.0, true);
            break;
        case PCVariant::FixedRandom:
            draw("M", {spec.m, d}, 1.0, false);
            break;
        case PCVariant::FactorizedRandom:
            draw("MF", {spec.m, spec.l}, 1.0, true);
            draw("W_fr", {d, spec.l}, proj_scale, true);
            break;
        case PCVariant::Conditional:
            for (int i = 0; i < spec.m; ++i) {
                const std::string f = "F" + std::to_string(i) + "/";
                draw(f + "w1", {d, d}, 1.0, true);
                draw(f + "b1", {d}, 1.0, true);
                draw(f + "w2", {d, d}, 1.0, true);
                draw(f + "b2", {d}, 1.0, true);
            }
            break;
        case PCVariant::FactorizedConditional:
            for (int i = 0; i < spec.m; ++i) {
                const std::string f = "F" + std::to_string(i) + "/";
                draw(f + "w1", {d, d}, 1.0, true);
                draw(f + "b1", {d}, 1.0, true);
                draw(f + "w2", {d, d}, 1.0, true);
                draw(f + "b2", {d}, 1.0, true);
            }
            draw("W_fc1", {spec.l, d}, proj_scale, true);
            draw("W_fc2", {d, spec.l}, proj_scale, true);
            break;
    }
}

namespace detail {

// Slot function F_i: single-hidden-layer MLP d -> d -> d with GELU.
inline Var pc_slot_mlp(Tape& tape, const ParamStore& store, const std::string& prefix, int i,
                       Var x_row) {
    const std::string f = prefix + "/F" + std::to_string(i) + "/";
    Var h = ops::gelu(ops::linear(x_row, tape.param(store, f + "w1"), tape.param(store, f + "b1")));
    return ops::linear(h, tape.param(store, f + "w2"), tape.param(store, f + "b2"));
}

}  // namespace detail

// The m x d matrix of slot embeddings. Conditional variants require the
// pooled encoding of the bare sentence; the others reject it unused.
inline Var context_embeddings(Tape& tape, const ParamStore& store, const PCSpec& spec, int d,
                              std::optional<Var> x_pool, const std::string& prefix = "pc/0") {
    spec.validate(d);
    if (spec.conditional() && !x_pool.has_value()) {
        throw std::invalid_argument("context_embeddings: conditional variant needs x_pool");
    }
    switch (spec.variant) {
        case PCVariant::Random:
        case PCVariant::FixedRandom:
            return tape.param(store, prefix + "/M");
        case PCVariant::FactorizedRandom:
            // row i = (W_fr * MF_i)^T = MF_i * W_fr^T
            return ops::matmul_bt(tape.param(store, prefix + "/MF"),
                                  tape.param(store, prefix + "/W_fr"));
        case PCVariant::Conditional: {
            Var x_row = ops::as_row(*x_pool);
            std::vector<Var> rows;
            rows.reserve(static_cast<std::size_t>(spec.m));
            for (int i = 0; i < spec.m; ++i) {
                rows.push_back(ops::as_vec(detail::pc_slot_mlp(tape, store, prefix, i, x_row)));
            }
            return ops::reshape(ops::concat(rows), {spec.m, d});
        }
        case PCVariant::FactorizedConditional: {
            Var x_row = ops::as_row(*x_pool);
            std::vector<Var> rows;
            rows.reserve(static_cast<std::size_t>(spec.m));
            for (int i = 0; i < spec.m; ++i) {
                Var f = detail::pc_slot_mlp(tape, store, prefix, i, x_row);   // [1,d]
                Var z = ops::matmul_bt(f, tape.param(store, prefix + "/W_fc1"));   // [1,l]
                Var e = ops::matmul_bt(z, tape.param(store, prefix + "/W_fc2"));   // [1,d]
                rows.push_back(ops::as_vec(e));
            }
            return ops::reshape(ops::concat(rows), {spec.m, d});
        }
    }
    throw std::logic_error("context_embeddings: unreachable");
}

// Pooled encoding of [CLS] s [SEP] o1 [M]_1..[M]_m o2 [SEP] with the slot
// positions overridden by the context embeddings. For conditional variants
// x_pool is the pooled encoding of the sentence packed alone.
inline Var pc_features(Tape& tape, const ParamStore& store, const EncoderConfig& cfg,
                       const Vocabulary& vocab, const PCSpec& spec,
                       const std::vector<std::string>& s_tokens,
                       const std::vector<std::string>& o1_tokens,
                       const std::vector<std::string>& o2_tokens,
                       const std::string& prefix = "pc/0") {
    const std::vector<int> s_ids = vocab.to_ids(s_tokens);

    std::vector<int> ctx_ids = vocab.to_ids(o1_tokens);
    const int slot_offset = static_cast<int>(ctx_ids.size());
    for (int i = 0; i < spec.m; ++i) {
        ctx_ids.push_back(vocab.slot_id());
    }
    const std::vector<int> o2_ids = vocab.to_ids(o2_tokens);
    ctx_ids.insert(ctx_ids.end(), o2_ids.begin(), o2_ids.end());

    PackedInput packed = pack_pair(vocab, s_ids, ctx_ids, cfg.max_len);

    std::optional<Var> x_pool;
    if (spec.conditional()) {
        x_pool = encode(tape, store, cfg, pack_single(vocab, s_ids, cfg.max_len)).pooled;
    }
    Var ce = context_embeddings(tape, store, spec, cfg.d, x_pool, prefix);

    std::vector<Override> overrides;
    overrides.reserve(static_cast<std::size_t>(spec.m));
    for (int i = 0; i < spec.m; ++i) {
        overrides.push_back(
            Override{packed.ctx_begin + slot_offset + i, ops::as_vec(ops::slice_row(ce, i))});
    }
    return encode(tape, store, cfg, packed, overrides).pooled;
}

// Concatenated features of n independently parameterized contexts
// ("pc/0".."pc/n-1"), mirroring the ExpBERT concatenation.
inline Var multi_pc_features(Tape& tape, const ParamStore& store, const EncoderConfig& cfg,
                             const Vocabulary& vocab, const PCSpec& spec,
                             const std::vector<std::string>& s_tokens,
                             const std::vector<std::string>& o1_tokens,
                             const std::vector<std::string>& o2_tokens) {
    std::vector<Var> feats;
    feats.reserve(static_cast<std::size_t>(spec.n_contexts));
    for (int i = 0; i < spec.n_contexts; ++i) {
        feats.push_back(pc_features(tape, store, cfg, vocab, spec, s_tokens, o1_tokens, o2_tokens,
                                    "pc/" + std::to_string(i)));
    }
    return spec.n_contexts == 1 ? feats[0] : ops::concat(feats);
}

// ExpBERT features of the explanation list with the perturbed-context block
// appended last: (n+1)*d. An empty list degenerates to the context feature.
inline Var mixture_features(Tape& tape, const ParamStore& store, const EncoderConfig& cfg,
                            const Vocabulary& vocab, const PCSpec& spec,
                            const std::vector<std::string>& s_tokens,
                            const std::vector<std::string>& o1_tokens,
                            const std::vector<std::string>& o2_tokens, const ExplanationSet& set,
                            const std::string& prefix = "pc/0") {
    Var pc = pc_features(tape, store, cfg, vocab, spec, s_tokens, o1_tokens, o2_tokens, prefix);
    if (set.empty()) {
        return pc;
    }
    Var exp = expbert_features(tape, store, cfg, vocab, s_tokens, o1_tokens, o2_tokens, set);
    return ops::concat({exp, pc});
}

struct PCParamCount {
    long total = 0;
    long trainable = 0;
};

inline PCParamCount param_count(const PCSpec& spec, int d) {
    spec.validate(d);
    const long m = spec.m, l = spec.l, dd = d;
    const long mlp = m * (2 * dd * dd + 2 * dd);  // per-slot d->d->d MLP with biases
    PCParamCount c;
    switch (spec.variant) {
        case PCVariant::Random:
            c.total = m * dd;
            c.trainable = c.total;
            break;
        case PCVariant::FixedRandom:
            c.total = m * dd;
            c.trainable = 0;
            break;
        case PCVariant::FactorizedRandom:
            c.total = m * l + dd * l;
            c.trainable = c.total;
            break;
        case PCVariant::Conditional:
            c.total = mlp;
            c.trainable = c.total;
            break;
        case PCVariant::FactorizedConditional:
            c.total = mlp + l * dd + dd * l;
            c.trainable = c.total;
            break;
    }
    return c;
}

}  // namespace ctxlab
