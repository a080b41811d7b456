#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "ctxlab/adam.hpp"
#include "ctxlab/model.hpp"

namespace ctxlab {

struct TrainConfig {
    double lr = 1e-3;
    int batch_size = 16;
    int epochs = 5;
    std::uint64_t seed = 0;
    Regime regime = Regime::FineTune;
    int head_hidden = 64;
    // linear learning-rate ramp over the first fraction of all steps; takes
    // the early variance out of from-scratch training
    double warmup_frac = 0.05;
    // faster second-moment tracking suits the short desk-scale runs
    double adam_beta2 = 0.99;

    void validate() const {
        if (!(lr >= 0.0) || batch_size < 1 || epochs < 0 || head_hidden < 1 ||
            !(warmup_frac >= 0.0 && warmup_frac < 1.0)) {
            throw std::invalid_argument("train config: bad values");
        }
    }

    nlohmann::json to_json() const {
        return {{"lr", lr},           {"batch_size", batch_size},
                {"epochs", epochs},   {"seed", seed},
                {"regime", to_string(regime)}, {"head_hidden", head_hidden},
                {"warmup_frac", warmup_frac}, {"adam_beta2", adam_beta2}};
    }

    static TrainConfig from_json(const nlohmann::json& j) {
        TrainConfig c;
        c.lr = j.value("lr", c.lr);
        c.batch_size = j.value("batch_size", c.batch_size);
        c.epochs = j.value("epochs", c.epochs);
        c.seed = j.value("seed", c.seed);
        if (j.contains("regime")) {
            c.regime = regime_from_string(j["regime"].get<std::string>());
        }
        c.head_hidden = j.value("head_hidden", c.head_hidden);
        c.warmup_frac = j.value("warmup_frac", c.warmup_frac);
        c.adam_beta2 = j.value("adam_beta2", c.adam_beta2);
        return c;
    }
};

struct Metrics {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    double accuracy = 0.0;

    nlohmann::json to_json() const {
        return {{"precision", precision}, {"recall", recall}, {"f1", f1}, {"accuracy", accuracy}};
    }
};

// Binary tasks: F1 of the positive (non-nil) class. Multiclass: micro-F1
// with the nil label (id 0) excluded from both predictions and golds;
// accuracy always counts every example.
inline Metrics compute_metrics(const std::vector<int>& golds, const std::vector<int>& preds,
                               int n_relations) {
    if (golds.empty() || golds.size() != preds.size()) {
        throw std::invalid_argument("metrics: empty or mismatched prediction lists");
    }
    Metrics m;
    std::size_t correct = 0;
    double tp = 0, pred_pos = 0, gold_pos = 0;
    for (std::size_t i = 0; i < golds.size(); ++i) {
        correct += golds[i] == preds[i];
        if (n_relations == 2) {
            tp += golds[i] == 1 && preds[i] == 1;
            pred_pos += preds[i] == 1;
            gold_pos += golds[i] == 1;
        } else {
            tp += preds[i] != 0 && preds[i] == golds[i];
            pred_pos += preds[i] != 0;
            gold_pos += golds[i] != 0;
        }
    }
    m.accuracy = static_cast<double>(correct) / static_cast<double>(golds.size());
    m.precision = pred_pos > 0 ? tp / pred_pos : 0.0;
    m.recall = gold_pos > 0 ? tp / gold_pos : 0.0;
    m.f1 = (m.precision + m.recall) > 0.0
               ? 2.0 * m.precision * m.recall / (m.precision + m.recall)
               : 0.0;
    return m;
}

struct EpochStats {
    double train_loss = 0.0;
    Metrics val;
};

struct History {
    std::vector<EpochStats> epochs;

    nlohmann::json to_json() const {
        nlohmann::json arr = nlohmann::json::array();
        for (const auto& e : epochs) {
            arr.push_back({{"train_loss", e.train_loss}, {"val", e.val.to_json()}});
        }
        return arr;
    }
};

namespace detail {

inline int argmax_row(const Tensor& t, int row) {
    const int c = t.shape[1];
    int best = 0;
    for (int j = 1; j < c; ++j) {
        if (t.at(row, j) > t.at(row, best)) {
            best = j;
        }
    }
    return best;
}

// Feature matrix [N, feature_dim] computed forward-only, one tape per example.
inline Tensor feature_matrix(const Model& m, const std::vector<Example>& examples) {
    Tensor out({static_cast<int>(examples.size()), m.feature_dim});
    for (std::size_t i = 0; i < examples.size(); ++i) {
        Tape tape;
        const Tensor& f = tape.value(model_features(tape, m, examples[i]));
        std::copy(f.values.begin(), f.values.end(),
                  out.values.begin() + i * static_cast<std::size_t>(m.feature_dim));
    }
    return out;
}

inline std::vector<int> labels_of(const std::vector<Example>& examples) {
    std::vector<int> out;
    out.reserve(examples.size());
    for (const Example& ex : examples) {
        out.push_back(ex.label);
    }
    return out;
}

inline std::vector<int> predict_from_features(const Model& m, const Tensor& feats) {
    Tape tape;
    Var logits = head_logits(tape, m, tape.input(feats, "features"));
    const Tensor& lv = tape.value(logits);
    std::vector<int> preds(static_cast<std::size_t>(lv.shape[0]));
    for (int i = 0; i < lv.shape[0]; ++i) {
        preds[static_cast<std::size_t>(i)] = argmax_row(lv, i);
    }
    return preds;
}

// The feature path has no run-time trainable parameters for these kinds, so
// features are constant across a frozen run and can be computed once.
inline bool static_frozen_features(const Model& m, Regime regime) {
    if (regime != Regime::FrozenLM) {
        return false;
    }
    switch (m.kind.tag) {
        case ModelKind::Tag::NoExp:
        case ModelKind::Tag::ExpGold:
        case ModelKind::Tag::ExpCorrupted:
            return true;
        default:
            return false;
    }
}

}  // namespace detail

inline std::vector<int> predict(const Model& m, const std::vector<Example>& examples) {
    std::vector<int> preds;
    preds.reserve(examples.size());
    for (const Example& ex : examples) {
        Tape tape;
        const Tensor& lv = tape.value(model_logits(tape, m, ex));
        preds.push_back(detail::argmax_row(lv, 0));
    }
    return preds;
}

inline Metrics evaluate(const Model& m, const std::vector<Example>& examples) {
    if (examples.empty()) {
        throw std::invalid_argument("evaluate: empty split");
    }
    return compute_metrics(detail::labels_of(examples), predict(m, examples), m.n_relations);
}

// Mini-batch Adam on softmax cross-entropy. Batch order is shuffled with the
// config seed once per epoch; only trainable_set(model, regime) parameters
// move. History records the mean train loss and validation metrics per epoch.
inline History train(Model& m, const Dataset& ds, const TrainConfig& cfg) {
    cfg.validate();
    if (cfg.regime == Regime::FrozenLM && !m.encoder_pretrained) {
        throw std::runtime_error("train: frozen regime requires a pretrained encoder checkpoint");
    }
    if (ds.train.empty()) {
        throw std::invalid_argument("train: empty train split");
    }
    const std::set<std::string> active = trainable_set(m, cfg.regime);
    Adam adam(AdamConfig{cfg.lr, 0.9, cfg.adam_beta2, 1e-8});
    Rng order_rng(mix_seed(cfg.seed, 0x0badcafe));
    History hist;

    const long total_steps =
        static_cast<long>(cfg.epochs) *
        ((static_cast<long>(ds.train.size()) + cfg.batch_size - 1) / cfg.batch_size);
    const long warmup_steps = static_cast<long>(cfg.warmup_frac * total_steps);
    long step_no = 0;
    auto current_lr = [&] {
        if (warmup_steps <= 0 || step_no >= warmup_steps) {
            return cfg.lr;
        }
        return cfg.lr * static_cast<double>(step_no + 1) / static_cast<double>(warmup_steps);
    };

    const bool cached = detail::static_frozen_features(m, cfg.regime);
    Tensor train_feats, val_feats;
    if (cached) {
        train_feats = detail::feature_matrix(m, ds.train);
        val_feats = detail::feature_matrix(m, ds.val);
    }
    const std::vector<int> train_labels = detail::labels_of(ds.train);

    std::vector<int> order(ds.train.size());
    for (std::size_t i = 0; i < order.size(); ++i) {
        order[i] = static_cast<int>(i);
    }

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        order_rng.shuffle(order);
        double loss_sum = 0.0;
        int n_batches = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), start + cfg.batch_size);
            const int bsz = static_cast<int>(end - start);
            try {
                if (cached) {
                    Tensor batch({bsz, m.feature_dim});
                    std::vector<int> labels(static_cast<std::size_t>(bsz));
                    for (int i = 0; i < bsz; ++i) {
                        const int src = order[start + static_cast<std::size_t>(i)];
                        std::copy(train_feats.values.begin() +
                                      static_cast<std::size_t>(src) * m.feature_dim,
                                  train_feats.values.begin() +
                                      static_cast<std::size_t>(src + 1) * m.feature_dim,
                                  batch.values.begin() + static_cast<std::size_t>(i) * m.feature_dim);
                        labels[static_cast<std::size_t>(i)] = train_labels[static_cast<std::size_t>(src)];
                    }
                    Tape tape;
                    Var loss = ops::cross_entropy(
                        head_logits(tape, m, tape.input(std::move(batch), "features")), labels);
                    loss_sum += tape.value(loss).values[0];
                    auto grads = tape.backward(loss);
                    adam.set_lr(current_lr());
                    adam.step(m.params, grads, &active);
                } else {
                    std::map<std::string, Tensor> acc;
                    double batch_loss = 0.0;
                    for (std::size_t i = start; i < end; ++i) {
                        const Example& ex = ds.train[static_cast<std::size_t>(order[i])];
                        Tape tape;
                        Var loss = ops::cross_entropy(model_logits(tape, m, ex), {ex.label});
                        batch_loss += tape.value(loss).values[0];
                        for (auto& [id, g] : tape.backward(loss)) {
                            auto it = acc.find(id);
                            if (it == acc.end()) {
                                acc.emplace(id, std::move(g));
                            } else {
                                for (std::size_t k = 0; k < g.values.size(); ++k) {
                                    it->second.values[k] += g.values[k];
                                }
                            }
                        }
                    }
                    for (auto& [id, g] : acc) {
                        for (double& v : g.values) {
                            v /= bsz;
                        }
                    }
                    loss_sum += batch_loss / bsz;
                    adam.set_lr(current_lr());
                    adam.step(m.params, acc, &active);
                }
            } catch (const NumericsError& e) {
                throw std::runtime_error("train: aborted at epoch " + std::to_string(epoch) +
                                         " batch " + std::to_string(n_batches) + ": " + e.what());
            }
            ++n_batches;
            ++step_no;
        }
        EpochStats stats;
        stats.train_loss = loss_sum / std::max(1, n_batches);
        if (!ds.val.empty()) {
            if (cached) {
                stats.val = compute_metrics(detail::labels_of(ds.val),
                                            detail::predict_from_features(m, val_feats),
                                            m.n_relations);
            } else {
                stats.val = evaluate(m, ds.val);
            }
        }
        hist.epochs.push_back(stats);
    }
    return hist;
}

// --------------------------------------------------------------------------
// Masked-LM pretraining on sentence pairs from the task distribution.
// 15% of real-token positions per pair: 80% -> [MASK], 10% -> random word,
// 10% -> kept; loss is mean cross-entropy at the selected positions.
// --------------------------------------------------------------------------

struct MlmConfig {
    int steps = 1500;
    int batch = 8;
    double lr = 1e-3;
    std::uint64_t seed = 0;
    double mask_fraction = 0.15;
    // Pair construction. With pair_copy_fraction the second segment is a full
    // copy of the first sentence, with pair_span_fraction a short window of
    // it, otherwise an independent sentence. Half of the derived pairs get
    // round(copy_noise * len), at least one, of their tokens flipped to
    // random words. Mirrors the premise/hypothesis token overlap of an
    // NLI-style pair corpus.
    double pair_copy_fraction = 0.3;
    double pair_span_fraction = 0.4;
    double copy_noise = 0.25;
    int span_min = 3;
    int span_max = 5;
    // Weight of the pair-support companion loss: a 2-way head on the pooled
    // output predicts whether every second-segment token is supported by the
    // first segment (exact copies and spans yes; flipped or independent no).
    // Plays the role NSP/NLI classification plays next to masked-LM: it is
    // what trains the [CLS]/pooler readout the frozen regime later reads.
    // Kept small so pooled retains token-identity information next to the
    // support signal.
    double coherence_weight = 0.15;
};

struct MlmStats {
    double initial_heldout_loss = 0.0;
    double final_heldout_loss = 0.0;
    double heldout_top1 = 0.0;
    int steps = 0;
};

namespace detail {

struct MaskedPair {
    PackedInput packed;
    std::vector<int> positions;  // masked positions in the packed sequence
    std::vector<int> labels;     // original ids at those positions
};

inline MaskedPair make_masked_pair(const Vocabulary& vocab, const std::vector<int>& a,
                                   const std::vector<int>& b, int max_len, double fraction,
                                   Rng& rng) {
    MaskedPair mp;
    mp.packed = pack_pair(vocab, a, b, max_len);
    std::vector<int> candidates;
    for (int i = 0; i < mp.packed.length(); ++i) {
        const int id = mp.packed.token_ids[static_cast<std::size_t>(i)];
        if (id != vocab.cls_id() && id != vocab.sep_id()) {
            candidates.push_back(i);
        }
    }
    const int k = std::max(
        1, static_cast<int>(std::floor(fraction * static_cast<double>(candidates.size()) + 0.5)));
    const std::vector<int> picks =
        rng.sample_without_replacement(static_cast<int>(candidates.size()), k);
    const std::vector<int> words = vocab.word_ids();
    for (int pick : picks) {
        const int pos = candidates[static_cast<std::size_t>(pick)];
        mp.positions.push_back(pos);
        mp.labels.push_back(mp.packed.token_ids[static_cast<std::size_t>(pos)]);
        const double u = rng.uniform();
        if (u < 0.8) {
            mp.packed.token_ids[static_cast<std::size_t>(pos)] = vocab.mask_id();
        } else if (u < 0.9) {
            mp.packed.token_ids[static_cast<std::size_t>(pos)] =
                words[rng.uniform_below(words.size())];
        }  // else keep
    }
    return mp;
}

inline std::vector<std::vector<int>> corpus_ids(const Vocabulary& vocab,
                                                const std::vector<std::vector<std::string>>& corpus) {
    std::vector<std::vector<int>> out;
    out.reserve(corpus.size());
    for (const auto& sent : corpus) {
        out.push_back(vocab.to_ids(sent));
    }
    return out;
}

}  // namespace detail

// Mean masked-token loss and top-1 recovery on fixed consecutive pairs of the
// held-out sentences; deterministic for a given seed.
inline std::pair<double, double> mlm_evaluate(const ParamStore& store, const EncoderConfig& cfg,
                                              const Vocabulary& vocab,
                                              const std::vector<std::vector<std::string>>& heldout,
                                              std::uint64_t seed, double mask_fraction = 0.15) {
    const auto ids = detail::corpus_ids(vocab, heldout);
    if (ids.size() < 2) {
        throw std::invalid_argument("mlm_evaluate: need at least two held-out sentences");
    }
    Rng rng(mix_seed(seed, 0x3141592653589793ULL));
    double loss_sum = 0.0;
    int n_pairs = 0, hits = 0, total = 0;
    for (std::size_t i = 0; i + 1 < ids.size(); i += 2) {
        detail::MaskedPair mp =
            detail::make_masked_pair(vocab, ids[i], ids[i + 1], cfg.max_len, mask_fraction, rng);
        Tape tape;
        EncoderOutput out = encode(tape, store, cfg, mp.packed);
        Var logits = ops::gather_rows(mlm_logits(tape, store, out.hidden), mp.positions);
        Var loss = ops::cross_entropy(logits, mp.labels);
        loss_sum += tape.value(loss).values[0];
        ++n_pairs;
        const Tensor& lv = tape.value(logits);
        for (std::size_t p = 0; p < mp.labels.size(); ++p) {
            hits += detail::argmax_row(lv, static_cast<int>(p)) == mp.labels[p];
            ++total;
        }
    }
    return {loss_sum / n_pairs, static_cast<double>(hits) / std::max(1, total)};
}

inline std::pair<ParamStore, MlmStats> mlm_pretrain(
    const EncoderConfig& enc_cfg, const Vocabulary& vocab,
    const std::vector<std::vector<std::string>>& corpus,
    const std::vector<std::vector<std::string>>& heldout, const MlmConfig& cfg) {
    if (corpus.size() < 2) {
        throw std::invalid_argument("mlm_pretrain: need at least two corpus sentences");
    }
    EncoderConfig ec = enc_cfg;
    ec.vocab_size = vocab.size();
    ec.validate();

    Rng rng(cfg.seed);
    ParamStore store;
    init_encoder_params(store, ec, rng);
    init_mlm_params(store, ec, rng);
    store.add_normal("nsp/w", {ec.d, 2}, rng, ec.init_sigma);
    store.add("nsp/b", Tensor({2}));

    MlmStats stats;
    stats.steps = cfg.steps;
    if (!heldout.empty()) {
        stats.initial_heldout_loss =
            mlm_evaluate(store, ec, vocab, heldout, cfg.seed, cfg.mask_fraction).first;
    }

    const auto ids = detail::corpus_ids(vocab, corpus);
    const std::vector<int> words = vocab.word_ids();
    Adam adam(AdamConfig{cfg.lr});
    for (int step = 0; step < cfg.steps; ++step) {
        std::map<std::string, Tensor> acc;
        for (int b = 0; b < cfg.batch; ++b) {
            const std::size_t ia = rng.uniform_below(ids.size());
            std::vector<int> second;
            bool supported = true;
            const double mode = rng.uniform();
            if (mode < cfg.pair_copy_fraction + cfg.pair_span_fraction) {
                if (mode < cfg.pair_copy_fraction) {
                    second = ids[ia];
                } else {
                    const int n = static_cast<int>(ids[ia].size());
                    const int w = std::min(n, rng.uniform_int(cfg.span_min, cfg.span_max));
                    const int at = rng.uniform_int(0, n - w);
                    second.assign(ids[ia].begin() + at, ids[ia].begin() + at + w);
                }
                if (rng.uniform() < 0.5) {
                    // flip at least one token; the pair is no longer supported
                    const int len = static_cast<int>(second.size());
                    const int flips = std::max(
                        1, static_cast<int>(std::floor(cfg.copy_noise * len + 0.5)));
                    for (int pos : rng.sample_without_replacement(len, flips)) {
                        int tok = static_cast<int>(words[rng.uniform_below(words.size())]);
                        while (tok == second[static_cast<std::size_t>(pos)]) {
                            tok = static_cast<int>(words[rng.uniform_below(words.size())]);
                        }
                        second[static_cast<std::size_t>(pos)] = tok;
                    }
                    supported = false;
                }
            } else {
                std::size_t ib = rng.uniform_below(ids.size());
                if (ib == ia) {
                    ib = (ib + 1) % ids.size();
                }
                second = ids[ib];
                supported = false;
            }
            detail::MaskedPair mp = detail::make_masked_pair(vocab, ids[ia], second, ec.max_len,
                                                             cfg.mask_fraction, rng);
            Tape tape;
            EncoderOutput out = encode(tape, store, ec, mp.packed);
            Var logits = ops::gather_rows(mlm_logits(tape, store, out.hidden), mp.positions);
            Var loss = ops::cross_entropy(logits, mp.labels);
            if (cfg.coherence_weight > 0.0) {
                Var pair_logits = ops::linear(ops::as_row(out.pooled), tape.param(store, "nsp/w"),
                                              tape.param(store, "nsp/b"));
                Var pair_loss = ops::cross_entropy(pair_logits, {supported ? 1 : 0});
                loss = ops::add(loss, ops::scale(pair_loss, cfg.coherence_weight));
            }
            for (auto& [id, g] : tape.backward(loss)) {
                auto it = acc.find(id);
                if (it == acc.end()) {
                    acc.emplace(id, std::move(g));
                } else {
                    for (std::size_t k = 0; k < g.values.size(); ++k) {
                        it->second.values[k] += g.values[k];
                    }
                }
            }
        }
        for (auto& [id, g] : acc) {
            for (double& v : g.values) {
                v /= cfg.batch;
            }
        }
        adam.step(store, acc);
    }

    if (!heldout.empty()) {
        auto [loss, top1] = mlm_evaluate(store, ec, vocab, heldout, cfg.seed, cfg.mask_fraction);
        stats.final_heldout_loss = loss;
        stats.heldout_top1 = top1;
    }
    return {std::move(store), stats};
}

// --------------------------------------------------------------------------
// Timing
// --------------------------------------------------------------------------

// Median wall-clock seconds per forward batch (features + head, no backward).
// Warmup batches run first and are not measured.
inline double measure_time(const Model& m, const std::vector<Example>& examples, int batch_size,
                           int n_batches, int warmup = 2) {
    if (examples.empty()) {
        throw std::invalid_argument("measure_time: empty split");
    }
    using clock = std::chrono::steady_clock;
    std::vector<double> times;
    std::size_t cursor = 0;
    for (int b = 0; b < warmup + n_batches; ++b) {
        const auto t0 = clock::now();
        for (int i = 0; i < batch_size; ++i) {
            const Example& ex = examples[cursor];
            cursor = (cursor + 1) % examples.size();
            Tape tape;
            (void)tape.value(model_logits(tape, m, ex));
        }
        const auto t1 = clock::now();
        if (b >= warmup) {
            times.push_back(std::chrono::duration<double>(t1 - t0).count());
        }
    }
    std::sort(times.begin(), times.end());
    const std::size_t n = times.size();
    return n % 2 == 1 ? times[n / 2] : 0.5 * (times[n / 2 - 1] + times[n / 2]);
}

}  // namespace ctxlab
