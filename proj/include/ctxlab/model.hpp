#pragma once

#include <map>
#include <cstdio>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "ctxlab/data.hpp"
#include "ctxlab/encoder.hpp"
#include "ctxlab/explanations.hpp"
#include "ctxlab/params.hpp"
#include "ctxlab/perturbed_context.hpp"
#include "ctxlab/rng.hpp"

namespace ctxlab {

enum class Regime { FineTune, FrozenLM };

inline const char* to_string(Regime r) { return r == Regime::FineTune ? "finetune" : "frozen"; }

inline Regime regime_from_string(const std::string& s) {
    if (s == "finetune") {
        return Regime::FineTune;
    }
    if (s == "frozen") {
        return Regime::FrozenLM;
    }
    throw std::invalid_argument("unknown regime: " + s);
}

// What feeds the classifier head.
//   NoExp                 pooled sentence encoding, d
//   ExpGold               ExpBERT features of the annotated set, n*d
//   ExpCorrupted(p)       same, over a randomly corrupted copy of the set
//   ExpCorruptedTunable(p) corrupted copy whose replacement-token embeddings
//                          are separate trainable parameters
//   PC(variant)           perturbed-context feature, d
//   Mixture               ExpBERT features + one perturbed context, (n+1)*d
//   MultiPC(n)            n independent perturbed contexts, n*d
struct ModelKind {
    enum class Tag { NoExp, ExpGold, ExpCorrupted, ExpCorruptedTunable, PC, Mixture, MultiPC };

    Tag tag = Tag::NoExp;
    double corruption_p = 1.0;
    std::optional<PCVariant> variant;  // PC kinds; overrides the spec's variant
    std::optional<int> n_contexts;     // MultiPC

    bool needs_explanations() const {
        return tag == Tag::ExpGold || tag == Tag::ExpCorrupted ||
               tag == Tag::ExpCorruptedTunable || tag == Tag::Mixture;
    }
    bool needs_pc() const {
        return tag == Tag::PC || tag == Tag::Mixture || tag == Tag::MultiPC;
    }
    bool corrupted() const {
        return tag == Tag::ExpCorrupted || tag == Tag::ExpCorruptedTunable;
    }

    std::string str() const {
        switch (tag) {
            case Tag::NoExp: return "NoExp";
            case Tag::ExpGold: return "ExpGold";
            case Tag::ExpCorrupted: return "ExpCorrupted:" + format_p();
            case Tag::ExpCorruptedTunable: return "ExpCorruptedTunable:" + format_p();
            case Tag::PC: return std::string("PC:") + to_string(variant.value_or(PCVariant::Random));
            case Tag::Mixture: return "Mixture";
            case Tag::MultiPC: return "MultiPC:" + std::to_string(n_contexts.value_or(5));
        }
        return "?";
    }

    static ModelKind parse(const std::string& s) {
        ModelKind k;
        const auto colon = s.find(':');
        const std::string head = s.substr(0, colon);
        const std::string arg = colon == std::string::npos ? "" : s.substr(colon + 1);
        if (head == "NoExp") {
            k.tag = Tag::NoExp;
        } else if (head == "ExpGold") {
            k.tag = Tag::ExpGold;
        } else if (head == "ExpCorrupted" || head == "ExpCorruptedTunable") {
            k.tag = head == "ExpCorrupted" ? Tag::ExpCorrupted : Tag::ExpCorruptedTunable;
            k.corruption_p = arg.empty() ? 1.0 : std::stod(arg);
        } else if (head == "PC") {
            k.tag = Tag::PC;
            k.variant = arg.empty() ? PCVariant::Random : pc_variant_from_string(arg);
        } else if (head == "Mixture") {
            k.tag = Tag::Mixture;
            if (!arg.empty()) {
                k.variant = pc_variant_from_string(arg);
            }
        } else if (head == "MultiPC") {
            k.tag = Tag::MultiPC;
            k.n_contexts = arg.empty() ? 5 : std::stoi(arg);
        } else {
            throw std::invalid_argument("unknown model kind: " + s);
        }
        return k;
    }

  private:
    std::string format_p() const {
        char buf[16];
        std::snprintf(buf, sizeof(buf), "%g", corruption_p);
        return buf;
    }
};

struct Model {
    ModelKind kind;
    EncoderConfig enc;
    PCSpec pcspec;
    Vocabulary vocab;
    std::vector<std::string> label_names;
    ParamStore params;

    // Exp* kinds: the set actually encoded (corrupted copy where applicable).
    ExplanationSet explanations;

    // ExpCorruptedTunable: one slot per replacement; same replacement token
    // shares one parameter across slots.
    struct TunableSlot {
        int explanation;
        int raw_pos;  // position in the uninstantiated explanation
        std::string param_id;
    };
    std::vector<TunableSlot> tunable_slots;

    int n_relations = 0;
    int feature_dim = 0;
    bool encoder_pretrained = false;

    int n_explanations() const { return explanations.size(); }
};

inline Model build_model(const ModelKind& kind, EncoderConfig enc_cfg, const Dataset& ds,
                         const ExplanationSet* gold, const PCSpec* pcspec, Rng& rng,
                         int head_hidden = 64, const ParamStore* pretrained = nullptr) {
    if (kind.needs_explanations() && gold == nullptr) {
        throw std::invalid_argument("build_model: kind " + kind.str() +
                                    " requires an explanation set");
    }
    if (kind.needs_pc() && pcspec == nullptr) {
        throw std::invalid_argument("build_model: kind " + kind.str() +
                                    " requires a perturbed-context spec");
    }
    if (kind.tag == ModelKind::Tag::ExpGold && gold->empty()) {
        throw std::invalid_argument("build_model: ExpGold with an empty explanation set");
    }

    Model m;
    m.kind = kind;
    enc_cfg.vocab_size = ds.vocab.size();
    enc_cfg.validate();
    m.enc = enc_cfg;
    m.vocab = ds.vocab;
    m.label_names = ds.label_names;
    m.n_relations = ds.n_relations();

    init_encoder_params(m.params, m.enc, rng);
    // drawn unconditionally so every kind sees the same stream positions for
    // the later parameter draws; ExpCorrupted(0) then reproduces ExpGold runs
    const std::uint64_t corruption_seed = rng.next_u64();
    if (pretrained != nullptr) {
        restore_into(m.params, *pretrained);
        m.encoder_pretrained = true;
    }

    if (kind.needs_explanations()) {
        if (kind.corrupted()) {
            std::vector<std::string> words;
            for (int id : ds.vocab.word_ids()) {
                words.push_back(ds.vocab.token(id));
            }
            auto [corrupted, record] = corrupt_set_recorded(
                *gold, CorruptionSpec{kind.corruption_p, corruption_seed}, words);
            m.explanations = std::move(corrupted);
            if (kind.tag == ModelKind::Tag::ExpCorruptedTunable) {
                for (const Replacement& r : record.replacements) {
                    const std::string pid = "corrupt/row/" + std::to_string(ds.vocab.id(r.token));
                    if (!m.params.contains(pid)) {
                        const Tensor& table = m.params.at("enc/tok_emb").tensor;
                        Tensor row({m.enc.d});
                        const int tid = ds.vocab.id(r.token);
                        for (int c = 0; c < m.enc.d; ++c) {
                            row.values[static_cast<std::size_t>(c)] = table.at(tid, c);
                        }
                        m.params.add(pid, std::move(row), true);
                    }
                    m.tunable_slots.push_back({r.explanation, r.position, pid});
                }
            }
        } else {
            m.explanations = *gold;
        }
    }

    if (kind.needs_pc()) {
        m.pcspec = *pcspec;
        if (kind.variant.has_value()) {
            m.pcspec.variant = *kind.variant;
        }
        if (kind.n_contexts.has_value()) {
            m.pcspec.n_contexts = *kind.n_contexts;
        }
        if (kind.tag != ModelKind::Tag::MultiPC) {
            m.pcspec.n_contexts = 1;
        }
        m.pcspec.validate(m.enc.d);
        const Tensor& table = m.params.at("enc/tok_emb").tensor;
        for (int c = 0; c < m.pcspec.n_contexts; ++c) {
            init_pc(m.params, m.pcspec, table, m.enc.d, rng, "pc/" + std::to_string(c));
        }
    }

    switch (kind.tag) {
        case ModelKind::Tag::NoExp:
        case ModelKind::Tag::PC:
            m.feature_dim = m.enc.d;
            break;
        case ModelKind::Tag::ExpGold:
        case ModelKind::Tag::ExpCorrupted:
        case ModelKind::Tag::ExpCorruptedTunable:
            m.feature_dim = m.n_explanations() * m.enc.d;
            break;
        case ModelKind::Tag::Mixture:
            m.feature_dim = (m.n_explanations() + 1) * m.enc.d;
            break;
        case ModelKind::Tag::MultiPC:
            m.feature_dim = m.pcspec.n_contexts * m.enc.d;
            break;
    }

    m.params.add_normal("head/w1", {m.feature_dim, head_hidden}, rng, 0.02);
    m.params.add("head/b1", Tensor({head_hidden}));
    m.params.add_normal("head/w2", {head_hidden, m.n_relations}, rng, 0.02);
    m.params.add("head/b2", Tensor({m.n_relations}));
    return m;
}

// Feature vector of one example on the given tape.
inline Var model_features(Tape& tape, const Model& m, const Example& ex) {
    const std::vector<std::string>& s = ex.tokens;
    const std::vector<std::string> o1 = ex.entity1();
    const std::vector<std::string> o2 = ex.entity2();
    switch (m.kind.tag) {
        case ModelKind::Tag::NoExp: {
            PackedInput packed = pack_single(m.vocab, m.vocab.to_ids(s), m.enc.max_len);
            return encode(tape, m.params, m.enc, packed).pooled;
        }
        case ModelKind::Tag::ExpGold:
        case ModelKind::Tag::ExpCorrupted:
            return expbert_features(tape, m.params, m.enc, m.vocab, s, o1, o2, m.explanations);
        case ModelKind::Tag::ExpCorruptedTunable: {
            PairOverrideFn fn = [&m, &tape](int ei, const PackedInput&,
                                            const std::vector<int>& raw_to_ctx) {
                std::vector<Override> ov;
                for (const Model::TunableSlot& slot : m.tunable_slots) {
                    if (slot.explanation != ei) {
                        continue;
                    }
                    const int pos = raw_to_ctx.at(static_cast<std::size_t>(slot.raw_pos));
                    ov.push_back(Override{pos, tape.param(m.params, slot.param_id)});
                }
                return ov;
            };
            return expbert_features(tape, m.params, m.enc, m.vocab, s, o1, o2, m.explanations, fn);
        }
        case ModelKind::Tag::PC:
            return pc_features(tape, m.params, m.enc, m.vocab, m.pcspec, s, o1, o2);
        case ModelKind::Tag::Mixture:
            return mixture_features(tape, m.params, m.enc, m.vocab, m.pcspec, s, o1, o2,
                                    m.explanations);
        case ModelKind::Tag::MultiPC:
            return multi_pc_features(tape, m.params, m.enc, m.vocab, m.pcspec, s, o1, o2);
    }
    throw std::logic_error("model_features: unreachable");
}

// Classifier head over a feature batch [B, F] -> logits [B, n_relations].
inline Var head_logits(Tape& tape, const Model& m, Var features_matrix) {
    Var h = ops::gelu(ops::linear(features_matrix, tape.param(m.params, "head/w1"),
                                  tape.param(m.params, "head/b1")));
    return ops::linear(h, tape.param(m.params, "head/w2"), tape.param(m.params, "head/b2"));
}

// Logits of one example, [1, n_relations].
inline Var model_logits(Tape& tape, const Model& m, const Example& ex) {
    return head_logits(tape, m, ops::as_row(model_features(tape, m, ex)));
}

// Which parameters the optimizer may touch.
//   FineTune: everything structurally trainable (FixedRandom stays put).
//   FrozenLM: the head, plus perturbed-context parameters for PC kinds, plus
//             the replacement-token embeddings for ExpCorruptedTunable.
inline std::set<std::string> trainable_set(const Model& m, Regime regime) {
    std::set<std::string> out;
    for (const auto& [id, p] : m.params) {
        if (!p.trainable) {
            continue;
        }
        const bool head = id.rfind("head/", 0) == 0;
        const bool pc = id.rfind("pc/", 0) == 0;
        const bool corrupt = id.rfind("corrupt/", 0) == 0;
        if (regime == Regime::FineTune) {
            out.insert(id);
        } else if (head || (pc && m.kind.needs_pc()) ||
                   (corrupt && m.kind.tag == ModelKind::Tag::ExpCorruptedTunable)) {
            out.insert(id);
        }
    }
    return out;
}

}  // namespace ctxlab
