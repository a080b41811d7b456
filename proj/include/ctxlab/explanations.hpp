#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "ctxlab/encoder.hpp"
#include "ctxlab/rng.hpp"
#include "ctxlab/vocab.hpp"

namespace ctxlab {

constexpr const char* kO1 = "{o1}";
constexpr const char* kO2 = "{o2}";

inline bool is_placeholder(const std::string& tok) { return tok == kO1 || tok == kO2; }

// Token sequence over the vocabulary plus the two entity placeholders.
struct Explanation {
    std::vector<std::string> tokens;

    void validate() const {
        if (tokens.empty()) {
            throw std::invalid_argument("explanation: empty token sequence");
        }
        int o1 = 0, o2 = 0;
        for (const auto& t : tokens) {
            o1 += t == kO1;
            o2 += t == kO2;
        }
        if (o1 > 1 || o2 > 1) {
            throw std::invalid_argument("explanation: duplicate entity placeholder");
        }
    }

    int non_placeholder_count() const {
        int k = 0;
        for (const auto& t : tokens) {
            k += !is_placeholder(t);
        }
        return k;
    }
};

// Ordered list; feature concatenation follows this order.
struct ExplanationSet {
    std::vector<Explanation> explanations;

    int size() const { return static_cast<int>(explanations.size()); }
    bool empty() const { return explanations.empty(); }
};

struct CorruptionSpec {
    double fraction = 0.0;  // p in [0, 1]
    std::uint64_t seed = 0;

    void validate() const {
        if (!(fraction >= 0.0 && fraction <= 1.0)) {
            throw std::invalid_argument("corruption: fraction must lie in [0,1]");
        }
    }
};

// Placeholders replaced in place by the entity tokens; everything else kept.
// Missing placeholders just yield an unchanged copy.
inline std::vector<std::string> substitute(const Explanation& e,
                                           const std::vector<std::string>& o1_tokens,
                                           const std::vector<std::string>& o2_tokens) {
    if (o1_tokens.empty() || o2_tokens.empty()) {
        throw std::invalid_argument("substitute: entity token sequences must be nonempty");
    }
    std::vector<std::string> out;
    out.reserve(e.tokens.size() + o1_tokens.size() + o2_tokens.size());
    for (const auto& t : e.tokens) {
        if (t == kO1) {
            out.insert(out.end(), o1_tokens.begin(), o1_tokens.end());
        } else if (t == kO2) {
            out.insert(out.end(), o2_tokens.begin(), o2_tokens.end());
        } else {
            out.push_back(t);
        }
    }
    return out;
}

// substitute() plus, for every non-placeholder input position, its index in
// the substituted sequence. Needed to relocate corrupted positions after
// entity splicing.
inline std::pair<std::vector<std::string>, std::vector<int>> substitute_mapped(
    const Explanation& e, const std::vector<std::string>& o1_tokens,
    const std::vector<std::string>& o2_tokens) {
    if (o1_tokens.empty() || o2_tokens.empty()) {
        throw std::invalid_argument("substitute: entity token sequences must be nonempty");
    }
    std::vector<std::string> out;
    std::vector<int> pos_map(e.tokens.size(), -1);
    for (std::size_t i = 0; i < e.tokens.size(); ++i) {
        const auto& t = e.tokens[i];
        if (t == kO1) {
            out.insert(out.end(), o1_tokens.begin(), o1_tokens.end());
        } else if (t == kO2) {
            out.insert(out.end(), o2_tokens.begin(), o2_tokens.end());
        } else {
            pos_map[i] = static_cast<int>(out.size());
            out.push_back(t);
        }
    }
    return {std::move(out), std::move(pos_map)};
}

// One replaced token: which explanation, which position in it, what it became.
struct Replacement {
    int explanation;
    int position;
    std::string token;
};

struct CorruptionRecord {
    std::vector<Replacement> replacements;
};

// Per explanation, exactly round(p * k) of the k non-placeholder positions,
// chosen uniformly without replacement, are overwritten with uniform draws
// from `replacement_vocab`. Placeholders are never touched. Bitwise
// reproducible for a given seed.
inline std::pair<ExplanationSet, CorruptionRecord> corrupt_set_recorded(
    const ExplanationSet& set, const CorruptionSpec& spec,
    const std::vector<std::string>& replacement_vocab) {
    spec.validate();
    for (const auto& t : replacement_vocab) {
        if (is_placeholder(t)) {
            throw std::invalid_argument("corrupt_set: placeholder in replacement vocabulary");
        }
    }
    ExplanationSet out = set;
    CorruptionRecord rec;
    Rng rng(spec.seed);
    for (int ei = 0; ei < out.size(); ++ei) {
        Explanation& e = out.explanations[static_cast<std::size_t>(ei)];
        std::vector<int> candidates;
        for (std::size_t i = 0; i < e.tokens.size(); ++i) {
            if (!is_placeholder(e.tokens[i])) {
                candidates.push_back(static_cast<int>(i));
            }
        }
        const int k = static_cast<int>(candidates.size());
        const int count = static_cast<int>(std::floor(spec.fraction * k + 0.5));
        if (count == 0) {
            continue;
        }
        if (replacement_vocab.empty()) {
            throw std::invalid_argument("corrupt_set: empty replacement vocabulary");
        }
        const std::vector<int> picks = rng.sample_without_replacement(k, count);
        for (int pick : picks) {
            const int pos = candidates[static_cast<std::size_t>(pick)];
            const std::string& tok =
                replacement_vocab[rng.uniform_below(replacement_vocab.size())];
            e.tokens[static_cast<std::size_t>(pos)] = tok;
            rec.replacements.push_back({ei, pos, tok});
        }
    }
    return {std::move(out), std::move(rec)};
}

inline ExplanationSet corrupt_set(const ExplanationSet& set, const CorruptionSpec& spec,
                                  const std::vector<std::string>& replacement_vocab) {
    return corrupt_set_recorded(set, spec, replacement_vocab).first;
}

// --------------------------------------------------------------------------
// ExpBERT features: encode the sentence paired with every explanation and
// concatenate the pooled outputs in set order -> n*d vector.
// --------------------------------------------------------------------------

// Optional per-pair override installer, given the explanation index and the
// mapping from raw explanation positions to packed positions.
using PairOverrideFn =
    std::function<std::vector<Override>(int expl_index, const PackedInput& packed,
                                        const std::vector<int>& raw_to_ctx_pos)>;

inline Var expbert_features(Tape& tape, const ParamStore& store, const EncoderConfig& cfg,
                            const Vocabulary& vocab, const std::vector<std::string>& s_tokens,
                            const std::vector<std::string>& o1_tokens,
                            const std::vector<std::string>& o2_tokens, const ExplanationSet& set,
                            const PairOverrideFn& override_fn = nullptr) {
    if (set.empty()) {
        throw std::invalid_argument("expbert_features: empty explanation set");
    }
    const std::vector<int> s_ids = vocab.to_ids(s_tokens);
    std::vector<Var> pooled;
    pooled.reserve(static_cast<std::size_t>(set.size()));
    for (int i = 0; i < set.size(); ++i) {
        const Explanation& e = set.explanations[static_cast<std::size_t>(i)];
        auto [ctx_tokens, pos_map] = substitute_mapped(e, o1_tokens, o2_tokens);
        PackedInput packed = pack_pair(vocab, s_ids, vocab.to_ids(ctx_tokens), cfg.max_len);
        std::vector<int> raw_to_ctx(pos_map.size(), -1);
        for (std::size_t r = 0; r < pos_map.size(); ++r) {
            if (pos_map[r] >= 0) {
                raw_to_ctx[r] = packed.ctx_begin + pos_map[r];
            }
        }
        std::vector<Override> ov;
        if (override_fn) {
            ov = override_fn(i, packed, raw_to_ctx);
        }
        pooled.push_back(encode(tape, store, cfg, packed, ov).pooled);
    }
    return set.size() == 1 ? pooled[0] : ops::concat(pooled);
}

// --------------------------------------------------------------------------
// Explanation file: UTF-8, one explanation per line, whitespace tokens,
// placeholders spelled {o1} and {o2}.
// --------------------------------------------------------------------------

inline ExplanationSet load_explanations(const std::string& path) {
    std::ifstream is(path);
    if (!is) {
        throw std::runtime_error("explanations: cannot open " + path);
    }
    ExplanationSet set;
    std::string line;
    int line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        std::istringstream ss(line);
        Explanation e;
        std::string tok;
        while (ss >> tok) {
            e.tokens.push_back(tok);
        }
        if (e.tokens.empty()) {
            throw std::runtime_error("explanations: " + path + " line " +
                                     std::to_string(line_no) + ": empty explanation");
        }
        e.validate();
        set.explanations.push_back(std::move(e));
    }
    return set;
}

inline void save_explanations(const ExplanationSet& set, const std::string& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) {
        throw std::runtime_error("explanations: cannot open for write " + path);
    }
    for (const Explanation& e : set.explanations) {
        for (std::size_t i = 0; i < e.tokens.size(); ++i) {
            os << e.tokens[i];
            if (i + 1 < e.tokens.size()) {
                os << ' ';
            }
        }
        os << '\n';
    }
}

}  // namespace ctxlab
