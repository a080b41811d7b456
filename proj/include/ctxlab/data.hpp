#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "ctxlab/explanations.hpp"
#include "ctxlab/rng.hpp"
#include "ctxlab/vocab.hpp"

namespace ctxlab {

struct Span {
    int begin = 0;
    int end = 0;  // exclusive
    bool operator==(const Span&) const = default;
};

// One relation-extraction sample: sentence tokens, the two entity spans and
// the relation label.
struct Example {
    std::vector<std::string> tokens;
    Span span1;
    Span span2;
    int label = 0;

    std::vector<std::string> entity1() const {
        return {tokens.begin() + span1.begin, tokens.begin() + span1.end};
    }
    std::vector<std::string> entity2() const {
        return {tokens.begin() + span2.begin, tokens.begin() + span2.end};
    }

    void validate(int n_relations) const {
        const int n = static_cast<int>(tokens.size());
        for (const Span& s : {span1, span2}) {
            if (s.begin < 0 || s.end > n || s.begin >= s.end) {
                throw std::invalid_argument("example: span out of range");
            }
        }
        if (std::max(span1.begin, span2.begin) < std::min(span1.end, span2.end)) {
            throw std::invalid_argument("example: overlapping entity spans");
        }
        if (label < 0 || label >= n_relations) {
            throw std::invalid_argument("example: label out of range");
        }
    }
};

// Synthetic benchmark description. Relation 0 is the nil relation and owns
// no triggers; every other relation gets `triggers_per_relation` dedicated
// trigger words. `len_min`/`len_max` bound the non-entity token count, so
// sentences carry len+2 tokens in total.
struct TaskSpec {
    int n_relations = 8;
    int vocab_words = 200;
    int triggers_per_relation = 1;
    int len_min = 8;
    int len_max = 16;
    int n_train = 2000;
    int n_val = 500;
    int n_test = 500;
    // fraction of sentences that repeat a two-token filler window at a second
    // position; label-independent, gives the corpus a co-occurrence pattern
    // that masked-LM pretraining can pick up
    double duplicate_fraction = 0.5;
    std::uint64_t seed = 1;

    void validate() const {
        if (n_relations < 2) {
            throw std::invalid_argument("task: need at least nil plus one relation");
        }
        if (len_min < 1 || len_max < len_min) {
            throw std::invalid_argument("task: bad sentence length range");
        }
        if (triggers_per_relation < 1) {
            throw std::invalid_argument("task: triggers_per_relation must be >= 1");
        }
        const int n_triggers = (n_relations - 1) * triggers_per_relation;
        if (n_triggers >= vocab_words) {
            throw std::invalid_argument("task: trigger sets exhaust the vocabulary");
        }
        if (n_train < 1 || n_val < 1 || n_test < 1) {
            throw std::invalid_argument("task: split sizes must be positive");
        }
    }

    nlohmann::json to_json() const {
        return {{"n_relations", n_relations},
                {"vocab_words", vocab_words},
                {"triggers_per_relation", triggers_per_relation},
                {"len_min", len_min},
                {"len_max", len_max},
                {"n_train", n_train},
                {"n_val", n_val},
                {"n_test", n_test},
                {"duplicate_fraction", duplicate_fraction},
                {"seed", seed}};
    }

    static TaskSpec from_json(const nlohmann::json& j) {
        TaskSpec s;
        s.n_relations = j.value("n_relations", s.n_relations);
        s.vocab_words = j.value("vocab_words", s.vocab_words);
        s.triggers_per_relation = j.value("triggers_per_relation", s.triggers_per_relation);
        s.len_min = j.value("len_min", s.len_min);
        s.len_max = j.value("len_max", s.len_max);
        s.n_train = j.value("n_train", s.n_train);
        s.n_val = j.value("n_val", s.n_val);
        s.n_test = j.value("n_test", s.n_test);
        s.duplicate_fraction = j.value("duplicate_fraction", s.duplicate_fraction);
        s.seed = j.value("seed", s.seed);
        return s;
    }
};

struct Dataset {
    std::vector<Example> train;
    std::vector<Example> val;
    std::vector<Example> test;
    Vocabulary vocab;
    std::vector<std::string> label_names;

    int n_relations() const { return static_cast<int>(label_names.size()); }

    const std::vector<Example>& split(const std::string& name) const {
        if (name == "train") {
            return train;
        }
        if (name == "val") {
            return val;
        }
        if (name == "test") {
            return test;
        }
        throw std::invalid_argument("dataset: unknown split " + name);
    }
};

namespace detail {

inline std::string word_name(int i) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "w%03d", i);
    return buf;
}

struct TaskLayout {
    std::vector<std::string> words;                    // full word list
    std::vector<std::vector<std::string>> triggers;    // by relation, empty for nil
    std::vector<std::string> fillers;                  // words minus triggers
};

inline TaskLayout task_layout(const TaskSpec& spec) {
    spec.validate();
    TaskLayout lay;
    for (int i = 0; i < spec.vocab_words; ++i) {
        lay.words.push_back(word_name(i));
    }
    lay.triggers.resize(static_cast<std::size_t>(spec.n_relations));
    int next = 0;
    for (int r = 1; r < spec.n_relations; ++r) {
        for (int t = 0; t < spec.triggers_per_relation; ++t) {
            lay.triggers[static_cast<std::size_t>(r)].push_back(word_name(next++));
        }
    }
    lay.fillers.assign(lay.words.begin() + next, lay.words.end());
    return lay;
}

// One sentence with entities at i < j and, for a positive relation, one
// trigger strictly between them. Returns the example; all other positions
// are filler words.
inline Example gen_sentence(const TaskSpec& spec, const TaskLayout& lay, int label, Rng& rng) {
    const int body = rng.uniform_int(spec.len_min, spec.len_max);
    const int total = body + 2;
    const int i = rng.uniform_int(0, total - 3);
    const int j = rng.uniform_int(i + 2, total - 1);
    Example ex;
    ex.tokens.resize(static_cast<std::size_t>(total));
    ex.span1 = {i, i + 1};
    ex.span2 = {j, j + 1};
    ex.label = label;
    for (int p = 0; p < total; ++p) {
        ex.tokens[static_cast<std::size_t>(p)] =
            lay.fillers[rng.uniform_below(lay.fillers.size())];
    }
    int tpos = -1;
    if (label != 0) {
        const auto& trigs = lay.triggers[static_cast<std::size_t>(label)];
        tpos = rng.uniform_int(i + 1, j - 1);
        ex.tokens[static_cast<std::size_t>(tpos)] = trigs[rng.uniform_below(trigs.size())];
    }
    if (rng.uniform() < spec.duplicate_fraction) {
        // adjacent position pairs that avoid the entities and the trigger
        std::vector<int> starts;
        for (int p = 0; p + 1 < total; ++p) {
            const bool clash = p == i || p == j || p == tpos || p + 1 == i || p + 1 == j ||
                               p + 1 == tpos;
            if (!clash) {
                starts.push_back(p);
            }
        }
        if (starts.size() >= 2) {
            const int src = starts[rng.uniform_below(starts.size())];
            int dst = starts[rng.uniform_below(starts.size())];
            int guard = 0;
            while (std::abs(dst - src) < 2 && ++guard < 16) {
                dst = starts[rng.uniform_below(starts.size())];
            }
            if (std::abs(dst - src) >= 2) {
                ex.tokens[static_cast<std::size_t>(dst)] =
                    ex.tokens[static_cast<std::size_t>(src)];
                ex.tokens[static_cast<std::size_t>(dst + 1)] =
                    ex.tokens[static_cast<std::size_t>(src + 1)];
            }
        }
    }
    return ex;
}

inline std::string sentence_key(const Example& ex) {
    std::string k;
    for (const auto& t : ex.tokens) {
        k += t;
        k += ' ';
    }
    return k;
}

}  // namespace detail

// Synthetic benchmark plus its gold explanations. Positives embed exactly
// one trigger of their relation between the entities; nil sentences carry no
// trigger at all; gold explanations are "{o1} <trigger> {o2}", one per
// trigger, ordered by relation. Deterministic for a given spec.
inline std::pair<Dataset, ExplanationSet> generate_task(const TaskSpec& spec) {
    const detail::TaskLayout lay = detail::task_layout(spec);
    Dataset ds;
    ds.vocab = Vocabulary(lay.words);
    ds.label_names.push_back("nil");
    for (int r = 1; r < spec.n_relations; ++r) {
        ds.label_names.push_back("rel" + std::to_string(r));
    }

    Rng rng(spec.seed);
    std::set<std::string> seen;
    auto fill_split = [&](std::vector<Example>& out, int count) {
        out.reserve(static_cast<std::size_t>(count));
        while (static_cast<int>(out.size()) < count) {
            const int label = rng.uniform_int(0, spec.n_relations - 1);
            Example ex = detail::gen_sentence(spec, lay, label, rng);
            if (!seen.insert(detail::sentence_key(ex)).second) {
                continue;  // keep splits disjoint
            }
            out.push_back(std::move(ex));
        }
    };
    fill_split(ds.train, spec.n_train);
    fill_split(ds.val, spec.n_val);
    fill_split(ds.test, spec.n_test);

    ExplanationSet gold;
    for (int r = 1; r < spec.n_relations; ++r) {
        for (const std::string& t : lay.triggers[static_cast<std::size_t>(r)]) {
            gold.explanations.push_back(Explanation{{kO1, t, kO2}});
        }
    }
    return {std::move(ds), std::move(gold)};
}

// Unlabeled sentences from the same distribution, for LM pretraining.
inline std::vector<std::vector<std::string>> generate_corpus(const TaskSpec& spec, int n_sentences,
                                                             std::uint64_t seed) {
    const detail::TaskLayout lay = detail::task_layout(spec);
    Rng rng(seed);
    std::vector<std::vector<std::string>> out;
    out.reserve(static_cast<std::size_t>(n_sentences));
    for (int i = 0; i < n_sentences; ++i) {
        const int label = rng.uniform_int(0, spec.n_relations - 1);
        out.push_back(detail::gen_sentence(spec, lay, label, rng).tokens);
    }
    return out;
}

// --------------------------------------------------------------------------
// JSONL: {"tokens":[...],"e1":[s,e],"e2":[s,e],"label":"..."} per line,
// spans end-exclusive. Serialization is byte-stable under reload.
// --------------------------------------------------------------------------

inline void save_jsonl(const std::vector<Example>& examples,
                       const std::vector<std::string>& label_names, const std::string& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) {
        throw std::runtime_error("jsonl: cannot open for write " + path);
    }
    for (const Example& ex : examples) {
        nlohmann::json j;
        j["tokens"] = ex.tokens;
        j["e1"] = {ex.span1.begin, ex.span1.end};
        j["e2"] = {ex.span2.begin, ex.span2.end};
        j["label"] = label_names.at(static_cast<std::size_t>(ex.label));
        os << j.dump() << '\n';
    }
}

struct JsonlSplit {
    std::vector<Example> examples;          // labels are indices into label_names
    std::vector<std::string> label_names;   // first-seen order
};

inline JsonlSplit load_jsonl(const std::string& path) {
    std::ifstream is(path);
    if (!is) {
        throw std::runtime_error("jsonl: cannot open " + path);
    }
    JsonlSplit out;
    std::map<std::string, int> label_idx;
    std::string line;
    int line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        const std::string where = path + " line " + std::to_string(line_no);
        if (line.empty()) {
            throw std::runtime_error("jsonl: " + where + ": empty line");
        }
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw std::runtime_error("jsonl: " + where + ": malformed JSON: " + e.what());
        }
        for (const char* key : {"tokens", "e1", "e2", "label"}) {
            if (!j.contains(key)) {
                throw std::runtime_error("jsonl: " + where + ": missing \"" + key + "\"");
            }
        }
        Example ex;
        try {
            ex.tokens = j["tokens"].get<std::vector<std::string>>();
            ex.span1 = {j["e1"].at(0).get<int>(), j["e1"].at(1).get<int>()};
            ex.span2 = {j["e2"].at(0).get<int>(), j["e2"].at(1).get<int>()};
        } catch (const nlohmann::json::exception& e) {
            throw std::runtime_error("jsonl: " + where + ": bad field type: " + e.what());
        }
        const std::string label = j["label"].get<std::string>();
        auto [it, inserted] = label_idx.emplace(label, static_cast<int>(out.label_names.size()));
        if (inserted) {
            out.label_names.push_back(label);
        }
        ex.label = it->second;
        try {
            ex.validate(static_cast<int>(out.label_names.size()));
        } catch (const std::invalid_argument& e) {
            throw std::runtime_error("jsonl: " + where + ": " + e.what());
        }
        out.examples.push_back(std::move(ex));
    }
    return out;
}

// Assembles a Dataset from three JSONL splits. Label ids: "nil" first when
// present, then the rest sorted; the vocabulary is the given word list, or
// the sorted union of observed tokens when none is supplied.
inline Dataset load_dataset_jsonl(const std::string& train_path, const std::string& val_path,
                                  const std::string& test_path,
                                  const std::vector<std::string>& vocab_words = {}) {
    JsonlSplit tr = load_jsonl(train_path);
    JsonlSplit va = load_jsonl(val_path);
    JsonlSplit te = load_jsonl(test_path);

    std::set<std::string> labels;
    for (const auto* s : {&tr, &va, &te}) {
        labels.insert(s->label_names.begin(), s->label_names.end());
    }
    std::vector<std::string> names;
    if (labels.count("nil")) {
        names.push_back("nil");
        labels.erase("nil");
    }
    names.insert(names.end(), labels.begin(), labels.end());

    std::map<std::string, int> idx;
    for (std::size_t i = 0; i < names.size(); ++i) {
        idx[names[i]] = static_cast<int>(i);
    }

    Dataset ds;
    ds.label_names = names;
    auto remap = [&](const JsonlSplit& s, std::vector<Example>& out) {
        out = s.examples;
        for (std::size_t i = 0; i < out.size(); ++i) {
            out[i].label = idx.at(s.label_names.at(static_cast<std::size_t>(out[i].label)));
        }
    };
    remap(tr, ds.train);
    remap(va, ds.val);
    remap(te, ds.test);

    if (!vocab_words.empty()) {
        ds.vocab = Vocabulary(vocab_words);
    } else {
        std::set<std::string> toks;
        for (const auto* split : {&ds.train, &ds.val, &ds.test}) {
            for (const Example& ex : *split) {
                toks.insert(ex.tokens.begin(), ex.tokens.end());
            }
        }
        ds.vocab = Vocabulary({toks.begin(), toks.end()});
    }
    for (const auto* split : {&ds.train, &ds.val, &ds.test}) {
        for (const Example& ex : *split) {
            for (const auto& t : ex.tokens) {
                if (!ds.vocab.has(t)) {
                    throw std::runtime_error("jsonl: token not in vocabulary: " + t);
                }
            }
        }
    }
    return ds;
}

// Label-stratified subsample of the train split; val/test untouched. Keeps
// round(fraction * n_c) examples per class c, in their original order.
inline Dataset subsample(const Dataset& ds, double fraction, std::uint64_t seed) {
    if (!(fraction > 0.0 && fraction <= 1.0)) {
        throw std::invalid_argument("subsample: fraction must lie in (0,1]");
    }
    std::map<int, std::vector<int>> by_class;
    for (std::size_t i = 0; i < ds.train.size(); ++i) {
        by_class[ds.train[i].label].push_back(static_cast<int>(i));
    }
    Rng rng(seed);
    std::vector<int> keep;
    for (auto& [label, idx] : by_class) {
        const int n = static_cast<int>(idx.size());
        const int k = static_cast<int>(std::floor(fraction * n + 0.5));
        if (k == 0) {
            throw std::invalid_argument("subsample: fraction " + std::to_string(fraction) +
                                        " empties class " + std::to_string(label));
        }
        for (int pick : rng.sample_without_replacement(n, k)) {
            keep.push_back(idx[static_cast<std::size_t>(pick)]);
        }
    }
    std::sort(keep.begin(), keep.end());
    Dataset out = ds;
    out.train.clear();
    out.train.reserve(keep.size());
    for (int i : keep) {
        out.train.push_back(ds.train[static_cast<std::size_t>(i)]);
    }
    return out;
}

}  // namespace ctxlab
