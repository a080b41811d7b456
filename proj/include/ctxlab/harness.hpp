#pragma once

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <thread>
#include <tuple>
#include <utility>
#include <vector>

#include "json.hpp"

#include "ctxlab/data.hpp"
#include "ctxlab/model.hpp"
#include "ctxlab/svg_plot.hpp"
#include "ctxlab/training.hpp"

namespace ctxlab {

// --------------------------------------------------------------------------
// Experiment configuration (one JSON file drives every subcommand).
// --------------------------------------------------------------------------

struct ExperimentConfig {
    // task source: generated benchmark, or user JSONL under jsonl_dir
    // (train.jsonl, val.jsonl, test.jsonl, optional vocab.json and
    // explanations.txt)
    bool generate = true;
    TaskSpec task;
    std::string jsonl_dir;

    EncoderConfig encoder;
    PCSpec pcspec;
    TrainConfig train;
    std::vector<std::string> regimes;  // defaults to the train regime
    std::vector<std::string> kinds = {"NoExp", "ExpGold", "PC:Random"};
    std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};

    std::string pretrained_ckpt;  // reused when set; otherwise pretrained inline
    MlmConfig mlm;
    int corpus_sentences = 3000;
    int heldout_sentences = 200;

    std::vector<double> corruption_ps = {0.0, 0.25, 0.5, 0.75, 1.0};
    std::vector<double> fractions = {0.05, 0.1, 0.25, 0.5, 1.0};
    std::vector<int> context_sizes = {2, 4, 8, 16, 32};
    std::vector<int> bench_ns = {1, 4, 16};
    int bench_batch_size = 16;
    int bench_batches = 15;

    std::string out_dir = "runs";
    int jobs = 1;

    static ExperimentConfig from_json(const nlohmann::json& j) {
        ExperimentConfig c;
        if (j.contains("task")) {
            const auto& t = j["task"];
            if (t.contains("jsonl_dir")) {
                c.generate = false;
                c.jsonl_dir = t["jsonl_dir"].get<std::string>();
            } else {
                c.task = TaskSpec::from_json(t);
            }
        }
        if (j.contains("encoder")) {
            c.encoder = EncoderConfig::from_json(j["encoder"]);
        }
        if (j.contains("pcspec")) {
            const auto& p = j["pcspec"];
            if (p.contains("variant")) {
                c.pcspec.variant = pc_variant_from_string(p["variant"].get<std::string>());
            }
            c.pcspec.m = p.value("m", c.pcspec.m);
            c.pcspec.l = p.value("l", c.pcspec.l);
            c.pcspec.n_contexts = p.value("n_contexts", c.pcspec.n_contexts);
        }
        if (j.contains("train")) {
            c.train = TrainConfig::from_json(j["train"]);
        }
        if (j.contains("regimes")) {
            c.regimes = j["regimes"].get<std::vector<std::string>>();
        }
        if (j.contains("kinds")) {
            c.kinds = j["kinds"].get<std::vector<std::string>>();
        }
        if (j.contains("seeds")) {
            c.seeds = j["seeds"].get<std::vector<std::uint64_t>>();
        }
        c.pretrained_ckpt = j.value("pretrained", c.pretrained_ckpt);
        if (j.contains("mlm")) {
            const auto& m = j["mlm"];
            c.mlm.steps = m.value("steps", c.mlm.steps);
            c.mlm.batch = m.value("batch", c.mlm.batch);
            c.mlm.lr = m.value("lr", c.mlm.lr);
            c.mlm.seed = m.value("seed", c.mlm.seed);
            c.mlm.mask_fraction = m.value("mask_fraction", c.mlm.mask_fraction);
            c.mlm.pair_copy_fraction = m.value("pair_copy_fraction", c.mlm.pair_copy_fraction);
            c.mlm.pair_span_fraction = m.value("pair_span_fraction", c.mlm.pair_span_fraction);
            c.mlm.copy_noise = m.value("copy_noise", c.mlm.copy_noise);
            c.mlm.span_min = m.value("span_min", c.mlm.span_min);
            c.mlm.span_max = m.value("span_max", c.mlm.span_max);
            c.mlm.coherence_weight = m.value("coherence_weight", c.mlm.coherence_weight);
        }
        c.corpus_sentences = j.value("corpus_sentences", c.corpus_sentences);
        c.heldout_sentences = j.value("heldout_sentences", c.heldout_sentences);
        if (j.contains("corruption_ps")) {
            c.corruption_ps = j["corruption_ps"].get<std::vector<double>>();
        }
        if (j.contains("fractions")) {
            c.fractions = j["fractions"].get<std::vector<double>>();
        }
        if (j.contains("context_sizes")) {
            c.context_sizes = j["context_sizes"].get<std::vector<int>>();
        }
        if (j.contains("bench_ns")) {
            c.bench_ns = j["bench_ns"].get<std::vector<int>>();
        }
        c.bench_batch_size = j.value("bench_batch_size", c.bench_batch_size);
        c.bench_batches = j.value("bench_batches", c.bench_batches);
        c.out_dir = j.value("out", c.out_dir);
        c.jobs = j.value("jobs", c.jobs);
        if (c.kinds.empty() || c.seeds.empty()) {
            throw std::invalid_argument("config: kinds and seeds must be nonempty");
        }
        std::set<std::uint64_t> distinct(c.seeds.begin(), c.seeds.end());
        if (distinct.size() != c.seeds.size()) {
            throw std::invalid_argument("config: seeds must be distinct");
        }
        if (c.regimes.empty()) {
            c.regimes = {to_string(c.train.regime)};
        }
        return c;
    }

    static ExperimentConfig from_file(const std::string& path) {
        std::ifstream is(path);
        if (!is) {
            throw std::runtime_error("config: cannot open " + path);
        }
        nlohmann::json j;
        is >> j;
        return from_json(j);
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        if (generate) {
            j["task"] = task.to_json();
        } else {
            j["task"] = {{"jsonl_dir", jsonl_dir}};
        }
        j["encoder"] = encoder.to_json();
        j["pcspec"] = {{"variant", to_string(pcspec.variant)},
                       {"m", pcspec.m},
                       {"l", pcspec.l},
                       {"n_contexts", pcspec.n_contexts}};
        j["train"] = train.to_json();
        j["regimes"] = regimes;
        j["kinds"] = kinds;
        j["seeds"] = seeds;
        j["pretrained"] = pretrained_ckpt;
        j["mlm"] = {{"steps", mlm.steps},
                    {"batch", mlm.batch},
                    {"lr", mlm.lr},
                    {"seed", mlm.seed},
                    {"mask_fraction", mlm.mask_fraction},
                    {"pair_copy_fraction", mlm.pair_copy_fraction},
                    {"pair_span_fraction", mlm.pair_span_fraction},
                    {"copy_noise", mlm.copy_noise},
                    {"span_min", mlm.span_min},
                    {"span_max", mlm.span_max},
                    {"coherence_weight", mlm.coherence_weight}};
        j["corpus_sentences"] = corpus_sentences;
        j["heldout_sentences"] = heldout_sentences;
        j["corruption_ps"] = corruption_ps;
        j["fractions"] = fractions;
        j["context_sizes"] = context_sizes;
        j["bench_ns"] = bench_ns;
        j["bench_batch_size"] = bench_batch_size;
        j["bench_batches"] = bench_batches;
        j["out"] = out_dir;
        return j;  // jobs excluded: parallelism must not change identity
    }

    std::string config_hash() const {
        char buf[17];
        std::snprintf(buf, sizeof(buf), "%016llx",
                      static_cast<unsigned long long>(hash_str(to_json().dump())));
        return buf;
    }
};

// One experiment cell: a (kind, regime, sweep value, seed) run.
struct RunResult {
    std::string config_hash;
    std::string kind;
    std::string regime;
    std::string sweep_axis;   // "corruption_p" | "fraction" | "context_size" | "" (anchor/plain)
    double sweep_value = std::numeric_limits<double>::quiet_NaN();
    std::uint64_t seed = 0;
    Metrics metrics;
    double wall_s = 0.0;
    double time_ratio = std::numeric_limits<double>::quiet_NaN();
    std::string status = "ok";

    bool ok() const { return status == "ok"; }

    nlohmann::json to_json() const {
        nlohmann::json j{{"config_hash", config_hash},
                         {"kind", kind},
                         {"regime", regime},
                         {"sweep_axis", sweep_axis},
                         {"seed", seed},
                         {"metrics", metrics.to_json()},
                         {"wall_s", wall_s},
                         {"status", status}};
        if (!std::isnan(sweep_value)) {
            j["sweep_value"] = sweep_value;
        }
        if (!std::isnan(time_ratio)) {
            j["time_ratio"] = time_ratio;
        }
        return j;
    }

    static RunResult from_json(const nlohmann::json& j) {
        RunResult r;
        r.config_hash = j.value("config_hash", "");
        r.kind = j.value("kind", "");
        r.regime = j.value("regime", "");
        r.sweep_axis = j.value("sweep_axis", "");
        r.sweep_value = j.value("sweep_value", std::numeric_limits<double>::quiet_NaN());
        r.seed = j.value("seed", std::uint64_t{0});
        if (j.contains("metrics")) {
            const auto& m = j["metrics"];
            r.metrics.precision = m.value("precision", 0.0);
            r.metrics.recall = m.value("recall", 0.0);
            r.metrics.f1 = m.value("f1", 0.0);
            r.metrics.accuracy = m.value("accuracy", 0.0);
        }
        r.wall_s = j.value("wall_s", 0.0);
        r.time_ratio = j.value("time_ratio", std::numeric_limits<double>::quiet_NaN());
        r.status = j.value("status", "ok");
        return r;
    }
};

// Task data shared by every cell of a harness invocation.
struct TaskEnv {
    Dataset dataset;
    ExplanationSet gold;
    ParamStore pretrained;  // enc/* + mlm/* when pretraining happened
    bool has_pretrained = false;
    MlmStats mlm_stats;
};

inline TaskEnv prepare_task(const ExperimentConfig& cfg, bool need_pretrained) {
    TaskEnv env;
    if (cfg.generate) {
        auto [ds, gold] = generate_task(cfg.task);
        env.dataset = std::move(ds);
        env.gold = std::move(gold);
    } else {
        namespace fs = std::filesystem;
        const fs::path dir = cfg.jsonl_dir;
        std::vector<std::string> words;
        if (fs::exists(dir / "vocab.json")) {
            std::ifstream is(dir / "vocab.json");
            nlohmann::json vj;
            is >> vj;
            words = vj.at("words").get<std::vector<std::string>>();
        }
        env.dataset = load_dataset_jsonl((dir / "train.jsonl").string(),
                                         (dir / "val.jsonl").string(),
                                         (dir / "test.jsonl").string(), words);
        if (fs::exists(dir / "explanations.txt")) {
            env.gold = load_explanations((dir / "explanations.txt").string());
        }
    }
    if (need_pretrained) {
        if (!cfg.pretrained_ckpt.empty()) {
            env.pretrained = load_checkpoint(cfg.pretrained_ckpt).store;
        } else {
            std::vector<std::vector<std::string>> corpus, heldout;
            if (cfg.generate) {
                corpus = generate_corpus(cfg.task, cfg.corpus_sentences,
                                         mix_seed(cfg.task.seed, hash_str("corpus")));
                heldout = generate_corpus(cfg.task, cfg.heldout_sentences,
                                          mix_seed(cfg.task.seed, hash_str("heldout")));
            } else {
                for (const Example& ex : env.dataset.train) {
                    corpus.push_back(ex.tokens);
                }
                for (const Example& ex : env.dataset.val) {
                    heldout.push_back(ex.tokens);
                }
            }
            auto [store, stats] =
                mlm_pretrain(cfg.encoder, env.dataset.vocab, corpus, heldout, cfg.mlm);
            env.pretrained = std::move(store);
            env.mlm_stats = stats;
        }
        env.has_pretrained = true;
    }
    return env;
}

// Builds, trains and test-evaluates one cell. Exceptions are captured in the
// result status so a sweep can continue past a failed cell.
inline RunResult run_cell(const ExperimentConfig& cfg, const TaskEnv& env,
                          const std::string& kind_str, Regime regime, std::uint64_t seed,
                          const std::string& sweep_axis, double sweep_value,
                          const Dataset* dataset_override = nullptr,
                          const PCSpec* pcspec_override = nullptr) {
    RunResult r;
    r.config_hash = cfg.config_hash();
    r.kind = kind_str;
    r.regime = to_string(regime);
    r.sweep_axis = sweep_axis;
    r.sweep_value = sweep_value;
    r.seed = seed;
    const auto t0 = std::chrono::steady_clock::now();
    try {
        const Dataset& ds = dataset_override != nullptr ? *dataset_override : env.dataset;
        const PCSpec& pcspec = pcspec_override != nullptr ? *pcspec_override : cfg.pcspec;
        const ModelKind kind = ModelKind::parse(kind_str);
        Rng rng(seed);
        const ParamStore* pretrained =
            regime == Regime::FrozenLM && env.has_pretrained ? &env.pretrained : nullptr;
        Model model = build_model(kind, cfg.encoder, ds, &env.gold, &pcspec, rng,
                                  cfg.train.head_hidden, pretrained);
        TrainConfig tc = cfg.train;
        tc.regime = regime;
        tc.seed = seed;
        train(model, ds, tc);
        r.metrics = evaluate(model, ds.test);
    } catch (const std::exception& e) {
        r.status = e.what();
    }
    r.wall_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return r;
}

namespace detail {

inline void run_parallel(int jobs, std::vector<std::function<RunResult()>>& cells,
                         std::vector<RunResult>& out) {
    out.resize(cells.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= cells.size()) {
                return;
            }
            out[i] = cells[i]();
        }
    };
    const int n = std::max(1, std::min<int>(jobs, static_cast<int>(cells.size())));
    if (n == 1) {
        worker();
        return;
    }
    std::vector<std::thread> pool;
    for (int i = 0; i < n; ++i) {
        pool.emplace_back(worker);
    }
    for (auto& t : pool) {
        t.join();
    }
}

inline std::string fmt(double v, const char* spec = "%.6f") {
    if (std::isnan(v)) {
        return "";
    }
    char buf[64];
    std::snprintf(buf, sizeof(buf), spec, v);
    return buf;
}

inline void ensure_dir(const std::string& dir) {
    std::filesystem::create_directories(dir);
}

inline void write_lines(const std::string& path, const std::vector<std::string>& lines) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) {
        throw std::runtime_error("cannot open for write: " + path);
    }
    for (const auto& l : lines) {
        os << l << '\n';
    }
}

inline void write_summary(const std::string& path, const std::string& sweep,
                          const ExperimentConfig& cfg, const std::vector<RunResult>& results,
                          const nlohmann::json& flags) {
    nlohmann::json j;
    j["sweep"] = sweep;
    j["config"] = cfg.to_json();
    j["config_hash"] = cfg.config_hash();
    j["flags"] = flags;
    nlohmann::json arr = nlohmann::json::array();
    for (const RunResult& r : results) {
        arr.push_back(r.to_json());
    }
    j["results"] = arr;
    std::ofstream os(path, std::ios::trunc);
    os << j.dump(2) << '\n';
}

inline double mean_f1(const std::vector<RunResult>& rs, const std::string& kind,
                      const std::string& regime, std::optional<double> value = {}) {
    double sum = 0.0;
    int n = 0;
    for (const RunResult& r : rs) {
        if (!r.ok() || r.kind.rfind(kind, 0) != 0 || r.regime != regime) {
            continue;
        }
        if (value.has_value() && (std::isnan(r.sweep_value) || r.sweep_value != *value)) {
            continue;
        }
        sum += r.metrics.f1;
        ++n;
    }
    return n > 0 ? sum / n : std::numeric_limits<double>::quiet_NaN();
}

}  // namespace detail

// --------------------------------------------------------------------------
// Sweeps
// --------------------------------------------------------------------------

// Corruption sweep: ExpCorrupted(p) per p/regime/seed (plus the tunable
// variant under the frozen regime), with p-independent NoExp and ExpGold
// anchor rows. Qualitative orderings go into the summary flags, not asserts.
inline std::vector<RunResult> sweep_corruption(const ExperimentConfig& cfg) {
    bool any_frozen = false;
    for (const auto& r : cfg.regimes) {
        any_frozen |= regime_from_string(r) == Regime::FrozenLM;
    }
    const TaskEnv env = prepare_task(cfg, any_frozen);
    std::vector<std::function<RunResult()>> cells;
    for (const std::string& regime_str : cfg.regimes) {
        const Regime regime = regime_from_string(regime_str);
        for (std::uint64_t seed : cfg.seeds) {
            for (const char* anchor : {"NoExp", "ExpGold"}) {
                cells.push_back([&cfg, &env, anchor = std::string(anchor), regime, seed] {
                    return run_cell(cfg, env, anchor, regime, seed, "corruption_p",
                                    std::numeric_limits<double>::quiet_NaN());
                });
            }
            for (double p : cfg.corruption_ps) {
                cells.push_back([&cfg, &env, regime, seed, p] {
                    return run_cell(cfg, env, "ExpCorrupted:" + detail::fmt(p, "%g"), regime, seed,
                                    "corruption_p", p);
                });
                if (regime == Regime::FrozenLM) {
                    cells.push_back([&cfg, &env, regime, seed, p] {
                        return run_cell(cfg, env, "ExpCorruptedTunable:" + detail::fmt(p, "%g"),
                                        regime, seed, "corruption_p", p);
                    });
                }
            }
        }
    }
    std::vector<RunResult> results;
    detail::run_parallel(cfg.jobs, cells, results);

    detail::ensure_dir(cfg.out_dir);
    std::vector<std::string> lines = {"p,kind,regime,seed,f1,acc,status"};
    for (const RunResult& r : results) {
        lines.push_back(detail::fmt(r.sweep_value, "%g") + "," + r.kind + "," + r.regime + "," +
                        std::to_string(r.seed) + "," + detail::fmt(r.metrics.f1) + "," +
                        detail::fmt(r.metrics.accuracy) + "," + (r.ok() ? "ok" : "error"));
    }
    detail::write_lines(cfg.out_dir + "/corruption.csv", lines);

    nlohmann::json flags;
    for (const std::string& regime_str : cfg.regimes) {
        const double gold = detail::mean_f1(results, "ExpGold", regime_str);
        const double noexp = detail::mean_f1(results, "NoExp", regime_str);
        const double corrupted_full = detail::mean_f1(results, "ExpCorrupted:1", regime_str, 1.0);
        flags[regime_str] = {{"gold_mean_f1", gold},
                             {"noexp_mean_f1", noexp},
                             {"fully_corrupted_mean_f1", corrupted_full},
                             {"gold_ge_corrupted", gold >= corrupted_full},
                             {"corrupted_ge_noexp", corrupted_full >= noexp}};
    }
    detail::write_summary(cfg.out_dir + "/corruption_results.json", "corruption", cfg, results,
                          flags);
    return results;
}

// Data-efficiency sweep: label-stratified train subsets per fraction.
inline std::vector<RunResult> sweep_data_fraction(const ExperimentConfig& cfg) {
    bool any_frozen = false;
    for (const auto& r : cfg.regimes) {
        any_frozen |= regime_from_string(r) == Regime::FrozenLM;
    }
    const TaskEnv env = prepare_task(cfg, any_frozen);

    // one subsample per fraction, shared across kinds and seeds
    std::map<double, Dataset> subsets;
    for (double f : cfg.fractions) {
        subsets.emplace(f, subsample(env.dataset, f, mix_seed(cfg.task.seed, hash_str("frac"))));
    }

    std::vector<std::function<RunResult()>> cells;
    for (const std::string& regime_str : cfg.regimes) {
        const Regime regime = regime_from_string(regime_str);
        for (double f : cfg.fractions) {
            const Dataset* ds = &subsets.at(f);
            for (const std::string& kind : cfg.kinds) {
                for (std::uint64_t seed : cfg.seeds) {
                    cells.push_back([&cfg, &env, ds, kind, regime, seed, f] {
                        return run_cell(cfg, env, kind, regime, seed, "fraction", f, ds);
                    });
                }
            }
        }
    }
    std::vector<RunResult> results;
    detail::run_parallel(cfg.jobs, cells, results);

    detail::ensure_dir(cfg.out_dir);
    std::vector<std::string> lines = {"fraction,kind,seed,f1,acc"};
    for (const RunResult& r : results) {
        lines.push_back(detail::fmt(r.sweep_value, "%g") + "," + r.kind + "," +
                        std::to_string(r.seed) + "," + detail::fmt(r.metrics.f1) + "," +
                        detail::fmt(r.metrics.accuracy));
    }
    detail::write_lines(cfg.out_dir + "/datafrac.csv", lines);

    nlohmann::json flags;
    for (const std::string& regime_str : cfg.regimes) {
        for (const std::string& kind : cfg.kinds) {
            std::vector<double> means;
            for (double f : cfg.fractions) {
                means.push_back(detail::mean_f1(results, kind, regime_str, f));
            }
            bool monotone = true;
            for (std::size_t i = 1; i < means.size(); ++i) {
                monotone &= means[i] + 1e-12 >= means[i - 1];
            }
            flags[regime_str][kind] = {{"mean_f1_by_fraction", means},
                                       {"monotone_nondecreasing", monotone}};
        }
    }
    detail::write_summary(cfg.out_dir + "/datafrac_results.json", "datafrac", cfg, results, flags);
    return results;
}

// Context-size sweep over the factorization size l of PC(FactorizedRandom).
inline std::vector<RunResult> sweep_context_size(const ExperimentConfig& cfg) {
    bool any_frozen = false;
    for (const auto& r : cfg.regimes) {
        any_frozen |= regime_from_string(r) == Regime::FrozenLM;
    }
    const TaskEnv env = prepare_task(cfg, any_frozen);

    std::vector<PCSpec> specs;
    for (int l : cfg.context_sizes) {
        PCSpec s = cfg.pcspec;
        s.variant = PCVariant::FactorizedRandom;
        s.l = l;
        specs.push_back(s);
    }

    std::vector<std::function<RunResult()>> cells;
    for (const std::string& regime_str : cfg.regimes) {
        const Regime regime = regime_from_string(regime_str);
        for (std::size_t li = 0; li < specs.size(); ++li) {
            const PCSpec* spec = &specs[li];
            const double l = cfg.context_sizes[li];
            for (std::uint64_t seed : cfg.seeds) {
                cells.push_back([&cfg, &env, spec, regime, seed, l] {
                    return run_cell(cfg, env, "PC:FactorizedRandom", regime, seed, "context_size",
                                    l, nullptr, spec);
                });
            }
        }
    }
    std::vector<RunResult> results;
    detail::run_parallel(cfg.jobs, cells, results);

    detail::ensure_dir(cfg.out_dir);
    std::vector<std::string> lines = {"l,regime,seed,f1,acc,status"};
    for (const RunResult& r : results) {
        lines.push_back(detail::fmt(r.sweep_value, "%g") + "," + r.regime + "," +
                        std::to_string(r.seed) + "," + detail::fmt(r.metrics.f1) + "," +
                        detail::fmt(r.metrics.accuracy) + "," + (r.ok() ? "ok" : "error"));
    }
    detail::write_lines(cfg.out_dir + "/contextsize.csv", lines);

    nlohmann::json flags;
    for (const std::string& regime_str : cfg.regimes) {
        std::vector<double> means;
        for (int l : cfg.context_sizes) {
            means.push_back(
                detail::mean_f1(results, "PC:FactorizedRandom", regime_str, double(l)));
        }
        nlohmann::json f{{"mean_f1_by_l", means}};
        if (!means.empty()) {
            f["f1_last_ge_first"] = means.back() >= means.front();
            double lo = means.front(), hi = means.front();
            for (double v : means) {
                lo = std::min(lo, v);
                hi = std::max(hi, v);
            }
            f["max_minus_min_f1"] = hi - lo;
        }
        flags[regime_str] = f;
    }
    detail::write_summary(cfg.out_dir + "/contextsize_results.json", "contextsize", cfg, results,
                          flags);
    return results;
}

// --------------------------------------------------------------------------
// Timing bench
// --------------------------------------------------------------------------

struct BenchRow {
    std::string model;
    int n_explanations = 0;
    double seconds_per_batch = 0.0;
    double ratio_vs_noexp = 0.0;
};

inline ExplanationSet tile_explanations(const ExplanationSet& gold, int n) {
    if (gold.empty()) {
        throw std::invalid_argument("tile_explanations: empty base set");
    }
    ExplanationSet out;
    for (int i = 0; i < n; ++i) {
        out.explanations.push_back(gold.explanations[static_cast<std::size_t>(i) %
                                                     gold.explanations.size()]);
    }
    return out;
}

// Forward cost per batch for NoExp, ExpGold(n) over the configured n grid,
// PC(Random) and Mixture, all measured in one process against NoExp.
inline std::vector<BenchRow> bench(const ExperimentConfig& cfg) {
    const TaskEnv env = prepare_task(cfg, false);
    const std::vector<Example>& split = env.dataset.test;

    auto timed = [&](const ModelKind& kind, const ExplanationSet* gold) {
        Rng build_rng(cfg.seeds.front());
        Model m = build_model(kind, cfg.encoder, env.dataset, gold, &cfg.pcspec, build_rng,
                              cfg.train.head_hidden);
        return measure_time(m, split, cfg.bench_batch_size, cfg.bench_batches);
    };

    std::vector<BenchRow> rows;
    const double noexp = timed(ModelKind::parse("NoExp"), &env.gold);
    rows.push_back({"NoExp", 0, noexp, 1.0});
    for (int n : cfg.bench_ns) {
        const ExplanationSet tiled = tile_explanations(env.gold, n);
        const double t = timed(ModelKind::parse("ExpGold"), &tiled);
        rows.push_back({"ExpGold", n, t, t / noexp});
    }
    const double pc = timed(ModelKind::parse("PC:Random"), &env.gold);
    rows.push_back({"PC:Random", 0, pc, pc / noexp});
    const double mix = timed(ModelKind::parse("Mixture"), &env.gold);
    rows.push_back({"Mixture", env.gold.size(), mix, mix / noexp});

    detail::ensure_dir(cfg.out_dir);
    std::vector<std::string> lines = {"model,n_explanations,seconds_per_batch,ratio_vs_noexp"};
    nlohmann::json arr = nlohmann::json::array();
    for (const BenchRow& r : rows) {
        lines.push_back(r.model + "," + std::to_string(r.n_explanations) + "," +
                        detail::fmt(r.seconds_per_batch) + "," + detail::fmt(r.ratio_vs_noexp, "%.3f"));
        arr.push_back({{"model", r.model},
                       {"n_explanations", r.n_explanations},
                       {"seconds_per_batch", r.seconds_per_batch},
                       {"ratio_vs_noexp", r.ratio_vs_noexp}});
    }
    detail::write_lines(cfg.out_dir + "/bench.csv", lines);
    nlohmann::json j{{"sweep", "bench"}, {"config", cfg.to_json()}, {"rows", arr}};
    std::ofstream os(cfg.out_dir + "/bench_results.json", std::ios::trunc);
    os << j.dump(2) << '\n';
    return rows;
}

// --------------------------------------------------------------------------
// Report: aggregate result files into CSV, markdown and SVG plots.
// --------------------------------------------------------------------------

struct CellAggregate {
    std::string sweep;
    std::string kind;
    std::string regime;
    double value = std::numeric_limits<double>::quiet_NaN();
    int n_seeds = 0;
    double f1_mean = 0.0, f1_std = 0.0;
    double acc_mean = 0.0, acc_std = 0.0;
};

// "75.5 ± 0.59" (percent); the deviation is omitted for single-seed cells.
inline std::string format_mean_std(double mean, double std_dev, int n) {
    char buf[64];
    if (n <= 1) {
        std::snprintf(buf, sizeof(buf), "%.1f", mean * 100.0);
    } else {
        std::snprintf(buf, sizeof(buf), "%.1f ± %.2f", mean * 100.0, std_dev * 100.0);
    }
    return buf;
}

inline std::vector<CellAggregate> aggregate_results(const std::vector<RunResult>& results,
                                                    const std::string& sweep) {
    std::map<std::tuple<std::string, std::string, double>, std::vector<const RunResult*>> cells;
    for (const RunResult& r : results) {
        if (!r.ok()) {
            continue;
        }
        const double v = std::isnan(r.sweep_value) ? -1.0 : r.sweep_value;
        cells[{r.kind, r.regime, v}].push_back(&r);
    }
    std::vector<CellAggregate> out;
    for (auto& [key, rs] : cells) {
        // canonical seed order keeps the aggregate independent of the order
        // in which cells finished or files were read
        std::sort(rs.begin(), rs.end(),
                  [](const RunResult* a, const RunResult* b) { return a->seed < b->seed; });
        CellAggregate a;
        a.sweep = sweep;
        a.kind = std::get<0>(key);
        a.regime = std::get<1>(key);
        a.value = std::get<2>(key);
        a.n_seeds = static_cast<int>(rs.size());
        for (const RunResult* r : rs) {
            a.f1_mean += r->metrics.f1;
            a.acc_mean += r->metrics.accuracy;
        }
        a.f1_mean /= a.n_seeds;
        a.acc_mean /= a.n_seeds;
        if (a.n_seeds > 1) {
            double sf = 0.0, sa = 0.0;
            for (const RunResult* r : rs) {
                sf += (r->metrics.f1 - a.f1_mean) * (r->metrics.f1 - a.f1_mean);
                sa += (r->metrics.accuracy - a.acc_mean) * (r->metrics.accuracy - a.acc_mean);
            }
            a.f1_std = std::sqrt(sf / (a.n_seeds - 1));
            a.acc_std = std::sqrt(sa / (a.n_seeds - 1));
        }
        out.push_back(a);
    }
    return out;
}

// Reads every *_results.json under `results_dir` and emits report.csv,
// report.md and one plot image per sweep axis.
inline std::vector<CellAggregate> report(const std::string& results_dir) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(results_dir)) {
        throw std::invalid_argument("report: not a directory: " + results_dir);
    }
    std::vector<std::string> files;
    for (const auto& e : fs::directory_iterator(results_dir)) {
        const std::string name = e.path().filename().string();
        if (name.size() > 13 && name.substr(name.size() - 13) == "_results.json") {
            files.push_back(e.path().string());
        }
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) {
        throw std::invalid_argument("report: no *_results.json files in " + results_dir);
    }

    std::map<std::string, std::vector<RunResult>> by_sweep;
    for (const std::string& f : files) {
        std::ifstream is(f);
        nlohmann::json j;
        is >> j;
        if (!j.contains("results")) {
            continue;
        }
        const std::string sweep = j.value("sweep", "run");
        for (const auto& rj : j["results"]) {
            by_sweep[sweep].push_back(RunResult::from_json(rj));
        }
    }
    if (by_sweep.empty()) {
        throw std::invalid_argument("report: no result records found in " + results_dir);
    }

    std::vector<CellAggregate> all;
    std::vector<std::string> csv = {"sweep,value,kind,regime,n_seeds,f1_mean,f1_std,acc_mean,acc_std"};
    std::vector<std::string> md = {"# Results", ""};
    for (const auto& [sweep, results] : by_sweep) {
        const auto aggs = aggregate_results(results, sweep);
        md.push_back("## " + sweep);
        md.push_back("");
        md.push_back("| value | kind | regime | F1 | Acc | seeds |");
        md.push_back("|---|---|---|---|---|---|");
        std::map<std::string, SvgSeries> series;
        for (const CellAggregate& a : aggs) {
            csv.push_back(sweep + "," + (a.value < 0 ? "" : detail::fmt(a.value, "%g")) + "," +
                          a.kind + "," + a.regime + "," + std::to_string(a.n_seeds) + "," +
                          detail::fmt(a.f1_mean) + "," +
                          (a.n_seeds > 1 ? detail::fmt(a.f1_std) : "") + "," +
                          detail::fmt(a.acc_mean) + "," +
                          (a.n_seeds > 1 ? detail::fmt(a.acc_std) : ""));
            md.push_back("| " + (a.value < 0 ? std::string("-") : detail::fmt(a.value, "%g")) +
                         " | " + a.kind + " | " + a.regime + " | " +
                         format_mean_std(a.f1_mean, a.f1_std, a.n_seeds) + " | " +
                         format_mean_std(a.acc_mean, a.acc_std, a.n_seeds) + " | " +
                         std::to_string(a.n_seeds) + " |");
            if (a.value >= 0) {
                auto& s = series[a.kind + " (" + a.regime + ")"];
                s.name = a.kind + " (" + a.regime + ")";
                s.points.emplace_back(a.value, a.f1_mean * 100.0);
            }
            all.push_back(a);
        }
        md.push_back("");
        if (!series.empty()) {
            std::vector<SvgSeries> sv;
            for (auto& [name, s] : series) {
                sv.push_back(std::move(s));
            }
            write_svg_plot(results_dir + "/plot_" + sweep + ".svg", "F1 vs " + sweep, sweep,
                           "F1 (%)", sv);
        }
    }
    detail::write_lines(results_dir + "/report.csv", csv);
    detail::write_lines(results_dir + "/report.md", md);
    return all;
}

}  // namespace ctxlab
