// Command-line front end: data generation, MLM pretraining, training runs,
// the three sweep grids, the timing bench and report emission. Every
// subcommand is driven by one JSON config file.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "ctxlab/harness.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct CommonArgs {
    std::string config_path;
    std::string out;
    std::int64_t seed = -1;
    int jobs = 0;
};

ctxlab::ExperimentConfig load_config(const CommonArgs& args) {
    ctxlab::ExperimentConfig cfg = args.config_path.empty()
                                       ? ctxlab::ExperimentConfig::from_json(json::object())
                                       : ctxlab::ExperimentConfig::from_file(args.config_path);
    if (!args.out.empty()) {
        cfg.out_dir = args.out;
    }
    if (args.seed >= 0) {
        cfg.seeds = {static_cast<std::uint64_t>(args.seed)};
        cfg.train.seed = static_cast<std::uint64_t>(args.seed);
        cfg.task.seed = static_cast<std::uint64_t>(args.seed);
        cfg.mlm.seed = static_cast<std::uint64_t>(args.seed);
    }
    if (args.jobs > 0) {
        cfg.jobs = args.jobs;
    }
    return cfg;
}

void add_common(CLI::App* cmd, CommonArgs& args, bool with_jobs = true) {
    cmd->add_option("--config", args.config_path, "JSON experiment config");
    cmd->add_option("--out", args.out, "output directory (overrides config)");
    cmd->add_option("--seed", args.seed, "single seed (overrides config seeds)");
    if (with_jobs) {
        cmd->add_option("--jobs", args.jobs, "parallel cells (overrides config)");
    }
}

int gen_data(const CommonArgs& args) {
    ctxlab::ExperimentConfig cfg = load_config(args);
    auto [ds, gold] = ctxlab::generate_task(cfg.task);
    fs::create_directories(cfg.out_dir);
    ctxlab::save_jsonl(ds.train, ds.label_names, cfg.out_dir + "/train.jsonl");
    ctxlab::save_jsonl(ds.val, ds.label_names, cfg.out_dir + "/val.jsonl");
    ctxlab::save_jsonl(ds.test, ds.label_names, cfg.out_dir + "/test.jsonl");
    ctxlab::save_explanations(gold, cfg.out_dir + "/explanations.txt");
    std::vector<std::string> words;
    for (int id : ds.vocab.word_ids()) {
        words.push_back(ds.vocab.token(id));
    }
    json vocab{{"words", words}, {"labels", ds.label_names}};
    std::ofstream(cfg.out_dir + "/vocab.json") << vocab.dump(2) << '\n';
    std::ofstream(cfg.out_dir + "/task.json") << cfg.task.to_json().dump(2) << '\n';
    std::cout << "wrote " << ds.train.size() << "/" << ds.val.size() << "/" << ds.test.size()
              << " examples, " << gold.size() << " explanations to " << cfg.out_dir << "\n";
    return 0;
}

int pretrain(const CommonArgs& args) {
    ctxlab::ExperimentConfig cfg = load_config(args);
    ctxlab::TaskEnv env = ctxlab::prepare_task(cfg, true);
    fs::create_directories(cfg.out_dir);
    const std::string ckpt = cfg.out_dir + "/encoder.ckpt";
    json meta{{"encoder", cfg.encoder.to_json()},
              {"vocab_size", env.dataset.vocab.size()},
              {"mlm",
               {{"initial_heldout_loss", env.mlm_stats.initial_heldout_loss},
                {"final_heldout_loss", env.mlm_stats.final_heldout_loss},
                {"heldout_top1", env.mlm_stats.heldout_top1},
                {"steps", env.mlm_stats.steps}}}};
    ctxlab::save_checkpoint(env.pretrained, ckpt, meta.dump());
    std::ofstream(cfg.out_dir + "/pretrain.json") << meta.dump(2) << '\n';
    std::cout << "pretrained encoder: heldout loss " << env.mlm_stats.initial_heldout_loss
              << " -> " << env.mlm_stats.final_heldout_loss << ", top1 "
              << env.mlm_stats.heldout_top1 << "\nsaved " << ckpt << "\n";
    return 0;
}

int train_runs(const CommonArgs& args) {
    ctxlab::ExperimentConfig cfg = load_config(args);
    bool any_frozen = false;
    for (const auto& r : cfg.regimes) {
        any_frozen |= ctxlab::regime_from_string(r) == ctxlab::Regime::FrozenLM;
    }
    const ctxlab::TaskEnv env = ctxlab::prepare_task(cfg, any_frozen);
    const std::string run_root = cfg.out_dir + "/" + cfg.config_hash();
    fs::create_directories(run_root);

    std::vector<ctxlab::RunResult> results;
    bool all_ok = true;
    for (const std::string& regime_str : cfg.regimes) {
        const ctxlab::Regime regime = ctxlab::regime_from_string(regime_str);
        for (const std::string& kind_str : cfg.kinds) {
            for (std::uint64_t seed : cfg.seeds) {
                ctxlab::RunResult r;
                r.config_hash = cfg.config_hash();
                r.kind = kind_str;
                r.regime = regime_str;
                r.seed = seed;
                const std::string run_dir =
                    run_root + "/" + kind_str + "_" + regime_str + "_s" + std::to_string(seed);
                const auto t0 = std::chrono::steady_clock::now();
                try {
                    fs::create_directories(run_dir);
                    ctxlab::Rng rng(seed);
                    ctxlab::Model model = ctxlab::build_model(
                        ctxlab::ModelKind::parse(kind_str), cfg.encoder, env.dataset, &env.gold,
                        &cfg.pcspec, rng, cfg.train.head_hidden,
                        regime == ctxlab::Regime::FrozenLM ? &env.pretrained : nullptr);
                    ctxlab::TrainConfig tc = cfg.train;
                    tc.regime = regime;
                    tc.seed = seed;
                    ctxlab::History hist = ctxlab::train(model, env.dataset, tc);
                    r.metrics = ctxlab::evaluate(model, env.dataset.test);
                    json meta{{"kind", kind_str}, {"regime", regime_str}, {"seed", seed}};
                    ctxlab::save_checkpoint(model.params, run_dir + "/model.ckpt", meta.dump());
                    std::ofstream(run_dir + "/history.json") << hist.to_json().dump(2) << '\n';
                    std::ofstream(run_dir + "/metrics.json")
                        << r.metrics.to_json().dump(2) << '\n';
                    std::ofstream(run_dir + "/config.json") << cfg.to_json().dump(2) << '\n';
                } catch (const std::exception& e) {
                    r.status = e.what();
                    all_ok = false;
                }
                r.wall_s =
                    std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
                std::cout << kind_str << " " << regime_str << " seed " << seed << ": "
                          << (r.ok() ? "f1 " + std::to_string(r.metrics.f1) + " acc " +
                                           std::to_string(r.metrics.accuracy)
                                     : "error: " + r.status)
                          << "\n";
                results.push_back(std::move(r));
            }
        }
    }
    ctxlab::detail::write_summary(run_root + "/train_results.json", "run", cfg, results,
                                  json::object());
    std::cout << "run directory: " << run_root << "\n";
    return all_ok ? 0 : 1;
}

template <class SweepFn>
int run_sweep(const CommonArgs& args, SweepFn fn, const char* name) {
    ctxlab::ExperimentConfig cfg = load_config(args);
    const std::vector<ctxlab::RunResult> results = fn(cfg);
    int failures = 0;
    for (const ctxlab::RunResult& r : results) {
        if (!r.ok()) {
            ++failures;
            std::cerr << name << " cell failed: " << r.kind << " " << r.regime << " seed "
                      << r.seed << ": " << r.status << "\n";
        }
    }
    std::cout << name << ": " << results.size() - failures << "/" << results.size()
              << " cells completed, outputs in " << cfg.out_dir << "\n";
    return failures == 0 ? 0 : 1;
}

int run_bench(const CommonArgs& args) {
    ctxlab::ExperimentConfig cfg = load_config(args);
    const auto rows = ctxlab::bench(cfg);
    for (const auto& r : rows) {
        std::printf("%-12s n=%-3d %10.6f s/batch   %6.2fx\n", r.model.c_str(), r.n_explanations,
                    r.seconds_per_batch, r.ratio_vs_noexp);
    }
    std::cout << "bench outputs in " << cfg.out_dir << "\n";
    return 0;
}

int run_report(const CommonArgs& args, const std::string& dir_arg) {
    const std::string dir = !dir_arg.empty() ? dir_arg : (!args.out.empty() ? args.out : "runs");
    const auto aggs = ctxlab::report(dir);
    std::cout << "aggregated " << aggs.size() << " cells; wrote report.csv, report.md and plots"
              << " under " << dir << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"relation-extraction context experiments"};
    app.require_subcommand(1);

    CommonArgs gen_args, pre_args, train_args, corr_args, frac_args, size_args, bench_args,
        report_args;
    std::string report_dir;

    add_common(app.add_subcommand("gen-data", "generate the synthetic benchmark"), gen_args,
               false);
    add_common(app.add_subcommand("pretrain", "masked-LM pretraining for the frozen regime"),
               pre_args, false);
    add_common(app.add_subcommand("train", "train and evaluate the configured kind/seed grid"),
               train_args, false);
    add_common(app.add_subcommand("sweep-corruption", "corruption-fraction sweep"), corr_args);
    add_common(app.add_subcommand("sweep-datafrac", "training-data-fraction sweep"), frac_args);
    add_common(app.add_subcommand("sweep-size", "perturbed-context size sweep"), size_args);
    add_common(app.add_subcommand("bench", "timing bench"), bench_args, false);
    auto* report_cmd = app.add_subcommand("report", "aggregate results into tables and plots");
    add_common(report_cmd, report_args, false);
    report_cmd->add_option("dir", report_dir, "results directory");

    CLI11_PARSE(app, argc, argv);

    try {
        if (app.got_subcommand("gen-data")) {
            return gen_data(gen_args);
        }
        if (app.got_subcommand("pretrain")) {
            return pretrain(pre_args);
        }
        if (app.got_subcommand("train")) {
            return train_runs(train_args);
        }
        if (app.got_subcommand("sweep-corruption")) {
            return run_sweep(corr_args, ctxlab::sweep_corruption, "sweep-corruption");
        }
        if (app.got_subcommand("sweep-datafrac")) {
            return run_sweep(frac_args, ctxlab::sweep_data_fraction, "sweep-datafrac");
        }
        if (app.got_subcommand("sweep-size")) {
            return run_sweep(size_args, ctxlab::sweep_context_size, "sweep-size");
        }
        if (app.got_subcommand("bench")) {
            return run_bench(bench_args);
        }
        if (app.got_subcommand("report")) {
            return run_report(report_args, report_dir);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
