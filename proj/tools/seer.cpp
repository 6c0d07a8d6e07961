#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "seer/config.hpp"
#include "seer/errors.hpp"
#include "seer/eval.hpp"
#include "seer/gate.hpp"
#include "seer/tensor_io.hpp"
#include "seer/trainer.hpp"

namespace {

using seer::Config;

struct GlobalOpts {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::string out_dir = "out";
    std::string format = "csv";
};

seer::ModelShape shape_from_config(const Config& cfg) {
    seer::ModelShape s;
    s.num_q_heads = cfg.get_u64("shape", "num_q_heads", s.num_q_heads);
    s.num_kv_heads = cfg.get_u64("shape", "num_kv_heads", s.num_kv_heads);
    s.head_dim = cfg.get_u64("shape", "head_dim", s.head_dim);
    s.gate_dim = cfg.get_u64("shape", "gate_dim", s.gate_dim);
    s.block_size = cfg.get_u64("shape", "block_size", s.block_size);
    s.rope_theta = cfg.get_f64("shape", "rope_theta", s.rope_theta);
    try {
        s.validate();
    } catch (const std::exception& e) {
        throw seer::DataError(std::string("config: bad [shape]: ") + e.what());
    }
    return s;
}

std::uint64_t section_seed(const Config& cfg, const std::string& section,
                           const GlobalOpts& opts) {
    if (opts.seed) return *opts.seed;
    return cfg.get_u64(section, "seed", 0);
}

std::vector<std::size_t> to_sizes(const std::vector<std::uint64_t>& v) {
    return std::vector<std::size_t>(v.begin(), v.end());
}

Config load_config(const GlobalOpts& opts) {
    if (opts.config_path.empty()) throw seer::DataError("this command requires --config");
    return seer::parse_config_file(opts.config_path);
}

int cmd_train_gate(const GlobalOpts& opts) {
    const Config cfg = load_config(opts);

    seer::TrainConfig train_cfg;
    train_cfg.lr = cfg.get_f64("train", "lr", train_cfg.lr);
    train_cfg.steps = cfg.get_u64("train", "steps", train_cfg.steps);
    train_cfg.batch = cfg.get_u64("train", "batch", train_cfg.batch);
    train_cfg.seed = section_seed(cfg, "train", opts);
    train_cfg.beta1 = cfg.get_f64("train", "beta1", train_cfg.beta1);
    train_cfg.beta2 = cfg.get_f64("train", "beta2", train_cfg.beta2);
    train_cfg.eps = cfg.get_f64("train", "eps", train_cfg.eps);
    train_cfg.weight_decay = cfg.get_f64("train", "weight_decay", train_cfg.weight_decay);
    train_cfg.use_rope = cfg.get_flag("train", "use_rope", train_cfg.use_rope);

    seer::CorpusSpec corpus;
    corpus.shape = shape_from_config(cfg);
    corpus.kind = seer::synth_kind_from_string(cfg.get_str("corpus", "kind", "clustered"));
    corpus.seed = opts.seed ? *opts.seed : cfg.get_u64("corpus", "seed", 0);
    corpus.seq_lens = to_sizes(cfg.get_u64_list("corpus", "seq_lens", {256}));
    corpus.dump_prefixes = cfg.get_str_list("corpus", "dumps", {});

    const seer::TrainResult result = seer::train(train_cfg, corpus);

    std::filesystem::create_directories(opts.out_dir);
    const std::string ckpt = opts.out_dir + "/gate.ckpt";
    const std::string loss_csv = opts.out_dir + "/loss.csv";
    seer::save_checkpoint(result.params, corpus.shape, ckpt);
    seer::write_loss_csv(result, loss_csv);

    std::printf("checkpoint=%s\n", ckpt.c_str());
    std::printf("loss_csv=%s\n", loss_csv.c_str());
    std::printf("final_loss=%.17g\n", result.loss_history.back());
    return 0;
}

int cmd_eval_oracle(const GlobalOpts& opts) {
    const Config cfg = load_config(opts);
    seer::OracleSweepConfig sweep;
    sweep.shape = shape_from_config(cfg);
    sweep.kind = seer::synth_kind_from_string(cfg.get_str("eval_oracle", "kind", "clustered"));
    sweep.seed = section_seed(cfg, "eval_oracle", opts);
    sweep.block_sizes = to_sizes(cfg.get_u64_list("eval_oracle", "block_sizes", {16, 32, 64}));
    sweep.budgets = to_sizes(cfg.get_u64_list("eval_oracle", "budgets", {256}));
    sweep.seq_lens = to_sizes(cfg.get_u64_list("eval_oracle", "seq_lens", {1024}));
    sweep.samples = cfg.get_u64("eval_oracle", "samples", 2);

    const seer::ExperimentReport report = seer::run_oracle_sweep(sweep);
    std::printf("report=%s\n",
                seer::write_report_file(report, opts.out_dir, opts.format).c_str());
    return 0;
}

int cmd_eval_policies(const GlobalOpts& opts, const std::string& checkpoint_flag) {
    const Config cfg = load_config(opts);
    const std::string ckpt_path = !checkpoint_flag.empty()
                                      ? checkpoint_flag
                                      : cfg.require_str("eval_policies", "checkpoint");
    const seer::Checkpoint ckpt = seer::load_checkpoint(ckpt_path);

    seer::PolicySweepConfig sweep;
    sweep.shape = ckpt.shape;
    sweep.trained = ckpt.params;
    sweep.kind = seer::synth_kind_from_string(cfg.get_str("eval_policies", "kind", "clustered"));
    sweep.seed = section_seed(cfg, "eval_policies", opts);
    sweep.prefill = cfg.get_u64("eval_policies", "prefill", 128);
    sweep.steps = cfg.get_u64("eval_policies", "steps", 128);
    sweep.samples = cfg.get_u64("eval_policies", "samples", 1);
    sweep.policies = cfg.get_str_list("eval_policies", "policies",
                                      {"oracle", "quest", "seer-budget", "seer-threshold"});
    sweep.budgets = to_sizes(cfg.get_u64_list("eval_policies", "budgets", {256}));
    sweep.thresholds = cfg.get_f64_list("eval_policies", "thresholds", {0.05});
    sweep.untrained_seed = cfg.get_u64("eval_policies", "untrained_seed", 4242);

    const seer::PolicySweepResult result = seer::run_policy_sweep(sweep);
    std::printf("report=%s\n",
                seer::write_report_file(result.report, opts.out_dir, opts.format).c_str());

    const std::string series_path = opts.out_dir + "/activated_tokens.csv";
    std::ofstream series(series_path);
    if (!series) throw seer::DataError("cannot open series csv: " + series_path);
    seer::write_series_csv(result.series, series);
    std::printf("series=%s\n", series_path.c_str());
    return 0;
}

int cmd_bench_kernel(const GlobalOpts& opts) {
    const Config cfg = load_config(opts);
    seer::BenchConfig bench;
    bench.shape = shape_from_config(cfg);
    bench.seed = section_seed(cfg, "bench", opts);
    bench.seq_lens = to_sizes(cfg.get_u64_list("bench", "seq_lens", {1024, 4096}));
    bench.batch_sizes = to_sizes(cfg.get_u64_list("bench", "batch_sizes", {1}));
    bench.sparsities = cfg.get_f64_list("bench", "sparsities", {0.0, 0.5, 0.9});
    bench.trials = cfg.get_u64("bench", "trials", 9);
    bench.warmups = cfg.get_u64("bench", "warmups", 3);

    const seer::ExperimentReport report = seer::run_bench(bench);
    std::printf("report=%s\n",
                seer::write_report_file(report, opts.out_dir, opts.format).c_str());
    return 0;
}

int cmd_decode_sim(const GlobalOpts& opts) {
    const Config cfg = load_config(opts);
    seer::DecodeSimConfig sim;
    sim.shape = shape_from_config(cfg);
    sim.kind = seer::synth_kind_from_string(cfg.get_str("decode_sim", "kind", "clustered"));
    sim.seed = section_seed(cfg, "decode_sim", opts);
    sim.prefill = cfg.get_u64("decode_sim", "prefill", 128);
    sim.steps = cfg.get_u64("decode_sim", "steps", 64);
    sim.num_layers = cfg.get_u64("decode_sim", "num_layers", 1);
    sim.dense_layers = cfg.get_u64("decode_sim", "dense_layers", 0);

    sim.policy.mode = seer::policy_mode_from_string(cfg.get_str("decode_sim", "policy", "budget"));
    sim.policy.budget_tokens = cfg.get_u64("decode_sim", "budget", 256);
    sim.policy.threshold = float(cfg.get_f64("decode_sim", "threshold", 0.05));

    const std::string ckpt_path = cfg.get_str("decode_sim", "checkpoint", "");
    if (!ckpt_path.empty()) {
        const seer::Checkpoint ckpt = seer::load_checkpoint(ckpt_path);
        sim.shape = ckpt.shape;
        sim.params = ckpt.params;
    } else {
        sim.params = seer::init_gate_params(sim.shape, cfg.get_u64("decode_sim", "gate_seed", 1));
    }

    const seer::DecodeSimResult result = seer::run_decode_sim(sim);

    std::filesystem::create_directories(opts.out_dir);
    const std::string trace_path = opts.out_dir + "/trace.csv";
    std::ofstream trace(trace_path);
    if (!trace) throw seer::DataError("cannot open trace csv: " + trace_path);
    seer::write_trace_csv(result, sim.num_layers > 1, trace);
    std::printf("trace=%s\n", trace_path.c_str());
    std::printf("mean_recall=%.17g\n", result.mean_recall);
    std::printf("mean_rel_error=%.17g\n", result.mean_rel_error);
    return 0;
}

int cmd_inspect(const std::string& path) {
    std::ifstream probe(path, std::ios::binary);
    if (!probe) throw seer::DataError("cannot open file: " + path);
    char head[8] = {};
    probe.read(head, sizeof head);
    probe.close();

    const auto print_stats = [](const seer::Tensor& t) {
        float lo = t.data[0], hi = t.data[0];
        double sum = 0.0;
        for (float v : t.data) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
            sum += v;
        }
        std::printf("rank=%zu dims=", t.rank());
        for (std::size_t i = 0; i < t.rank(); ++i)
            std::printf("%s%zu", i ? "x" : "", t.shape[i]);
        std::printf(" numel=%zu min=%.6g max=%.6g mean=%.6g\n", t.numel(), double(lo), double(hi),
                    sum / double(t.numel()));
    };

    if (std::string(head, 8) == "SEERGATE") {
        const seer::Checkpoint ckpt = seer::load_checkpoint(path);
        std::printf("gate checkpoint: num_q_heads=%zu num_kv_heads=%zu head_dim=%zu "
                    "gate_dim=%zu block_size=%zu use_rope=%d\n",
                    ckpt.shape.num_q_heads, ckpt.shape.num_kv_heads, ckpt.shape.head_dim,
                    ckpt.shape.gate_dim, ckpt.shape.block_size, int(ckpt.params.use_rope));
        for (std::size_t h = 0; h < ckpt.params.w_q.size(); ++h) {
            std::printf("w_q[%zu]: ", h);
            print_stats(ckpt.params.w_q[h]);
        }
        for (std::size_t h = 0; h < ckpt.params.w_k.size(); ++h) {
            std::printf("w_k[%zu]: ", h);
            print_stats(ckpt.params.w_k[h]);
        }
        return 0;
    }

    print_stats(seer::load_tensor(path));
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"SeerAttention-R desk-scale harness"};
    app.require_subcommand(1);

    GlobalOpts opts;
    app.add_option("--config", opts.config_path, "config file (ini-style key=value)");
    std::uint64_t seed_val = 0;
    auto* seed_opt = app.add_option("--seed", seed_val, "override the config seed");
    app.add_option("--out", opts.out_dir, "output directory (default: out)");
    app.add_option("--format", opts.format, "report format: csv|json")
        ->check(CLI::IsMember({"csv", "json"}));

    auto* train = app.add_subcommand("train-gate", "distill the gate on a corpus");
    auto* eval_oracle = app.add_subcommand("eval-oracle", "oracle selection sweep");
    auto* eval_policies = app.add_subcommand("eval-policies", "policy comparison sweep");
    std::string checkpoint_flag;
    eval_policies->add_option("--checkpoint", checkpoint_flag, "trained gate checkpoint");
    auto* bench = app.add_subcommand("bench-kernel", "sparse decode wall-clock benchmark");
    auto* decode_sim = app.add_subcommand("decode-sim", "auto-regressive session trace");
    auto* inspect = app.add_subcommand("inspect", "summarize a tensor dump or checkpoint");
    std::string inspect_path;
    inspect->add_option("path", inspect_path, "file to inspect")->required();
    // global options are accepted after the subcommand too
    for (CLI::App* sub : {train, eval_oracle, eval_policies, bench, decode_sim, inspect})
        sub->fallthrough();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);
        app.exit(e);
        return 2;
    }
    if (seed_opt->count() > 0) opts.seed = seed_val;

    try {
        if (train->parsed()) return cmd_train_gate(opts);
        if (eval_oracle->parsed()) return cmd_eval_oracle(opts);
        if (eval_policies->parsed()) return cmd_eval_policies(opts, checkpoint_flag);
        if (bench->parsed()) return cmd_bench_kernel(opts);
        if (decode_sim->parsed()) return cmd_decode_sim(opts);
        if (inspect->parsed()) return cmd_inspect(inspect_path);
    } catch (const seer::NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 4;
    } catch (const seer::DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
    return 2;
}
