#include "seer/eval.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <mutex>
#include <stdexcept>
#include <thread>

#include <json.hpp>

#include "seer/attention.hpp"
#include "seer/errors.hpp"
#include "seer/rng.hpp"

namespace seer {

namespace {

std::string g17(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

Tensor rows_slice(const Tensor& x, std::size_t lo, std::size_t hi) {
    const std::size_t heads = x.dim(0), d = x.dim(2);
    if (hi > x.dim(1) || lo >= hi) throw std::invalid_argument("rows_slice: bad range");
    Tensor out({heads, hi - lo, d});
    for (std::size_t h = 0; h < heads; ++h) {
        const float* src = x.row(h, lo);
        std::copy(src, src + (hi - lo) * d, out.row(h, 0));
    }
    return out;
}

// Runs fn(0..n-1), possibly on worker threads; rethrows the first failure.
template <typename Fn>
void run_cells(std::size_t n, Fn&& fn) {
    const std::size_t workers = worker_threads(n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::mutex err_mutex;
    std::exception_ptr err;
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w)
        pool.emplace_back([&] {
            while (true) {
                const std::size_t i = next.fetch_add(1);
                if (i >= n) return;
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(err_mutex);
                    if (!err) err = std::current_exception();
                }
            }
        });
    for (std::thread& t : pool) t.join();
    if (err) std::rethrow_exception(err);
}

}  // namespace

double block_recall(const std::vector<std::size_t>& selected,
                    const std::vector<std::size_t>& reference) {
    if (reference.empty()) return 1.0;
    std::vector<std::size_t> a = selected, b = reference;
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    std::vector<std::size_t> both;
    std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(both));
    return double(both.size()) / double(b.size());
}

double mass_coverage(std::span<const float> gt_row, const std::vector<std::size_t>& selected) {
    double total = 0.0;
    for (float v : gt_row) total += v;
    if (!(total > 0.0)) return 1.0;
    double hit = 0.0;
    for (std::size_t j : selected)
        if (j < gt_row.size()) hit += gt_row[j];
    return std::clamp(hit / total, 0.0, 1.0);
}

double rel_error(const Tensor& approx, const Tensor& ref) {
    if (!approx.same_shape(ref)) throw std::invalid_argument("rel_error: shape mismatch");
    double diff2 = 0.0, ref2 = 0.0;
    for (std::size_t i = 0; i < ref.data.size(); ++i) {
        const double d = double(approx.data[i]) - double(ref.data[i]);
        diff2 += d * d;
        ref2 += double(ref.data[i]) * double(ref.data[i]);
    }
    if (ref2 == 0.0) return diff2 == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
    return std::sqrt(diff2 / ref2);
}

double selection_recall(const Tensor& gt_row, const BlockSelection& selection,
                        const ModelShape& shape, std::size_t seq_len) {
    if (gt_row.rank() != 2 || gt_row.dim(0) != shape.num_kv_heads)
        throw std::invalid_argument("selection_recall: gt row shape mismatch");
    const std::size_t newest = (seq_len - 1) / shape.block_size;
    double acc = 0.0;
    for (std::size_t h = 0; h < shape.num_kv_heads; ++h) {
        const std::size_t k = selection.blocks[h].size();
        // Size-matched oracle reference with the same forced-newest rule.
        std::vector<float> cand_scores;
        std::vector<std::size_t> cand_index;
        for (std::size_t j = 0; j < gt_row.dim(1); ++j) {
            if (j == newest) continue;
            cand_scores.push_back(gt_row.at(h, j));
            cand_index.push_back(j);
        }
        std::vector<std::size_t> ref{newest};
        for (std::size_t r : topk_indices(cand_scores, k > 0 ? k - 1 : 0))
            ref.push_back(cand_index[r]);
        acc += block_recall(selection.blocks[h], ref);
    }
    return acc / double(shape.num_kv_heads);
}

double CostModel::bytes_per_block() const {
    return double(shape.block_size) * 2.0 * double(shape.head_dim) *
           double(shape.num_kv_heads) * 4.0;
}

double CostModel::dense_bytes(std::size_t seq_len) const {
    return double(seq_len) * 2.0 * double(shape.head_dim) * double(shape.num_kv_heads) * 4.0;
}

double CostModel::compression_bytes(std::size_t seq_len) const {
    return double(shape.num_blocks(seq_len)) * double(shape.gate_dim) *
           double(shape.num_kv_heads) * 4.0;
}

double CostModel::sparse_bytes(std::size_t seq_len, double sparsity) const {
    if (!(sparsity >= 0.0) || !(sparsity <= 1.0))
        throw std::invalid_argument("sparsity must be in [0, 1]");
    return dense_bytes(seq_len) * (1.0 - sparsity) + compression_bytes(seq_len);
}

double CostModel::modeled_speedup(std::size_t seq_len, double sparsity) const {
    return dense_bytes(seq_len) / sparse_bytes(seq_len, sparsity);
}

void validate_report(const ExperimentReport& report) {
    for (const ReportCell& cell : report.cells)
        for (const auto& [key, value] : cell.metrics) {
            const bool frac = key.find("recall") != std::string::npos ||
                              key.find("coverage") != std::string::npos;
            if (frac && !(value >= 0.0 && value <= 1.0))
                throw NumericError("report metric " + key + " out of [0,1]: " + g17(value));
            if (key.find("speedup") != std::string::npos && !(value > 0.0))
                throw NumericError("report metric " + key + " must be positive: " + g17(value));
        }
}

namespace {

// Union of keys in first-seen order, so CSV columns are stable.
template <typename Cells, typename Getter>
std::vector<std::string> ordered_keys(const Cells& cells, Getter getter) {
    std::vector<std::string> keys;
    for (const auto& cell : cells)
        for (const auto& [key, value] : getter(cell))
            if (std::find(keys.begin(), keys.end(), key) == keys.end()) keys.push_back(key);
    return keys;
}

}  // namespace

void write_report_csv(const ExperimentReport& report, std::ostream& out) {
    validate_report(report);
    out << "# experiment=" << report.experiment << "\n";
    for (const auto& [key, value] : report.config_echo) out << "# " << key << "=" << value << "\n";
    const auto label_keys = ordered_keys(report.cells, [](const ReportCell& c) -> const auto& {
        return c.labels;
    });
    const auto metric_keys = ordered_keys(report.cells, [](const ReportCell& c) -> const auto& {
        return c.metrics;
    });
    for (std::size_t i = 0; i < label_keys.size(); ++i) out << (i ? "," : "") << label_keys[i];
    for (std::size_t i = 0; i < metric_keys.size(); ++i)
        out << (label_keys.empty() && i == 0 ? "" : ",") << metric_keys[i];
    out << "\n";
    for (const ReportCell& cell : report.cells) {
        bool first = true;
        for (const std::string& key : label_keys) {
            const auto it = std::find_if(cell.labels.begin(), cell.labels.end(),
                                         [&](const auto& kv) { return kv.first == key; });
            out << (first ? "" : ",") << (it == cell.labels.end() ? "" : it->second);
            first = false;
        }
        for (const std::string& key : metric_keys) {
            const auto it = std::find_if(cell.metrics.begin(), cell.metrics.end(),
                                         [&](const auto& kv) { return kv.first == key; });
            out << (first ? "" : ",") << (it == cell.metrics.end() ? "" : g17(it->second));
            first = false;
        }
        out << "\n";
    }
}

void write_report_json(const ExperimentReport& report, std::ostream& out) {
    validate_report(report);
    nlohmann::ordered_json j;
    j["experiment"] = report.experiment;
    nlohmann::ordered_json cfg = nlohmann::ordered_json::object();
    for (const auto& [key, value] : report.config_echo) cfg[key] = value;
    j["config"] = std::move(cfg);
    nlohmann::ordered_json cells = nlohmann::ordered_json::array();
    for (const ReportCell& cell : report.cells) {
        nlohmann::ordered_json labels = nlohmann::ordered_json::object();
        for (const auto& [key, value] : cell.labels) labels[key] = value;
        nlohmann::ordered_json metrics = nlohmann::ordered_json::object();
        for (const auto& [key, value] : cell.metrics) metrics[key] = value;
        cells.push_back({{"labels", std::move(labels)}, {"metrics", std::move(metrics)}});
    }
    j["cells"] = std::move(cells);
    out << j.dump(2) << "\n";
}

std::string write_report_file(const ExperimentReport& report, const std::string& out_dir,
                              const std::string& format) {
    if (format != "csv" && format != "json") throw DataError("unknown report format: " + format);
    std::filesystem::create_directories(out_dir);
    const std::string path = out_dir + "/" + report.experiment + "." + format;
    std::ofstream out(path);
    if (!out) throw DataError("cannot open report for writing: " + path);
    if (format == "csv")
        write_report_csv(report, out);
    else
        write_report_json(report, out);
    if (!out) throw DataError("report write failed: " + path);
    return path;
}

std::size_t worker_threads(std::size_t cells) {
    std::size_t hw = std::thread::hardware_concurrency();
    if (hw == 0) hw = 1;
    if (const char* env = std::getenv("SEER_THREADS")) {
        char* end = nullptr;
        const unsigned long long cap = std::strtoull(env, &end, 10);
        if (end != env && cap > 0) hw = std::min<std::size_t>(hw, cap);
    }
    return std::max<std::size_t>(1, std::min(cells, hw));
}

ExperimentReport run_oracle_sweep(const OracleSweepConfig& cfg) {
    cfg.shape.validate();
    struct Cell {
        std::size_t seq_len, block_size, budget;
    };
    std::vector<Cell> cells;
    for (std::size_t seq : cfg.seq_lens)
        for (std::size_t bs : cfg.block_sizes)
            for (std::size_t budget : cfg.budgets) cells.push_back({seq, bs, budget});

    ExperimentReport report;
    report.experiment = "eval_oracle";
    report.config_echo = {{"kind", to_string(cfg.kind)},
                          {"seed", std::to_string(cfg.seed)},
                          {"samples", std::to_string(cfg.samples)}};
    report.cells.resize(cells.size());

    run_cells(cells.size(), [&](std::size_t ci) {
        const Cell& cell = cells[ci];
        ModelShape shape = cfg.shape;
        shape.block_size = cell.block_size;
        const SparsifyPolicy policy{PolicyMode::Oracle, cell.budget, 0.0f};

        double coverage_sum = 0.0;
        std::size_t coverage_n = 0;
        double err_sum = 0.0;
        for (std::size_t si = 0; si < cfg.samples; ++si) {
            const SampleInputs s =
                synth_qk(cfg.kind, shape, cell.seq_len, mix_seed(cfg.seed, si));
            const GroundTruthMap gt = ground_truth_fused(s.attn, shape).gt;
            KvCache cache = make_kv_cache(shape);
            kv_append(cache, s.attn.k, s.attn.v, shape);

            // Long-context rows only; early rows are trivially covered.
            BlockSelection last_sel;
            for (std::size_t i = 3 * cell.seq_len / 4; i < cell.seq_len; ++i) {
                const std::size_t nb_i = shape.num_blocks(i + 1);
                std::vector<std::vector<float>> rows(shape.num_kv_heads);
                for (std::size_t h = 0; h < shape.num_kv_heads; ++h)
                    rows[h].assign(gt.gt.row(h, i), gt.gt.row(h, i) + nb_i);
                const BlockSelection sel = select_blocks(policy, rows, true, i + 1, shape);
                for (std::size_t h = 0; h < shape.num_kv_heads; ++h) {
                    coverage_sum += mass_coverage(
                        std::span<const float>(rows[h].data(), nb_i), sel.blocks[h]);
                    ++coverage_n;
                }
                if (i + 1 == cell.seq_len) last_sel = sel;
            }

            const Tensor q_last = head_row(s.attn.q, cell.seq_len - 1);
            const Tensor sparse = sparse_decode(q_last, cache, last_sel, shape);
            AttentionInputs dense_inp;
            dense_inp.q = q_last;
            dense_inp.k = s.attn.k;
            dense_inp.v = s.attn.v;
            dense_inp.causal_offset = cell.seq_len - 1;
            err_sum += rel_error(sparse, dense_attention(dense_inp, shape));
        }

        ReportCell& out = report.cells[ci];
        out.labels = {{"seq_len", std::to_string(cell.seq_len)},
                      {"block_size", std::to_string(cell.block_size)},
                      {"budget_tokens", std::to_string(cell.budget)}};
        out.metrics = {{"coverage", coverage_sum / double(coverage_n)},
                       {"out_rel_err", err_sum / double(cfg.samples)}};
    });
    return report;
}

namespace {

struct PolicyCellSpec {
    std::string name;
    SparsifyPolicy policy;
    bool untrained = false;
    std::string param_label;  // budget tokens or threshold, as text
};

std::vector<PolicyCellSpec> policy_cells(const PolicySweepConfig& cfg) {
    std::vector<PolicyCellSpec> cells;
    for (const std::string& name : cfg.policies) {
        if (name == "seer-threshold") {
            for (double t : cfg.thresholds)
                cells.push_back({name, {PolicyMode::Threshold, 0, float(t)}, false, g17(t)});
            continue;
        }
        PolicyMode mode;
        bool untrained = false;
        if (name == "oracle")
            mode = PolicyMode::Oracle;
        else if (name == "quest")
            mode = PolicyMode::Quest;
        else if (name == "seer-budget")
            mode = PolicyMode::Budget;
        else if (name == "seer-budget-untrained") {
            mode = PolicyMode::Budget;
            untrained = true;
        } else
            throw DataError("unknown policy: " + name);
        for (std::size_t budget : cfg.budgets)
            cells.push_back({name, {mode, budget, 0.0f}, untrained, std::to_string(budget)});
    }
    return cells;
}

}  // namespace

PolicySweepResult run_policy_sweep(const PolicySweepConfig& cfg) {
    cfg.shape.validate();
    if (cfg.prefill == 0 || cfg.steps == 0)
        throw std::invalid_argument("policy sweep needs prefill >= 1 and steps >= 1");
    const std::vector<PolicyCellSpec> cells = policy_cells(cfg);
    const GateParams untrained = init_gate_params(cfg.shape, cfg.untrained_seed);
    const GateParams& trained = cfg.trained.w_q.empty() ? untrained : cfg.trained;

    PolicySweepResult result;
    result.report.experiment = "eval_policies";
    result.report.config_echo = {{"kind", to_string(cfg.kind)},
                                 {"seed", std::to_string(cfg.seed)},
                                 {"prefill", std::to_string(cfg.prefill)},
                                 {"steps", std::to_string(cfg.steps)},
                                 {"samples", std::to_string(cfg.samples)}};
    result.report.cells.resize(cells.size());
    std::vector<std::vector<SeriesRow>> series(cells.size());

    run_cells(cells.size(), [&](std::size_t ci) {
        const PolicyCellSpec& spec = cells[ci];
        const ModelShape& shape = cfg.shape;
        const std::string cell_name = spec.name + "@" + spec.param_label;
        double recall_sum = 0.0, coverage_sum = 0.0, err_sum = 0.0, activated_sum = 0.0;
        std::size_t n = 0;

        for (std::size_t si = 0; si < cfg.samples; ++si) {
            const std::size_t total = cfg.prefill + cfg.steps;
            const SampleInputs stream = synth_qk(cfg.kind, shape, total, mix_seed(cfg.seed, si));
            DecodeSession session(shape, spec.untrained ? untrained : trained);
            session.prefill(rows_slice(stream.k_nope, 0, cfg.prefill),
                            rows_slice(stream.attn.v, 0, cfg.prefill));

            for (std::size_t s = 0; s < cfg.steps; ++s) {
                const std::size_t p = cfg.prefill + s;
                const StepResult res =
                    session.step(head_row(stream.q_nope, p), head_row(stream.k_nope, p),
                                 head_row(stream.attn.v, p), spec.policy);

                const Tensor q_rope = head_row(stream.attn.q, p);
                const Tensor gt_row = session.oracle_row(q_rope);
                recall_sum += selection_recall(gt_row, res.selection, shape, p + 1);
                double cov = 0.0;
                for (std::size_t h = 0; h < shape.num_kv_heads; ++h)
                    cov += mass_coverage(
                        std::span<const float>(gt_row.row(h), gt_row.dim(1)),
                        res.selection.blocks[h]);
                coverage_sum += cov / double(shape.num_kv_heads);

                AttentionInputs dense_inp;
                dense_inp.q = q_rope;
                dense_inp.k = kv_k_tensor(session.kv(), shape);
                dense_inp.v = kv_v_tensor(session.kv(), shape);
                dense_inp.causal_offset = p;
                err_sum += rel_error(res.out, dense_attention(dense_inp, shape));

                activated_sum += double(res.activated_tokens);
                series[ci].push_back({cell_name, s, p + 1, res.activated_tokens});
                ++n;
            }
        }

        ReportCell& out = result.report.cells[ci];
        out.labels = {{"policy", spec.name},
                      {spec.policy.mode == PolicyMode::Threshold ? "threshold" : "budget_tokens",
                       spec.param_label}};
        out.metrics = {{"recall", recall_sum / double(n)},
                       {"coverage", coverage_sum / double(n)},
                       {"out_rel_err", err_sum / double(n)},
                       {"activated_tokens_mean", activated_sum / double(n)}};
    });

    for (auto& rows : series)
        result.series.insert(result.series.end(), rows.begin(), rows.end());
    return result;
}

void write_series_csv(const std::vector<SeriesRow>& series, std::ostream& out) {
    out << "cell,step,seq_len,activated_tokens\n";
    for (const SeriesRow& row : series)
        out << row.cell << "," << row.step << "," << row.seq_len << "," << row.activated_tokens
            << "\n";
}

namespace {

double median_ms(std::vector<double>& samples) {
    std::sort(samples.begin(), samples.end());
    const std::size_t n = samples.size();
    return n % 2 ? samples[n / 2] : 0.5 * (samples[n / 2 - 1] + samples[n / 2]);
}

template <typename Fn>
double time_ms(Fn&& fn) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    const auto t1 = std::chrono::steady_clock::now();
    return std::chrono::duration<double, std::milli>(t1 - t0).count();
}

}  // namespace

ExperimentReport run_bench(const BenchConfig& cfg) {
    cfg.shape.validate();
    const ModelShape& shape = cfg.shape;
    struct Cell {
        std::size_t seq_len, batch;
        double sparsity;
    };
    std::vector<Cell> cells;
    for (std::size_t seq : cfg.seq_lens)
        for (std::size_t batch : cfg.batch_sizes)
            for (double s : cfg.sparsities) cells.push_back({seq, batch, s});

    ExperimentReport report;
    report.experiment = "bench_kernel";
    report.config_echo = {{"seed", std::to_string(cfg.seed)},
                          {"trials", std::to_string(std::max<std::size_t>(cfg.trials, 9))},
                          {"warmups", std::to_string(cfg.warmups)}};

    // Timing cells run serially: concurrent cells would contend for cores.
    std::size_t ci = 0;
    for (const Cell& cell : cells) {
        if (!(cell.sparsity >= 0.0) || !(cell.sparsity < 1.0))
            throw std::invalid_argument("bench sparsity must be in [0, 1)");
        Rng rng(mix_seed(cfg.seed, ci++));
        const std::size_t d = shape.head_dim;
        KvCache cache = make_kv_cache(shape);
        cache.seq_len = cell.seq_len;
        for (std::size_t h = 0; h < shape.num_kv_heads; ++h) {
            cache.k[h].resize(cell.seq_len * d);
            cache.v[h].resize(cell.seq_len * d);
            for (float& v : cache.k[h]) v = rng.gaussianf();
            for (float& v : cache.v[h]) v = rng.gaussianf();
        }

        const std::size_t nb = shape.num_blocks(cell.seq_len);
        const std::size_t keep = std::clamp<std::size_t>(
            std::size_t(std::llround((1.0 - cell.sparsity) * double(nb))), 1, nb);
        BlockSelection sel, full;
        sel.num_blocks = full.num_blocks = nb;
        sel.blocks.resize(shape.num_kv_heads);
        full.blocks.resize(shape.num_kv_heads);
        double kept_tokens = 0.0;
        for (std::size_t h = 0; h < shape.num_kv_heads; ++h) {
            std::vector<float> noise(nb);
            for (float& v : noise) v = float(rng.uniform());
            std::vector<std::size_t> pick = topk_indices(noise, keep);
            pick.push_back(nb - 1);  // forced newest
            std::sort(pick.begin(), pick.end());
            pick.erase(std::unique(pick.begin(), pick.end()), pick.end());
            sel.blocks[h] = pick;
            sel.max_selected_blocks = std::max(sel.max_selected_blocks, pick.size());
            for (std::size_t j : pick)
                kept_tokens +=
                    double(std::min((j + 1) * shape.block_size, cell.seq_len) -
                           j * shape.block_size);
            full.blocks[h].resize(nb);
            for (std::size_t j = 0; j < nb; ++j) full.blocks[h][j] = j;
            full.max_selected_blocks = nb;
        }
        const double actual_sparsity =
            1.0 - kept_tokens / (double(shape.num_kv_heads) * double(cell.seq_len));

        std::vector<Tensor> queries;
        for (std::size_t bi = 0; bi < cell.batch; ++bi) {
            Tensor q({shape.num_q_heads, 1, d});
            for (float& v : q.data) v = rng.gaussianf();
            queries.push_back(std::move(q));
        }

        const auto run_sparse = [&] {
            for (const Tensor& q : queries) sparse_decode(q, cache, sel, shape);
        };
        const auto run_full = [&] {
            for (const Tensor& q : queries) sparse_decode(q, cache, full, shape);
        };
        for (std::size_t w = 0; w < cfg.warmups; ++w) {
            run_sparse();
            run_full();
        }
        const std::size_t trials = std::max<std::size_t>(cfg.trials, 9);
        std::vector<double> sparse_ms, full_ms;
        for (std::size_t t = 0; t < trials; ++t) {
            sparse_ms.push_back(time_ms(run_sparse));
            full_ms.push_back(time_ms(run_full));
        }
        const double sparse_med = median_ms(sparse_ms);
        const double full_med = median_ms(full_ms);

        ReportCell out;
        out.labels = {{"seq_len", std::to_string(cell.seq_len)},
                      {"batch", std::to_string(cell.batch)},
                      {"sparsity", g17(cell.sparsity)}};
        out.metrics = {{"actual_sparsity", actual_sparsity},
                       {"sparse_ms", sparse_med},
                       {"full_ms", full_med},
                       {"measured_speedup", full_med / sparse_med},
                       {"modeled_speedup",
                        CostModel{shape}.modeled_speedup(cell.seq_len, actual_sparsity)}};
        report.cells.push_back(std::move(out));
    }
    return report;
}

DecodeSimResult run_decode_sim(const DecodeSimConfig& cfg) {
    cfg.shape.validate();
    if (cfg.prefill == 0 || cfg.steps == 0)
        throw std::invalid_argument("decode sim needs prefill >= 1 and steps >= 1");
    if (cfg.num_layers == 0) throw std::invalid_argument("decode sim needs num_layers >= 1");
    if (cfg.params.w_q.empty()) throw std::invalid_argument("decode sim needs gate params");
    const ModelShape& shape = cfg.shape;

    SparsifyPolicy dense_policy;
    dense_policy.mode = PolicyMode::Budget;
    dense_policy.budget_tokens = std::numeric_limits<std::size_t>::max() / 2;

    DecodeSimResult result;
    double recall_sum = 0.0, err_sum = 0.0;
    for (std::size_t layer = 0; layer < cfg.num_layers; ++layer) {
        const SparsifyPolicy& policy = layer < cfg.dense_layers ? dense_policy : cfg.policy;
        const std::size_t total = cfg.prefill + cfg.steps;
        const SampleInputs stream = synth_qk(cfg.kind, shape, total, mix_seed(cfg.seed, layer));
        DecodeSession session(shape, cfg.params);
        session.prefill(rows_slice(stream.k_nope, 0, cfg.prefill),
                        rows_slice(stream.attn.v, 0, cfg.prefill));
        for (std::size_t s = 0; s < cfg.steps; ++s) {
            const std::size_t p = cfg.prefill + s;
            const StepResult res =
                session.step(head_row(stream.q_nope, p), head_row(stream.k_nope, p),
                             head_row(stream.attn.v, p), policy);

            const Tensor q_rope = head_row(stream.attn.q, p);
            const Tensor gt_row = session.oracle_row(q_rope);
            AttentionInputs dense_inp;
            dense_inp.q = q_rope;
            dense_inp.k = kv_k_tensor(session.kv(), shape);
            dense_inp.v = kv_v_tensor(session.kv(), shape);
            dense_inp.causal_offset = p;

            TraceRow row;
            row.layer = layer;
            row.step = s;
            row.seq_len = p + 1;
            row.num_selected_blocks = res.selection.max_selected_blocks;
            row.selection_recall_vs_oracle = selection_recall(gt_row, res.selection, shape, p + 1);
            row.output_rel_error_vs_dense = rel_error(res.out, dense_attention(dense_inp, shape));
            row.activated_tokens = res.activated_tokens;
            recall_sum += row.selection_recall_vs_oracle;
            err_sum += row.output_rel_error_vs_dense;
            result.rows.push_back(row);
        }
    }
    result.mean_recall = recall_sum / double(result.rows.size());
    result.mean_rel_error = err_sum / double(result.rows.size());
    return result;
}

void write_trace_csv(const DecodeSimResult& result, bool include_layer, std::ostream& out) {
    if (include_layer) out << "layer,";
    out << "step,seq_len,num_selected_blocks,selection_recall_vs_oracle,"
           "output_rel_error_vs_dense\n";
    for (const TraceRow& row : result.rows) {
        if (include_layer) out << row.layer << ",";
        out << row.step << "," << row.seq_len << "," << row.num_selected_blocks << ","
            << g17(row.selection_recall_vs_oracle) << "," << g17(row.output_rel_error_vs_dense)
            << "\n";
    }
}

}  // namespace seer
