#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "seer/decode.hpp"
#include "seer/tensor.hpp"
#include "seer/trainer.hpp"

namespace seer {

// |selected ∩ reference| / |reference|; 1.0 for an empty reference.
double block_recall(const std::vector<std::size_t>& selected,
                    const std::vector<std::size_t>& reference);

// Fraction of the row's ground-truth mass inside the selected blocks.
double mass_coverage(std::span<const float> gt_row, const std::vector<std::size_t>& selected);

// L2(approx - ref) / L2(ref).
double rel_error(const Tensor& approx, const Tensor& ref);

// Mean over kv heads of recall against the oracle reference of the same
// size: newest block plus the top-(k-1) ground-truth blocks.
double selection_recall(const Tensor& gt_row, const BlockSelection& selection,
                        const ModelShape& shape, std::size_t seq_len);

// I/O cost model for the decode step; the kernel is treated as purely
// bandwidth bound, so the modeled speedup is the ratio of bytes touched.
struct CostModel {
    ModelShape shape;

    double bytes_per_block() const;                 // K+V bytes of one block
    double dense_bytes(std::size_t seq_len) const;  // full K+V read
    double compression_bytes(std::size_t seq_len) const;
    double sparse_bytes(std::size_t seq_len, double sparsity) const;
    double modeled_speedup(std::size_t seq_len, double sparsity) const;
};

struct ReportCell {
    std::vector<std::pair<std::string, std::string>> labels;
    std::vector<std::pair<std::string, double>> metrics;
};

struct ExperimentReport {
    std::string experiment;
    std::vector<std::pair<std::string, std::string>> config_echo;
    std::vector<ReportCell> cells;
};

// Throws NumericError when a recall/coverage metric leaves [0,1] or a
// speedup is non-positive; writers run this before emitting anything.
void validate_report(const ExperimentReport& report);

void write_report_csv(const ExperimentReport& report, std::ostream& out);
void write_report_json(const ExperimentReport& report, std::ostream& out);

// "<out_dir>/<experiment>.csv" or ".json"; returns the path written.
std::string write_report_file(const ExperimentReport& report, const std::string& out_dir,
                              const std::string& format);

// Worker count for sweep cells: min(cells, SEER_THREADS or hardware).
std::size_t worker_threads(std::size_t cells);

struct OracleSweepConfig {
    ModelShape shape;  // block_size is overridden per cell
    SynthKind kind = SynthKind::Clustered;
    std::uint64_t seed = 0;
    std::vector<std::size_t> block_sizes = {16, 32, 64};
    std::vector<std::size_t> budgets = {256};  // tokens
    std::vector<std::size_t> seq_lens = {1024};
    std::size_t samples = 2;
};

// Oracle selection quality per (seq_len, block_size, budget): ground-truth
// mass coverage over the last-quarter query rows plus last-row output error.
ExperimentReport run_oracle_sweep(const OracleSweepConfig& cfg);

struct PolicySweepConfig {
    ModelShape shape;
    SynthKind kind = SynthKind::Clustered;
    std::uint64_t seed = 0;
    std::size_t prefill = 128;
    std::size_t steps = 128;
    std::size_t samples = 1;
    std::vector<std::string> policies = {"oracle", "quest", "seer-budget", "seer-threshold"};
    std::vector<std::size_t> budgets = {256};  // tokens
    std::vector<double> thresholds = {0.05};
    GateParams trained;             // used by the seer-* policies
    std::uint64_t untrained_seed = 4242;  // seer-budget-untrained init
};

struct SeriesRow {
    std::string cell;
    std::size_t step = 0;
    std::size_t seq_len = 0;
    std::size_t activated_tokens = 0;
};

struct PolicySweepResult {
    ExperimentReport report;
    std::vector<SeriesRow> series;  // activated tokens vs seq_len, per cell
};

// Decode sessions per policy cell on identical token streams; reports mean
// recall vs oracle, coverage, output error, and activated tokens.
PolicySweepResult run_policy_sweep(const PolicySweepConfig& cfg);

void write_series_csv(const std::vector<SeriesRow>& series, std::ostream& out);

struct BenchConfig {
    ModelShape shape;
    std::uint64_t seed = 0;
    std::vector<std::size_t> seq_lens = {1024, 4096};
    std::vector<std::size_t> batch_sizes = {1};
    std::vector<double> sparsities = {0.0, 0.5, 0.9};
    std::size_t trials = 9;   // floor; raised to 9 if configured lower
    std::size_t warmups = 3;
};

// Wall-clock of sparse_decode against full-selection decode (same kernel,
// every block selected), plus the modeled speedup.
ExperimentReport run_bench(const BenchConfig& cfg);

struct DecodeSimConfig {
    ModelShape shape;
    SynthKind kind = SynthKind::Clustered;
    std::uint64_t seed = 0;
    std::size_t prefill = 128;
    std::size_t steps = 64;
    SparsifyPolicy policy;
    std::size_t num_layers = 1;
    std::size_t dense_layers = 0;  // leading layers decoded densely (ablation)
    GateParams params;
};

struct TraceRow {
    std::size_t layer = 0;
    std::size_t step = 0;
    std::size_t seq_len = 0;
    std::size_t num_selected_blocks = 0;
    double selection_recall_vs_oracle = 0.0;
    double output_rel_error_vs_dense = 0.0;
    std::size_t activated_tokens = 0;
};

struct DecodeSimResult {
    std::vector<TraceRow> rows;
    double mean_recall = 0.0;
    double mean_rel_error = 0.0;
};

DecodeSimResult run_decode_sim(const DecodeSimConfig& cfg);

// Single-layer traces emit exactly the documented five columns; multi-layer
// traces prepend a layer column.
void write_trace_csv(const DecodeSimResult& result, bool include_layer, std::ostream& out);

}  // namespace seer
