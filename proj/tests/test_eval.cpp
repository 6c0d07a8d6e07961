#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "json.hpp"
#include "seer/config.hpp"
#include "seer/errors.hpp"
#include "seer/eval.hpp"
#include "seer/gate.hpp"
#include "seer/tensor.hpp"

using namespace seer;

namespace {

ModelShape desk_shape() {
    ModelShape s;
    s.num_q_heads = 8;
    s.num_kv_heads = 2;
    s.head_dim = 64;
    s.gate_dim = 64;
    s.block_size = 64;
    return s;
}

ModelShape eval_tiny_shape() {
    ModelShape s;
    s.num_q_heads = 2;
    s.num_kv_heads = 1;
    s.head_dim = 16;
    s.gate_dim = 16;
    s.block_size = 8;
    return s;
}

ExperimentReport two_cell_report() {
    ExperimentReport rep;
    rep.experiment = "demo";
    rep.config_echo = {{"seed", "7"}};
    ReportCell a;
    a.labels = {{"seq_len", "64"}, {"policy", "oracle"}};
    a.metrics = {{"recall", 1.0}, {"speedup", 4.0}};
    ReportCell b;
    b.labels = {{"seq_len", "128"}, {"policy", "quest"}};
    b.metrics = {{"recall", 0.5}, {"rel_err", 0.25}};
    rep.cells = {a, b};
    return rep;
}

}  // namespace

TEST_CASE("recall coverage and relative error") {
    CHECK(block_recall({1, 3, 5}, {1, 2, 3, 4}) == doctest::Approx(0.5));
    CHECK(block_recall({}, {0}) == 0.0);
    CHECK(block_recall({2, 4}, {}) == 1.0);

    std::vector<float> gt = {0.5f, 0.1f, 0.25f, 0.15f};
    CHECK(mass_coverage(gt, {0, 2}) == doctest::Approx(0.75));
    CHECK(mass_coverage(gt, {}) == doctest::Approx(0.0));

    Tensor ref({2}), approx({2});
    ref.data = {3.0f, 4.0f};
    approx.data = {3.0f, 2.0f};
    CHECK(rel_error(approx, ref) == doctest::Approx(0.4));  // |(0,-2)| / |(3,4)|
    CHECK(rel_error(ref, ref) == 0.0);
    Tensor other({3});
    CHECK_THROWS_AS(rel_error(other, ref), std::invalid_argument);
}

TEST_CASE("selection recall compares against a size matched oracle set") {
    ModelShape shape = eval_tiny_shape();
    const std::size_t seq = 4 * shape.block_size;  // 4 blocks, newest = 3
    Tensor gt_row({1, 4});
    gt_row.data = {0.4f, 0.3f, 0.2f, 0.1f};

    BlockSelection sel;
    sel.num_blocks = 4;
    sel.max_selected_blocks = 2;
    sel.blocks = {{0, 3}};  // reference of size 2 is {3} + top-1 = {0}
    CHECK(selection_recall(gt_row, sel, shape, seq) == doctest::Approx(1.0));
    sel.blocks = {{1, 3}};
    CHECK(selection_recall(gt_row, sel, shape, seq) == doctest::Approx(0.5));
    sel.blocks = {{3}};  // reference shrinks to {3}
    CHECK(selection_recall(gt_row, sel, shape, seq) == doctest::Approx(1.0));
}

TEST_CASE("cost model matches hand computed bytes") {
    CostModel model{desk_shape()};
    CHECK(model.bytes_per_block() == doctest::Approx(65536.0));
    CHECK(model.dense_bytes(4096) == doctest::Approx(4194304.0));
    // gate cache adds exactly 1/128 of the dense stream at these dims
    CHECK(model.compression_bytes(4096) == doctest::Approx(4194304.0 / 128.0));
    CHECK(model.sparse_bytes(4096, 0.9) == doctest::Approx(452198.4));
    CHECK(model.modeled_speedup(4096, 0.9) == doctest::Approx(9.27536231884058).epsilon(1e-12));
    CHECK(model.modeled_speedup(4096, 0.0) < 1.0);  // cache overhead with no skipping
    for (double s : {0.1, 0.3, 0.5, 0.7, 0.9, 0.95})
        CHECK(model.modeled_speedup(4096, s) < 1.0 / (1.0 - s));
    CHECK_THROWS_AS(model.sparse_bytes(4096, 1.5), std::invalid_argument);
}

TEST_CASE("report validation rejects out of range metrics") {
    ExperimentReport rep = two_cell_report();
    CHECK_NOTHROW(validate_report(rep));
    rep.cells[0].metrics[0].second = 1.2;  // recall
    CHECK_THROWS_AS(validate_report(rep), NumericError);
    rep = two_cell_report();
    rep.cells[0].metrics[1].second = 0.0;  // speedup
    CHECK_THROWS_AS(validate_report(rep), NumericError);
    rep = two_cell_report();
    rep.cells[1].metrics[0].second = -0.1;  // recall
    std::ostringstream out;
    CHECK_THROWS_AS(write_report_csv(rep, out), NumericError);
}

TEST_CASE("report csv echoes config and unions columns in first seen order") {
    std::ostringstream out;
    write_report_csv(two_cell_report(), out);
    std::istringstream in(out.str());
    std::string line;
    std::getline(in, line);
    CHECK(line == "# experiment=demo");
    std::getline(in, line);
    CHECK(line == "# seed=7");
    std::getline(in, line);
    CHECK(line == "seq_len,policy,recall,speedup,rel_err");
    std::getline(in, line);
    CHECK(line == "64,oracle,1,4,");
    std::getline(in, line);
    CHECK(line == "128,quest,0.5,,0.25");
}

TEST_CASE("report json carries labels and metrics") {
    std::ostringstream out;
    write_report_json(two_cell_report(), out);
    auto j = nlohmann::json::parse(out.str());
    CHECK(j["experiment"] == "demo");
    CHECK(j["config"]["seed"] == "7");
    REQUIRE(j["cells"].size() == 2);
    CHECK(j["cells"][0]["labels"]["policy"] == "oracle");
    CHECK(j["cells"][0]["metrics"]["recall"] == 1.0);
    CHECK(j["cells"][1]["metrics"]["rel_err"] == 0.25);
}

TEST_CASE("report file writer picks the extension") {
    ExperimentReport rep = two_cell_report();
    const std::string path = write_report_file(rep, ".", "json");
    CHECK(path == "./demo.json");
    std::ifstream in(path);
    REQUIRE(in.good());
    auto j = nlohmann::json::parse(in);
    CHECK(j["experiment"] == "demo");
    in.close();
    std::remove(path.c_str());
    CHECK_THROWS_AS(write_report_file(rep, ".", "yaml"), DataError);
}

TEST_CASE("config parser handles sections comments and lists") {
    const std::string text =
        "top = 1\n"
        "[shape]\n"
        "head_dim = 64   # inline comment\n"
        "head_dim = 32\n"
        "; full-line comment\n"
        "names = a, b , c\n"
        "budgets = 16,32,48\n"
        "lrs = 0.1, 0.2\n"
        "flag_on = true\n"
        "flag_off = 0\n";
    Config cfg = parse_config_text(text);
    CHECK(cfg.get_u64("", "top", 0) == 1);
    CHECK(cfg.get_u64("shape", "head_dim", 0) == 32);  // last wins
    CHECK(cfg.get_str_list("shape", "names", {}) == std::vector<std::string>{"a", "b", "c"});
    CHECK(cfg.get_u64_list("shape", "budgets", {}) ==
          std::vector<std::uint64_t>{16, 32, 48});
    CHECK(cfg.get_f64_list("shape", "lrs", {}) == std::vector<double>{0.1, 0.2});
    CHECK(cfg.get_flag("shape", "flag_on", false));
    CHECK_FALSE(cfg.get_flag("shape", "flag_off", true));
    CHECK(cfg.get_flag("shape", "missing", true));
    CHECK(cfg.get_str("shape", "missing", "dflt") == "dflt");
    CHECK(cfg.has("shape", "names"));
    CHECK_FALSE(cfg.has("shape", "nope"));
}

TEST_CASE("config parser reports the offending line") {
    try {
        parse_config_text("a = 1\nbroken line\n");
        FAIL("expected DataError");
    } catch (const DataError& e) {
        CHECK(std::string(e.what()).find("line 2") != std::string::npos);
    }
    CHECK_THROWS_AS(parse_config_text("[unterminated\n"), DataError);
    CHECK_THROWS_AS(parse_config_text("[]\n"), DataError);
    CHECK_THROWS_AS(parse_config_text("= 3\n"), DataError);

    Config cfg = parse_config_text("x = banana\n");
    CHECK_THROWS_AS(cfg.get_u64("", "x", 0), DataError);
    CHECK_THROWS_AS(cfg.get_f64("", "x", 0.0), DataError);
    CHECK_THROWS_AS(cfg.get_flag("", "x", false), DataError);
    CHECK_THROWS_AS(cfg.require_str("", "absent"), DataError);
    CHECK_THROWS_AS(parse_config_file("/nonexistent/seer.ini"), DataError);
}

TEST_CASE("worker threads honor the env cap") {
    // the env variable caps the worker count, it never raises it above the
    // hardware, so only upper bounds are portable
    setenv("SEER_THREADS", "3", 1);
    CHECK(worker_threads(10) <= 3);
    CHECK(worker_threads(10) >= 1);
    CHECK(worker_threads(2) <= 2);
    setenv("SEER_THREADS", "1", 1);
    CHECK(worker_threads(10) == 1);
    setenv("SEER_THREADS", "junk", 1);  // unparsable values are ignored
    CHECK(worker_threads(4) >= 1);
    unsetenv("SEER_THREADS");
    CHECK(worker_threads(4) >= 1);
    CHECK(worker_threads(4) <= 4);
    CHECK(worker_threads(1) == 1);
}

TEST_CASE("oracle sweep smoke test") {
    OracleSweepConfig cfg;
    cfg.shape = eval_tiny_shape();
    cfg.kind = SynthKind::Clustered;
    cfg.seed = 1;
    cfg.block_sizes = {8};
    cfg.budgets = {16};
    cfg.seq_lens = {64};
    cfg.samples = 1;
    ExperimentReport rep = run_oracle_sweep(cfg);
    REQUIRE(rep.cells.size() == 1);
    CHECK(rep.experiment == "eval_oracle");
    bool saw_cov = false, saw_err = false;
    for (const auto& [key, value] : rep.cells[0].metrics) {
        if (key.find("coverage") != std::string::npos) {
            saw_cov = true;
            CHECK(value >= 0.0);
            CHECK(value <= 1.0);
        }
        if (key.find("rel_err") != std::string::npos) {
            saw_err = true;
            CHECK(value >= 0.0);
        }
    }
    CHECK(saw_cov);
    CHECK(saw_err);
    CHECK_NOTHROW(validate_report(rep));
}

TEST_CASE("policy sweep smoke test scores the oracle at one") {
    PolicySweepConfig cfg;
    cfg.shape = eval_tiny_shape();
    cfg.kind = SynthKind::Clustered;
    cfg.seed = 2;
    cfg.prefill = 24;
    cfg.steps = 8;
    cfg.samples = 1;
    cfg.policies = {"oracle", "quest"};
    cfg.budgets = {16};
    cfg.thresholds = {0.05};
    cfg.trained = init_gate_params(cfg.shape, 11);
    PolicySweepResult res = run_policy_sweep(cfg);
    REQUIRE(res.report.cells.size() == 2);
    CHECK(res.series.size() == 2 * 8);

    double oracle_recall = -1.0;
    for (const ReportCell& cell : res.report.cells) {
        bool is_oracle = false;
        for (const auto& [key, value] : cell.labels)
            if (key == "policy" && value == "oracle") is_oracle = true;
        if (!is_oracle) continue;
        for (const auto& [key, value] : cell.metrics)
            if (key == "recall") oracle_recall = value;
    }
    CHECK(oracle_recall == 1.0);  // the oracle is its own reference

    PolicySweepConfig bad = cfg;
    bad.policies = {"dense"};
    CHECK_THROWS_AS(run_policy_sweep(bad), DataError);
}

TEST_CASE("decode sim smoke test with a generous budget") {
    DecodeSimConfig cfg;
    cfg.shape = eval_tiny_shape();
    cfg.kind = SynthKind::Clustered;
    cfg.seed = 3;
    cfg.prefill = 16;
    cfg.steps = 6;
    cfg.policy.mode = PolicyMode::Budget;
    cfg.policy.budget_tokens = 1 << 20;
    cfg.params = init_gate_params(cfg.shape, 13);
    DecodeSimResult res = run_decode_sim(cfg);
    REQUIRE(res.rows.size() == 6);
    CHECK(res.mean_recall == doctest::Approx(1.0));
    CHECK(res.mean_rel_error < 1e-5);
    for (std::size_t i = 0; i < res.rows.size(); ++i) {
        CHECK(res.rows[i].step == i);
        CHECK(res.rows[i].seq_len == 16 + i + 1);
        CHECK(res.rows[i].activated_tokens == res.rows[i].seq_len);
    }

    DecodeSimConfig bad = cfg;
    bad.params = GateParams{};
    CHECK_THROWS_AS(run_decode_sim(bad), std::invalid_argument);
}

TEST_CASE("series and trace csv headers") {
    std::vector<SeriesRow> series = {{"cell-a", 0, 17, 16}};
    std::ostringstream sout;
    write_series_csv(series, sout);
    std::istringstream sin(sout.str());
    std::string line;
    std::getline(sin, line);
    CHECK(line == "cell,step,seq_len,activated_tokens");
    std::getline(sin, line);
    CHECK(line == "cell-a,0,17,16");

    DecodeSimResult res;
    res.rows = {{0, 0, 9, 2, 1.0, 0.0, 9}};
    std::ostringstream tout;
    write_trace_csv(res, false, tout);
    std::istringstream tin(tout.str());
    std::getline(tin, line);
    CHECK(line ==
          "step,seq_len,num_selected_blocks,selection_recall_vs_oracle,output_rel_error_vs_dense");

    std::ostringstream lout;
    write_trace_csv(res, true, lout);
    std::istringstream lin(lout.str());
    std::getline(lin, line);
    CHECK(line ==
          "layer,step,seq_len,num_selected_blocks,selection_recall_vs_oracle,"
          "output_rel_error_vs_dense");
}
