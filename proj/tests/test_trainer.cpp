#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "seer/attention.hpp"
#include "seer/errors.hpp"
#include "seer/rng.hpp"
#include "seer/tensor_io.hpp"
#include "seer/trainer.hpp"

using namespace seer;

namespace {

ModelShape tiny_train_shape() {
    ModelShape s;
    s.num_q_heads = 2;
    s.num_kv_heads = 1;
    s.head_dim = 16;
    s.gate_dim = 16;
    s.block_size = 8;
    return s;
}

}  // namespace

TEST_CASE("cosine_lr endpoints and midpoint") {
    CHECK(cosine_lr(0.1, 0, 100) == doctest::Approx(0.1));
    CHECK(cosine_lr(0.1, 50, 100) == doctest::Approx(0.05));
    CHECK(cosine_lr(0.1, 100, 100) == 0.0);  // exact, not approximate
    CHECK(cosine_lr(0.1, 250, 100) == 0.0);
    for (std::size_t s = 1; s <= 100; ++s)
        CHECK(cosine_lr(0.1, s, 100) <= cosine_lr(0.1, s - 1, 100));
}

TEST_CASE("train config validation") {
    TrainConfig cfg;
    CHECK_NOTHROW(cfg.validate());
    cfg.lr = 0.0;  // frozen optimizer is allowed
    CHECK_NOTHROW(cfg.validate());
    cfg.lr = -1.0;
    CHECK_THROWS(cfg.validate());
    cfg = TrainConfig{};
    cfg.steps = 0;
    CHECK_THROWS(cfg.validate());
    cfg = TrainConfig{};
    cfg.batch = 0;
    CHECK_THROWS(cfg.validate());
}

TEST_CASE("synth kind string round trip") {
    for (const char* name : {"clustered", "local", "uniform"})
        CHECK(std::string(to_string(synth_kind_from_string(name))) == name);
    CHECK_THROWS_AS(synth_kind_from_string("banana"), DataError);
}

TEST_CASE("synthetic samples are deterministic and shaped") {
    ModelShape shape = tiny_train_shape();
    for (SynthKind kind : {SynthKind::Clustered, SynthKind::Local, SynthKind::Uniform}) {
        SampleInputs a = synth_qk(kind, shape, 48, 7);
        SampleInputs b = synth_qk(kind, shape, 48, 7);
        SampleInputs c = synth_qk(kind, shape, 48, 8);
        CHECK(a.q_nope.shape == std::vector<std::size_t>{2, 48, 16});
        CHECK(a.k_nope.shape == std::vector<std::size_t>{1, 48, 16});
        CHECK(a.q_nope.data == b.q_nope.data);
        CHECK(a.k_nope.data == b.k_nope.data);
        CHECK(a.q_nope.data != c.q_nope.data);
        // reference attention sees the rotated tensors
        std::vector<std::int64_t> pos(48);
        for (std::size_t i = 0; i < 48; ++i) pos[i] = std::int64_t(i);
        Tensor k_rot = rope_heads(a.k_nope, pos, shape.rope_theta);
        CHECK(a.attn.k.data == k_rot.data);
        CHECK(a.attn.causal_offset == 0);
    }
}

TEST_CASE("clustered ground truth is block concentrated") {
    ModelShape shape = tiny_train_shape();
    SampleInputs smp = synth_qk(SynthKind::Clustered, shape, 128, 3);
    GroundTruthMap gt = ground_truth_naive(smp.attn, shape);
    const std::size_t nb = shape.num_blocks(128);
    // late rows: their top quarter of blocks should hold most of the mass
    double covered = 0.0;
    std::size_t rows = 0;
    for (std::size_t r = 96; r < 128; ++r, ++rows) {
        std::vector<float> row(nb);
        for (std::size_t j = 0; j < nb; ++j) row[j] = gt.gt.at(0, r, j);
        double got = 0.0;
        for (std::size_t j : topk_indices(row, nb / 4)) got += row[j];
        covered += got;
    }
    // the tiny head_dim leaves only two clusters; the desk shapes concentrate
    // far harder, so this is a loose structural floor
    CHECK(covered / double(rows) > 0.8);
}

TEST_CASE("local corpus favors recent blocks") {
    ModelShape shape = tiny_train_shape();
    SampleInputs smp = synth_qk(SynthKind::Local, shape, 96, 11);
    GroundTruthMap gt = ground_truth_naive(smp.attn, shape);
    const std::size_t nb = shape.num_blocks(96);
    double newest = 0.0, rest = 0.0;
    for (std::size_t r = 64; r < 96; ++r) {
        const std::size_t cur = r / shape.block_size;
        for (std::size_t j = 0; j <= cur; ++j) {
            if (j + 2 > cur)
                newest += gt.gt.at(0, r, j);
            else
                rest += gt.gt.at(0, r, j);
        }
    }
    CHECK(newest > rest);
    (void)nb;
}

TEST_CASE("corpus_sample cycles seq_lens and stays deterministic") {
    CorpusSpec corpus;
    corpus.shape = tiny_train_shape();
    corpus.kind = SynthKind::Uniform;
    corpus.seed = 5;
    corpus.seq_lens = {24, 40};
    SampleInputs s0 = corpus_sample(corpus, 0);
    SampleInputs s1 = corpus_sample(corpus, 1);
    SampleInputs s0b = corpus_sample(corpus, 0);
    CHECK(s0.q_nope.shape[1] == 24);
    CHECK(s1.q_nope.shape[1] == 40);
    CHECK(s0.q_nope.data == s0b.q_nope.data);
}

TEST_CASE("dump corpus loads the saved triple and rotates keys") {
    ModelShape shape = tiny_train_shape();
    SampleInputs src = synth_qk(SynthKind::Uniform, shape, 32, 19);
    const std::string prefix = "seer_trainer_dump";
    save_tensor(src.q_nope, prefix + ".q.satr");
    save_tensor(src.k_nope, prefix + ".k.satr");
    save_tensor(src.attn.v, prefix + ".v.satr");

    CorpusSpec corpus;
    corpus.shape = shape;
    corpus.dump_prefixes = {prefix};
    SampleInputs back = corpus_sample(corpus, 0);
    CHECK(back.q_nope.data == src.q_nope.data);
    CHECK(back.k_nope.data == src.k_nope.data);
    CHECK(back.attn.v.data == src.attn.v.data);
    CHECK(back.attn.k.data == src.attn.k.data);  // same rope on both paths

    std::remove((prefix + ".q.satr").c_str());
    std::remove((prefix + ".k.satr").c_str());
    std::remove((prefix + ".v.satr").c_str());
    CHECK_THROWS_AS(corpus_sample(corpus, 0), DataError);
}

TEST_CASE("training descends and is reproducible") {
    TrainConfig cfg;
    cfg.steps = 12;
    cfg.batch = 2;
    cfg.seed = 21;
    CorpusSpec corpus;
    corpus.shape = tiny_train_shape();
    corpus.kind = SynthKind::Clustered;
    corpus.seed = 9;
    corpus.seq_lens = {48};

    TrainResult a = train(cfg, corpus);
    REQUIRE(a.loss_history.size() == 12);
    REQUIRE(a.lr_history.size() == 12);
    CHECK(a.loss_history.back() < a.loss_history.front());
    for (std::size_t s = 0; s < 12; ++s)
        CHECK(a.lr_history[s] == doctest::Approx(cosine_lr(cfg.lr, s, 12)));

    TrainResult b = train(cfg, corpus);
    CHECK(a.loss_history == b.loss_history);
    for (std::size_t h = 0; h < a.params.w_q.size(); ++h) {
        CHECK(a.params.w_q[h].data == b.params.w_q[h].data);
        CHECK(a.params.w_k[h].data == b.params.w_k[h].data);
    }
}

TEST_CASE("zero learning rate leaves the gate unchanged") {
    TrainConfig cfg;
    cfg.lr = 0.0;
    cfg.steps = 3;
    cfg.batch = 1;
    cfg.seed = 4;
    CorpusSpec corpus;
    corpus.shape = tiny_train_shape();
    corpus.kind = SynthKind::Uniform;
    corpus.seed = 2;
    corpus.seq_lens = {24};
    TrainResult r = train(cfg, corpus);
    GateParams init = init_gate_params(corpus.shape, mix_seed(cfg.seed, 1));
    CHECK(r.params.w_q[0].data == init.w_q[0].data);
    CHECK(r.params.w_k[0].data == init.w_k[0].data);
}

TEST_CASE("loss csv has one row per step") {
    TrainConfig cfg;
    cfg.steps = 5;
    cfg.batch = 1;
    CorpusSpec corpus;
    corpus.shape = tiny_train_shape();
    corpus.kind = SynthKind::Uniform;
    corpus.seed = 3;
    corpus.seq_lens = {16};
    TrainResult r = train(cfg, corpus);
    const std::string path = "seer_trainer_loss.csv";
    write_loss_csv(r, path);
    std::ifstream in(path);
    std::string line;
    std::getline(in, line);
    CHECK(line == "step,lr,loss");
    std::size_t rows = 0;
    while (std::getline(in, line))
        if (!line.empty()) ++rows;
    CHECK(rows == 5);
    in.close();
    std::remove(path.c_str());
}
