#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "seer/attention.hpp"
#include "seer/gate.hpp"
#include "seer/tensor.hpp"

namespace seer {

struct TrainConfig {
    double lr = 1e-3;
    std::size_t steps = 800;
    std::size_t batch = 16;
    std::uint64_t seed = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
    bool use_rope = true;

    void validate() const;
};

enum class SynthKind { Clustered, Local, Uniform };

SynthKind synth_kind_from_string(const std::string& name);
const char* to_string(SynthKind kind);

// Training corpus: synthetic sequences, or tensor dumps on disk. A dump
// sample is the triple <prefix>.q.satr / .k.satr / .v.satr holding the
// pre-rotation q, pre-rotation k, and v tensors.
struct CorpusSpec {
    ModelShape shape;
    SynthKind kind = SynthKind::Clustered;
    std::uint64_t seed = 0;
    std::vector<std::size_t> seq_lens = {256};
    std::vector<std::string> dump_prefixes;  // non-empty switches source to dumps

    void validate() const;
};

// One sample: the gate trains on the pre-rotation tensors while the
// reference attention (and so the ground truth) sees the rotated ones.
struct SampleInputs {
    Tensor q_nope;  // [num_q_heads, seq, d]
    Tensor k_nope;  // [num_kv_heads, seq, d]
    AttentionInputs attn;
};

// Deterministic synthetic activations. clustered: keys drawn around shared
// cluster centers in runs of blocks, queries near one center, giving
// block-structured ground truth; local: queries built from a window of
// recent keys; uniform: isotropic Gaussian, near-uniform ground truth.
SampleInputs synth_qk(SynthKind kind, const ModelShape& shape, std::size_t seq_len,
                      std::uint64_t seed);

// Sample sample_index of the (conceptually infinite) corpus stream. The
// trainer consumes indices step*batch+item; tests can rebuild any batch.
SampleInputs corpus_sample(const CorpusSpec& corpus, std::size_t sample_index);

// lr0 * 0.5 * (1 + cos(pi*step/total)); exact 0 at step == total.
double cosine_lr(double lr0, std::size_t step, std::size_t total);

struct TrainResult {
    GateParams params;
    std::vector<double> loss_history;  // pre-update loss per step
    std::vector<double> lr_history;
};

// Distillation loop: ground truth from the fused reference kernel, gate
// gradients from gate_backward, AdamW with cosine decay. Deterministic for
// a given (config, corpus). Throws NumericError on a non-finite loss.
TrainResult train(const TrainConfig& config, const CorpusSpec& corpus);

void write_loss_csv(const TrainResult& result, const std::string& path);

}  // namespace seer
