#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "seer/attention.hpp"
#include "seer/tensor.hpp"

namespace seer {

// Learnable gate weights. One query projection and one key projection per
// kv head: w_q[h] is [gate_dim, g*d] (the group's query heads concatenated
// down to a single gate head), w_k[h] is [gate_dim, 3*d] (max|min|avg pooled
// key block concatenated). use_rope switches the gate-local rotary embedding.
struct GateParams {
    std::vector<Tensor> w_q;
    std::vector<Tensor> w_k;
    bool use_rope = true;
};

GateParams init_gate_params(const ModelShape& shape, std::uint64_t seed);

// Reduce each kv group's query heads to one gate query head and rotate by the
// query's own position. q_nope is pre-rotation, [num_q_heads, q_len, d];
// result is [num_kv_heads, q_len, gate_dim].
Tensor gate_forward_q(const Tensor& q_nope, const GateParams& params, const ModelShape& shape,
                      const std::vector<std::int64_t>& positions);

// Compress key blocks: per kv head, pool max/min/avg per block, concatenate,
// project, rotate with each block's first-token position. position_offset
// shifts those positions, so a slice of a longer sequence compresses
// bit-identically to the full pass. k_nope is [num_kv_heads, kv_len, d];
// result is [num_kv_heads, num_blocks, gate_dim].
Tensor gate_forward_k(const Tensor& k_nope, const GateParams& params, const ModelShape& shape,
                      std::int64_t position_offset = 0);

enum class ScoreMode { Softmax, Logits };

// Block scores, [num_kv_heads, q_len, num_blocks]. In Logits mode masked
// (future) blocks are -inf; in Softmax mode they are exactly 0 and each row
// sums to 1 over valid blocks.
struct GateScores {
    Tensor s;
    bool softmax = false;
};

// s = qg . kg^T / sqrt(gate_dim), block j valid for the query at absolute
// position p iff j*block_size <= p.
GateScores gate_score(const Tensor& qg, const Tensor& kg, const ModelShape& shape, ScoreMode mode,
                      const std::vector<std::int64_t>& positions);

// Mean over (kv head, query row) of sum_j gt*log(gt/score), scores floored at
// 1e-9 inside the log and 0*log(0/x) taken as 0.
double kl_loss(const GateScores& scores, const GroundTruthMap& gt);

struct GateGrads {
    std::vector<Tensor> w_q;
    std::vector<Tensor> w_k;
};

// One training sample: the gate's pre-rotation inputs plus each query row's
// absolute position.
struct GateSample {
    const Tensor& q_nope;  // [num_q_heads, q_len, d]
    const Tensor& k_nope;  // [num_kv_heads, kv_len, d]
    std::vector<std::int64_t> positions;
};

// Exact analytic gradients of kl_loss with respect to w_q and w_k.
// Recomputes the forward pass; writes the loss to loss_out when given.
GateGrads gate_backward(const GateSample& sample, const GateParams& params,
                        const ModelShape& shape, const GroundTruthMap& gt,
                        double* loss_out = nullptr);

// Checkpoint file: a small text header (version, shape metadata) followed by
// one binary tensor dump per matrix. Round-trips bit-exact; unknown header
// keys are ignored.
void save_checkpoint(const GateParams& params, const ModelShape& shape, const std::string& path);

struct Checkpoint {
    GateParams params;
    ModelShape shape;
};

Checkpoint load_checkpoint(const std::string& path);

}  // namespace seer
