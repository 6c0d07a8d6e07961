#pragma once

#include <cstdint>
#include <vector>

#include "seer/tensor.hpp"

namespace seer {

// Per-head attention inputs. q is [num_q_heads, q_len, d]; k and v are
// [num_kv_heads, kv_len, d]. causal_offset is the absolute position of query
// row 0: the query at absolute position p attends keys [0, p].
struct AttentionInputs {
    Tensor q;
    Tensor k;
    Tensor v;
    std::int64_t causal_offset = 0;
};

// Distillation target. gt is [num_kv_heads, q_len, num_blocks]: per query row
// the per-key-block max attention probability, maxed over the query heads of
// each kv group, then normalized so every row sums to 1 over causally valid
// blocks. Entries for fully-future blocks are exactly 0.
struct GroundTruthMap {
    Tensor gt;
    std::size_t block_size = 0;
};

// Dense grouped-query attention, fully materializing the attention map.
// Reference for every equivalence test. Output is [num_q_heads, q_len, d].
Tensor dense_attention(const AttentionInputs& inp, const ModelShape& shape);

// The full causal softmax attention map, [num_q_heads, q_len, kv_len].
Tensor attention_probs(const AttentionInputs& inp, const ModelShape& shape);

// Flash-style attention: one key block at a time with a running max and
// running sum per row, never materializing the map. Matches dense_attention
// within 1e-4 relative.
Tensor streaming_attention(const AttentionInputs& inp, const ModelShape& shape,
                           std::size_t kv_block);

// Per-query-head, per-query-row max of probs over each key block of size
// `block`: [num_q_heads, q_len, ceil(kv_len/block)].
Tensor block_prob_max(const Tensor& probs, std::size_t block);

// Staged ground truth: materialize the map, 1D-maxpool columns per block,
// max over each kv group's query heads, normalize rows.
GroundTruthMap ground_truth_naive(const AttentionInputs& inp, const ModelShape& shape);

struct FusedResult {
    Tensor out;  // attention output, [num_q_heads, q_len, d]
    GroundTruthMap gt;
};

// Single streaming pass that produces the attention output and the ground
// truth together. Per key block it records the row max of exp(score - m)
// and rescales previously recorded maxima whenever the running max m grows.
FusedResult ground_truth_fused(const AttentionInputs& inp, const ModelShape& shape);

// Variable-length packed batch: q/k/v hold several sequences concatenated
// along the sequence dimension, seq_lens giving each segment's length.
// Segments are causally independent; results are concatenated back.
FusedResult ground_truth_fused_packed(const AttentionInputs& packed,
                                      const std::vector<std::size_t>& seq_lens,
                                      const ModelShape& shape);

}  // namespace seer
