#pragma once

#include <cstdint>
#include <vector>

#include "seer/gate.hpp"
#include "seer/tensor.hpp"

namespace seer {

// Append-only per-head KV store for a decode session. Key rows are post-RoPE.
struct KvCache {
    std::size_t seq_len = 0;
    std::vector<std::vector<float>> k;  // per kv head, seq_len*d floats
    std::vector<std::vector<float>> v;
};

KvCache make_kv_cache(const ModelShape& shape);

// new rows: k_rope/v are [num_kv_heads, n, d]
void kv_append(KvCache& cache, const Tensor& k_rope, const Tensor& v, const ModelShape& shape);

Tensor kv_k_tensor(const KvCache& cache, const ModelShape& shape);  // [num_kv_heads, seq, d]
Tensor kv_v_tensor(const KvCache& cache, const ModelShape& shape);

// Compressed-key cache. Pending pre-RoPE rows accumulate in raw_tail; every
// time b rows are buffered they run through gate_forward_k as one block and
// the tail clears, so finalized state never depends on append batching.
struct KCompressionCache {
    std::size_t finalized_len = 0;
    std::size_t tail_len = 0;
    std::vector<std::vector<float>> compressed;  // per kv head, num_blocks*gate_dim
    std::vector<std::vector<float>> raw_tail;    // per kv head, tail_len*d, pre-RoPE
};

KCompressionCache make_compression_cache(const ModelShape& shape);

std::size_t compression_num_blocks(const KCompressionCache& cache, const ModelShape& shape);

// new_k_rows: [num_kv_heads, n, d] pre-RoPE key rows in sequence order.
void cache_append(KCompressionCache& cache, const Tensor& new_k_rows, const GateParams& params,
                  const ModelShape& shape);

// [num_kv_heads, num_finalized_blocks, gate_dim]; throws if no block is final.
Tensor compressed_tensor(const KCompressionCache& cache, const ModelShape& shape);

// Per-block min/max envelopes of post-RoPE keys, for the Quest baseline.
// The trailing partial block's envelope covers its available rows.
struct QuestMetadata {
    std::size_t seq_len = 0;
    std::vector<std::vector<float>> bmin;  // per kv head, num_blocks*d
    std::vector<std::vector<float>> bmax;
};

QuestMetadata make_quest_metadata(const ModelShape& shape);

void quest_append(QuestMetadata& meta, const Tensor& k_rope_rows, const ModelShape& shape);

// Upper-bound block scores sum_t max(q_t*min_t, q_t*max_t), computed per
// q-head then summed over each kv group: [num_kv_heads, num_blocks].
Tensor quest_scores(const QuestMetadata& meta, const Tensor& q_rope_row, const ModelShape& shape);

enum class PolicyMode { Budget, Threshold, Oracle, Quest };

PolicyMode policy_mode_from_string(const std::string& name);
const char* to_string(PolicyMode mode);

struct SparsifyPolicy {
    PolicyMode mode = PolicyMode::Budget;
    std::size_t budget_tokens = 0;  // Budget / Oracle / Quest
    float threshold = 0.0f;         // Threshold

    void validate(const ModelShape& shape) const;
};

struct BlockSelection {
    std::vector<std::vector<std::size_t>> blocks;  // per kv head, strictly increasing
    std::size_t max_selected_blocks = 0;
    std::size_t num_blocks = 0;  // blocks in the sequence at selection time
};

// scores[h] covers blocks [0, scores[h].size()); during decode that is the
// finalized prefix only. The newest block is always unioned in. Budget-family
// modes keep the top budget/b blocks (the forced newest one counts against
// the budget); threshold mode needs softmax scores and keeps those >= t.
BlockSelection select_blocks(const SparsifyPolicy& policy,
                             const std::vector<std::vector<float>>& scores, bool softmax_scores,
                             std::size_t seq_len, const ModelShape& shape);

// One-token block-sparse attention. q_row [num_q_heads, 1, d] is the
// post-RoPE query of the newest position (everything cached is visible).
// Selected blocks are partitioned into num_split chunks of
// ceil(max_selected_blocks/num_split) list slots; each chunk yields a partial
// (out, m, l) merged in ascending chunk order; empty chunks are skipped.
// num_split 0 picks the default ceil(max_selected_blocks/8).
Tensor sparse_decode(const Tensor& q_row, const KvCache& cache, const BlockSelection& selection,
                     const ModelShape& shape, std::size_t num_split = 0);

struct StepResult {
    Tensor out;  // [num_q_heads, 1, d]
    BlockSelection selection;
    std::size_t activated_tokens = 0;  // max over kv heads of selected token count
};

// Single-writer autoregressive session; owns all three caches.
class DecodeSession {
  public:
    DecodeSession(const ModelShape& shape, GateParams params);

    // Prefix rows [*, n, d], pre-RoPE k. Fills caches only; no outputs.
    void prefill(const Tensor& k_nope, const Tensor& v);

    // One step: append k/v (rotating k at its position), update compression
    // and Quest caches, score, select, sparse-decode.
    StepResult step(const Tensor& q_row_nope, const Tensor& k_row_nope, const Tensor& v_row,
                    const SparsifyPolicy& policy, std::size_t num_split = 0);

    std::size_t seq_len() const { return kv_.seq_len; }
    const KvCache& kv() const { return kv_; }
    const KCompressionCache& compression() const { return ccache_; }
    const QuestMetadata& quest() const { return quest_; }
    const ModelShape& shape() const { return shape_; }
    const GateParams& params() const { return params_; }

    // Ground-truth row of the newest position over the current cache,
    // [num_kv_heads, num_blocks]; the oracle policy and eval metrics use it.
    Tensor oracle_row(const Tensor& q_rope_row) const;

  private:
    ModelShape shape_;
    GateParams params_;
    KvCache kv_;
    KCompressionCache ccache_;
    QuestMetadata quest_;
};

}  // namespace seer
