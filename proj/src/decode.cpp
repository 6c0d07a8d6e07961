#include "seer/decode.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "seer/attention.hpp"
#include "seer/errors.hpp"

namespace seer {

namespace {

void check_rows(const Tensor& t, std::size_t heads, std::size_t d, const char* what) {
    if (t.rank() != 3 || t.dim(0) != heads || t.dim(2) != d)
        throw std::invalid_argument(std::string(what) + ": tensor shape mismatch");
}

}  // namespace

KvCache make_kv_cache(const ModelShape& shape) {
    KvCache cache;
    cache.k.resize(shape.num_kv_heads);
    cache.v.resize(shape.num_kv_heads);
    return cache;
}

void kv_append(KvCache& cache, const Tensor& k_rope, const Tensor& v, const ModelShape& shape) {
    check_rows(k_rope, shape.num_kv_heads, shape.head_dim, "kv_append k");
    check_rows(v, shape.num_kv_heads, shape.head_dim, "kv_append v");
    if (k_rope.dim(1) != v.dim(1)) throw std::invalid_argument("kv_append: k/v row count differs");
    const std::size_t n = k_rope.dim(1);
    const std::size_t d = shape.head_dim;
    for (std::size_t h = 0; h < shape.num_kv_heads; ++h) {
        cache.k[h].insert(cache.k[h].end(), k_rope.row(h, 0), k_rope.row(h, 0) + n * d);
        cache.v[h].insert(cache.v[h].end(), v.row(h, 0), v.row(h, 0) + n * d);
    }
    cache.seq_len += n;
}

namespace {

Tensor heads_tensor(const std::vector<std::vector<float>>& rows, std::size_t seq, std::size_t d) {
    Tensor out({rows.size(), seq, d});
    for (std::size_t h = 0; h < rows.size(); ++h)
        std::copy(rows[h].begin(), rows[h].end(), out.row(h, 0));
    return out;
}

}  // namespace

Tensor kv_k_tensor(const KvCache& cache, const ModelShape& shape) {
    if (cache.seq_len == 0) throw std::invalid_argument("kv_k_tensor: empty cache");
    return heads_tensor(cache.k, cache.seq_len, shape.head_dim);
}

Tensor kv_v_tensor(const KvCache& cache, const ModelShape& shape) {
    if (cache.seq_len == 0) throw std::invalid_argument("kv_v_tensor: empty cache");
    return heads_tensor(cache.v, cache.seq_len, shape.head_dim);
}

KCompressionCache make_compression_cache(const ModelShape& shape) {
    KCompressionCache cache;
    cache.compressed.resize(shape.num_kv_heads);
    cache.raw_tail.resize(shape.num_kv_heads);
    return cache;
}

std::size_t compression_num_blocks(const KCompressionCache& cache, const ModelShape& shape) {
    return cache.finalized_len / shape.block_size;
}

void cache_append(KCompressionCache& cache, const Tensor& new_k_rows, const GateParams& params,
                  const ModelShape& shape) {
    check_rows(new_k_rows, shape.num_kv_heads, shape.head_dim, "cache_append");
    const std::size_t d = shape.head_dim;
    const std::size_t b = shape.block_size;
    for (std::size_t r = 0; r < new_k_rows.dim(1); ++r) {
        for (std::size_t h = 0; h < shape.num_kv_heads; ++h) {
            const float* row = new_k_rows.row(h, r);
            cache.raw_tail[h].insert(cache.raw_tail[h].end(), row, row + d);
        }
        if (++cache.tail_len < b) continue;

        // Tail reached a full block: run it through the same path a full-pass
        // gate_forward_k would use, with this block's start as the position.
        Tensor block({shape.num_kv_heads, b, d});
        for (std::size_t h = 0; h < shape.num_kv_heads; ++h)
            std::copy(cache.raw_tail[h].begin(), cache.raw_tail[h].end(), block.row(h, 0));
        const Tensor kg =
            gate_forward_k(block, params, shape, std::int64_t(cache.finalized_len));
        for (std::size_t h = 0; h < shape.num_kv_heads; ++h) {
            cache.compressed[h].insert(cache.compressed[h].end(), kg.row(h, 0),
                                       kg.row(h, 0) + shape.gate_dim);
            cache.raw_tail[h].clear();
        }
        cache.finalized_len += b;
        cache.tail_len = 0;
    }
}

Tensor compressed_tensor(const KCompressionCache& cache, const ModelShape& shape) {
    const std::size_t nb = compression_num_blocks(cache, shape);
    if (nb == 0) throw std::invalid_argument("compressed_tensor: no finalized block");
    return heads_tensor(cache.compressed, nb, shape.gate_dim);
}

QuestMetadata make_quest_metadata(const ModelShape& shape) {
    QuestMetadata meta;
    meta.bmin.resize(shape.num_kv_heads);
    meta.bmax.resize(shape.num_kv_heads);
    return meta;
}

void quest_append(QuestMetadata& meta, const Tensor& k_rope_rows, const ModelShape& shape) {
    check_rows(k_rope_rows, shape.num_kv_heads, shape.head_dim, "quest_append");
    const std::size_t d = shape.head_dim;
    for (std::size_t r = 0; r < k_rope_rows.dim(1); ++r) {
        const bool new_block = meta.seq_len % shape.block_size == 0;
        for (std::size_t h = 0; h < shape.num_kv_heads; ++h) {
            const float* row = k_rope_rows.row(h, r);
            if (new_block) {
                meta.bmin[h].insert(meta.bmin[h].end(), row, row + d);
                meta.bmax[h].insert(meta.bmax[h].end(), row, row + d);
            } else {
                float* lo = meta.bmin[h].data() + meta.bmin[h].size() - d;
                float* hi = meta.bmax[h].data() + meta.bmax[h].size() - d;
                for (std::size_t t = 0; t < d; ++t) {
                    lo[t] = std::min(lo[t], row[t]);
                    hi[t] = std::max(hi[t], row[t]);
                }
            }
        }
        ++meta.seq_len;
    }
}

Tensor quest_scores(const QuestMetadata& meta, const Tensor& q_rope_row, const ModelShape& shape) {
    check_rows(q_rope_row, shape.num_q_heads, shape.head_dim, "quest_scores");
    if (q_rope_row.dim(1) != 1) throw std::invalid_argument("quest_scores: one query row expected");
    if (meta.seq_len == 0) throw std::invalid_argument("quest_scores: empty metadata");
    const std::size_t nb = shape.num_blocks(meta.seq_len);
    const std::size_t d = shape.head_dim;
    const std::size_t g = shape.group_size();
    Tensor out({shape.num_kv_heads, nb});
    for (std::size_t h = 0; h < shape.num_kv_heads; ++h)
        for (std::size_t j = 0; j < nb; ++j) {
            const float* lo = meta.bmin[h].data() + j * d;
            const float* hi = meta.bmax[h].data() + j * d;
            float group_sum = 0.0f;
            for (std::size_t gi = 0; gi < g; ++gi) {
                const float* q = q_rope_row.row(h * g + gi, 0);
                float s = 0.0f;
                for (std::size_t t = 0; t < d; ++t) s += std::max(q[t] * lo[t], q[t] * hi[t]);
                group_sum += s;
            }
            out.at(h, j) = group_sum;
        }
    return out;
}

PolicyMode policy_mode_from_string(const std::string& name) {
    if (name == "budget") return PolicyMode::Budget;
    if (name == "threshold") return PolicyMode::Threshold;
    if (name == "oracle") return PolicyMode::Oracle;
    if (name == "quest") return PolicyMode::Quest;
    throw DataError("unknown policy mode: " + name);
}

const char* to_string(PolicyMode mode) {
    switch (mode) {
        case PolicyMode::Budget: return "budget";
        case PolicyMode::Threshold: return "threshold";
        case PolicyMode::Oracle: return "oracle";
        case PolicyMode::Quest: return "quest";
    }
    return "?";
}

void SparsifyPolicy::validate(const ModelShape& shape) const {
    if (mode == PolicyMode::Threshold) {
        if (!(threshold > 0.0f) || !(threshold < 1.0f))
            throw std::invalid_argument("threshold must be in (0, 1)");
    } else {
        if (budget_tokens < shape.block_size)
            throw std::invalid_argument("budget must be at least one block of tokens");
    }
}

BlockSelection select_blocks(const SparsifyPolicy& policy,
                             const std::vector<std::vector<float>>& scores, bool softmax_scores,
                             std::size_t seq_len, const ModelShape& shape) {
    policy.validate(shape);
    if (seq_len == 0) throw std::invalid_argument("select_blocks: empty sequence");
    if (scores.size() != shape.num_kv_heads)
        throw std::invalid_argument("select_blocks: one score row per kv head required");
    const std::size_t nb = shape.num_blocks(seq_len);
    const std::size_t newest = (seq_len - 1) / shape.block_size;
    if (policy.mode == PolicyMode::Threshold && !softmax_scores)
        throw std::invalid_argument("select_blocks: threshold mode needs softmax scores");

    BlockSelection sel;
    sel.num_blocks = nb;
    sel.blocks.resize(shape.num_kv_heads);
    for (std::size_t h = 0; h < shape.num_kv_heads; ++h) {
        const std::vector<float>& row = scores[h];
        if (row.size() > nb)
            throw std::invalid_argument("select_blocks: more scores than blocks");
        std::vector<std::size_t>& out = sel.blocks[h];

        if (policy.mode == PolicyMode::Threshold) {
            for (std::size_t j = 0; j < row.size(); ++j)
                if (row[j] >= policy.threshold) out.push_back(j);
        } else {
            const std::size_t k = policy.budget_tokens / shape.block_size;
            // The forced newest block occupies one budget slot.
            std::vector<float> cand_scores;
            std::vector<std::size_t> cand_index;
            for (std::size_t j = 0; j < row.size(); ++j) {
                if (j == newest) continue;
                cand_scores.push_back(row[j]);
                cand_index.push_back(j);
            }
            for (std::size_t r : topk_indices(cand_scores, k - 1)) out.push_back(cand_index[r]);
        }

        out.push_back(newest);
        std::sort(out.begin(), out.end());
        out.erase(std::unique(out.begin(), out.end()), out.end());
        sel.max_selected_blocks = std::max(sel.max_selected_blocks, out.size());
    }
    return sel;
}

namespace {

struct Partial {
    float m = -std::numeric_limits<float>::infinity();
    float l = 0.0f;
    std::vector<float> acc;
};

}  // namespace

Tensor sparse_decode(const Tensor& q_row, const KvCache& cache, const BlockSelection& selection,
                     const ModelShape& shape, std::size_t num_split) {
    check_rows(q_row, shape.num_q_heads, shape.head_dim, "sparse_decode");
    if (q_row.dim(1) != 1) throw std::invalid_argument("sparse_decode: one query row expected");
    if (cache.seq_len == 0) throw std::invalid_argument("sparse_decode: empty cache");
    if (selection.blocks.size() != shape.num_kv_heads)
        throw std::invalid_argument("sparse_decode: selection head count mismatch");
    const std::size_t nb = shape.num_blocks(cache.seq_len);
    for (const auto& list : selection.blocks)
        for (std::size_t j : list)
            if (j >= nb) throw std::invalid_argument("sparse_decode: selected block out of range");
    if (selection.max_selected_blocks == 0)
        throw std::invalid_argument("sparse_decode: empty selection");

    if (num_split == 0) num_split = (selection.max_selected_blocks + 7) / 8;
    const std::size_t chunk = (selection.max_selected_blocks + num_split - 1) / num_split;

    const std::size_t d = shape.head_dim;
    const std::size_t g = shape.group_size();
    const float scale = 1.0f / std::sqrt(float(d));
    Tensor out({shape.num_q_heads, 1, d});

    for (std::size_t h = 0; h < shape.num_kv_heads; ++h) {
        const std::vector<std::size_t>& list = selection.blocks[h];
        for (std::size_t gi = 0; gi < g; ++gi) {
            const float* q = q_row.row(h * g + gi, 0);

            Partial merged;
            merged.acc.assign(d, 0.0f);
            for (std::size_t s = 0; s < num_split; ++s) {
                const std::size_t lo = s * chunk;
                const std::size_t hi = std::min(lo + chunk, list.size());
                if (lo >= hi) continue;  // short selection: skip the empty split

                Partial part;
                part.acc.assign(d, 0.0f);
                for (std::size_t slot = lo; slot < hi; ++slot) {
                    const std::size_t j = list[slot];
                    const std::size_t row_lo = j * shape.block_size;
                    const std::size_t row_hi =
                        std::min(row_lo + shape.block_size, cache.seq_len);
                    for (std::size_t r = row_lo; r < row_hi; ++r) {
                        const float* krow = cache.k[h].data() + r * d;
                        float z = 0.0f;
                        for (std::size_t t = 0; t < d; ++t) z += q[t] * krow[t];
                        z *= scale;
                        if (z > part.m) {
                            const float f = std::exp(part.m - z);
                            part.l *= f;
                            for (std::size_t t = 0; t < d; ++t) part.acc[t] *= f;
                            part.m = z;
                        }
                        const float w = std::exp(z - part.m);
                        part.l += w;
                        const float* vrow = cache.v[h].data() + r * d;
                        for (std::size_t t = 0; t < d; ++t) part.acc[t] += w * vrow[t];
                    }
                }

                // log-sum-exp merge, fixed ascending split order
                const float m_new = std::max(merged.m, part.m);
                const float f_old = merged.l > 0.0f ? std::exp(merged.m - m_new) : 0.0f;
                const float f_new = std::exp(part.m - m_new);
                merged.l = merged.l * f_old + part.l * f_new;
                for (std::size_t t = 0; t < d; ++t)
                    merged.acc[t] = merged.acc[t] * f_old + part.acc[t] * f_new;
                merged.m = m_new;
            }

            if (!(merged.l > 0.0f)) throw NumericError("sparse_decode: zero attention mass");
            float* orow = out.row(h * g + gi, 0);
            for (std::size_t t = 0; t < d; ++t) orow[t] = merged.acc[t] / merged.l;
        }
    }
    return out;
}

DecodeSession::DecodeSession(const ModelShape& shape, GateParams params)
    : shape_(shape),
      params_(std::move(params)),
      kv_(make_kv_cache(shape)),
      ccache_(make_compression_cache(shape)),
      quest_(make_quest_metadata(shape)) {
    shape_.validate();
}

void DecodeSession::prefill(const Tensor& k_nope, const Tensor& v) {
    check_rows(k_nope, shape_.num_kv_heads, shape_.head_dim, "prefill k");
    const std::size_t n = k_nope.dim(1);
    std::vector<std::int64_t> pos(n);
    for (std::size_t i = 0; i < n; ++i) pos[i] = std::int64_t(kv_.seq_len + i);
    const Tensor k_rope = rope_heads(k_nope, pos, shape_.rope_theta);
    kv_append(kv_, k_rope, v, shape_);
    quest_append(quest_, k_rope, shape_);
    cache_append(ccache_, k_nope, params_, shape_);
}

Tensor DecodeSession::oracle_row(const Tensor& q_rope_row) const {
    AttentionInputs inp;
    inp.q = q_rope_row;
    inp.k = kv_k_tensor(kv_, shape_);
    inp.v = kv_v_tensor(kv_, shape_);
    inp.causal_offset = kv_.seq_len - 1;
    const GroundTruthMap gt = ground_truth_naive(inp, shape_);
    Tensor row({shape_.num_kv_heads, gt.gt.dim(2)});
    for (std::size_t h = 0; h < shape_.num_kv_heads; ++h) {
        const float* src = gt.gt.row(h, 0);
        std::copy(src, src + gt.gt.dim(2), row.row(h));
    }
    return row;
}

StepResult DecodeSession::step(const Tensor& q_row_nope, const Tensor& k_row_nope,
                               const Tensor& v_row, const SparsifyPolicy& policy,
                               std::size_t num_split) {
    policy.validate(shape_);
    check_rows(q_row_nope, shape_.num_q_heads, shape_.head_dim, "step q");
    if (q_row_nope.dim(1) != 1) throw std::invalid_argument("step: one row per step");

    const std::vector<std::int64_t> pos{std::int64_t(kv_.seq_len)};
    const Tensor k_rope = rope_heads(k_row_nope, pos, shape_.rope_theta);
    kv_append(kv_, k_rope, v_row, shape_);
    quest_append(quest_, k_rope, shape_);
    cache_append(ccache_, k_row_nope, params_, shape_);

    const Tensor q_rope = rope_heads(q_row_nope, pos, shape_.rope_theta);
    const std::size_t seq = kv_.seq_len;

    std::vector<std::vector<float>> scores(shape_.num_kv_heads);
    bool softmax_scores = false;
    switch (policy.mode) {
        case PolicyMode::Budget:
        case PolicyMode::Threshold: {
            const std::size_t nb_fin = compression_num_blocks(ccache_, shape_);
            if (nb_fin > 0) {
                const Tensor qg = gate_forward_q(q_row_nope, params_, shape_, pos);
                const Tensor kg = compressed_tensor(ccache_, shape_);
                const ScoreMode mode = policy.mode == PolicyMode::Threshold ? ScoreMode::Softmax
                                                                            : ScoreMode::Logits;
                const GateScores gs = gate_score(qg, kg, shape_, mode, pos);
                softmax_scores = gs.softmax;
                for (std::size_t h = 0; h < shape_.num_kv_heads; ++h)
                    scores[h].assign(gs.s.row(h, 0), gs.s.row(h, 0) + nb_fin);
            } else {
                softmax_scores = policy.mode == PolicyMode::Threshold;
            }
            break;
        }
        case PolicyMode::Oracle: {
            const Tensor gt = oracle_row(q_rope);
            for (std::size_t h = 0; h < shape_.num_kv_heads; ++h)
                scores[h].assign(gt.row(h), gt.row(h) + gt.dim(1));
            break;
        }
        case PolicyMode::Quest: {
            const Tensor qs = quest_scores(quest_, q_rope, shape_);
            for (std::size_t h = 0; h < shape_.num_kv_heads; ++h)
                scores[h].assign(qs.row(h), qs.row(h) + qs.dim(1));
            break;
        }
    }

    StepResult result;
    result.selection = select_blocks(policy, scores, softmax_scores, seq, shape_);
    result.out = sparse_decode(q_rope, kv_, result.selection, shape_, num_split);
    for (std::size_t h = 0; h < shape_.num_kv_heads; ++h) {
        std::size_t tokens = 0;
        for (std::size_t j : result.selection.blocks[h])
            tokens += std::min((j + 1) * shape_.block_size, seq) - j * shape_.block_size;
        result.activated_tokens = std::max(result.activated_tokens, tokens);
    }
    return result;
}

}  // namespace seer
