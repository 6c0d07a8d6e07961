#include "seer/attention.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "seer/errors.hpp"

namespace seer {

namespace {

void validate_inputs(const AttentionInputs& inp, const ModelShape& shape) {
    shape.validate();
    if (inp.q.rank() != 3 || inp.k.rank() != 3 || inp.v.rank() != 3)
        throw std::invalid_argument("attention: q/k/v must be rank-3");
    if (inp.q.shape[0] != shape.num_q_heads) throw std::invalid_argument("attention: q head count");
    if (inp.k.shape[0] != shape.num_kv_heads || inp.v.shape[0] != shape.num_kv_heads)
        throw std::invalid_argument("attention: kv head count");
    if (inp.q.shape[2] != shape.head_dim || inp.k.shape[2] != shape.head_dim ||
        inp.v.shape[2] != shape.head_dim)
        throw std::invalid_argument("attention: head_dim mismatch");
    if (inp.k.shape[1] != inp.v.shape[1]) throw std::invalid_argument("attention: kv_len mismatch");
    if (inp.causal_offset < 0) throw std::invalid_argument("attention: negative causal_offset");
}

inline float dot(const float* a, const float* b, std::size_t d) {
    float s = 0.0f;
    for (std::size_t c = 0; c < d; ++c) s += a[c] * b[c];
    return s;
}

}  // namespace

Tensor attention_probs(const AttentionInputs& inp, const ModelShape& shape) {
    validate_inputs(inp, shape);
    const std::size_t hq = shape.num_q_heads, g = shape.group_size();
    const std::size_t q_len = inp.q.shape[1], kv_len = inp.k.shape[1], d = shape.head_dim;
    const float scale = 1.0f / std::sqrt(float(d));
    Tensor probs({hq, q_len, kv_len});
    for (std::size_t h = 0; h < hq; ++h) {
        const std::size_t kvh = h / g;
        for (std::size_t i = 0; i < q_len; ++i) {
            const std::int64_t p = inp.causal_offset + std::int64_t(i);
            const std::size_t valid = std::min(std::size_t(p) + 1, kv_len);
            const float* qrow = inp.q.row(h, i);
            float* prow = probs.row(h, i);
            float mx = -std::numeric_limits<float>::infinity();
            for (std::size_t t = 0; t < valid; ++t) {
                prow[t] = dot(qrow, inp.k.row(kvh, t), d) * scale;
                mx = std::max(mx, prow[t]);
            }
            float sum = 0.0f;
            for (std::size_t t = 0; t < valid; ++t) {
                prow[t] = std::exp(prow[t] - mx);
                sum += prow[t];
            }
            for (std::size_t t = 0; t < valid; ++t) prow[t] /= sum;
            for (std::size_t t = valid; t < kv_len; ++t) prow[t] = 0.0f;
        }
    }
    check_finite(probs, "attention_probs");
    return probs;
}

Tensor dense_attention(const AttentionInputs& inp, const ModelShape& shape) {
    const Tensor probs = attention_probs(inp, shape);
    const std::size_t hq = shape.num_q_heads, g = shape.group_size();
    const std::size_t q_len = inp.q.shape[1], kv_len = inp.k.shape[1], d = shape.head_dim;
    Tensor out({hq, q_len, d});
    for (std::size_t h = 0; h < hq; ++h) {
        const std::size_t kvh = h / g;
        for (std::size_t i = 0; i < q_len; ++i) {
            const float* prow = probs.row(h, i);
            float* orow = out.row(h, i);
            for (std::size_t t = 0; t < kv_len; ++t) {
                const float w = prow[t];
                if (w == 0.0f) continue;
                const float* vrow = inp.v.row(kvh, t);
                for (std::size_t c = 0; c < d; ++c) orow[c] += w * vrow[c];
            }
        }
    }
    check_finite(out, "dense_attention");
    return out;
}

Tensor streaming_attention(const AttentionInputs& inp, const ModelShape& shape,
                           std::size_t kv_block) {
    validate_inputs(inp, shape);
    if (kv_block == 0) throw std::invalid_argument("streaming_attention: kv_block must be positive");
    const std::size_t hq = shape.num_q_heads, g = shape.group_size();
    const std::size_t q_len = inp.q.shape[1], kv_len = inp.k.shape[1], d = shape.head_dim;
    const float scale = 1.0f / std::sqrt(float(d));
    const std::size_t nb = (kv_len + kv_block - 1) / kv_block;
    Tensor out({hq, q_len, d});
    std::vector<float> acc(d), s(kv_block);
    for (std::size_t h = 0; h < hq; ++h) {
        const std::size_t kvh = h / g;
        for (std::size_t i = 0; i < q_len; ++i) {
            const std::int64_t p = inp.causal_offset + std::int64_t(i);
            const std::size_t valid = std::min(std::size_t(p) + 1, kv_len);
            const float* qrow = inp.q.row(h, i);
            float m = -std::numeric_limits<float>::infinity();
            float l = 0.0f;
            std::fill(acc.begin(), acc.end(), 0.0f);
            for (std::size_t bi = 0; bi < nb; ++bi) {
                const std::size_t lo = bi * kv_block;
                const std::size_t hi = std::min({lo + kv_block, kv_len, valid});
                if (lo >= hi) break;  // fully future block, as is everything after
                float bm = -std::numeric_limits<float>::infinity();
                for (std::size_t t = lo; t < hi; ++t) {
                    s[t - lo] = dot(qrow, inp.k.row(kvh, t), d) * scale;
                    bm = std::max(bm, s[t - lo]);
                }
                const float m_new = std::max(m, bm);
                const float f = std::exp(m - m_new);  // 0 when m was -inf
                l *= f;
                for (std::size_t c = 0; c < d; ++c) acc[c] *= f;
                for (std::size_t t = lo; t < hi; ++t) {
                    const float e = std::exp(s[t - lo] - m_new);
                    l += e;
                    const float* vrow = inp.v.row(kvh, t);
                    for (std::size_t c = 0; c < d; ++c) acc[c] += e * vrow[c];
                }
                m = m_new;
            }
            float* orow = out.row(h, i);
            for (std::size_t c = 0; c < d; ++c) orow[c] = acc[c] / l;
        }
    }
    check_finite(out, "streaming_attention");
    return out;
}

Tensor block_prob_max(const Tensor& probs, std::size_t block) {
    if (probs.rank() != 3) throw std::invalid_argument("block_prob_max: rank-3 tensor required");
    if (block == 0) throw std::invalid_argument("block_prob_max: block size must be positive");
    const std::size_t hq = probs.shape[0], q_len = probs.shape[1], kv_len = probs.shape[2];
    const std::size_t nb = (kv_len + block - 1) / block;
    Tensor out({hq, q_len, nb});
    for (std::size_t h = 0; h < hq; ++h) {
        for (std::size_t i = 0; i < q_len; ++i) {
            const float* prow = probs.row(h, i);
            float* orow = out.row(h, i);
            for (std::size_t bi = 0; bi < nb; ++bi) {
                const std::size_t lo = bi * block;
                const std::size_t hi = std::min(lo + block, kv_len);
                float mx = 0.0f;  // probabilities are non-negative
                for (std::size_t t = lo; t < hi; ++t) mx = std::max(mx, prow[t]);
                orow[bi] = mx;
            }
        }
    }
    return out;
}

GroundTruthMap ground_truth_naive(const AttentionInputs& inp, const ModelShape& shape) {
    const Tensor probs = attention_probs(inp, shape);
    const Tensor bm = block_prob_max(probs, shape.block_size);
    const std::size_t g = shape.group_size();
    const std::size_t hkv = shape.num_kv_heads, q_len = bm.shape[1], nb = bm.shape[2];
    GroundTruthMap res;
    res.block_size = shape.block_size;
    res.gt = Tensor({hkv, q_len, nb});
    for (std::size_t kvh = 0; kvh < hkv; ++kvh) {
        for (std::size_t i = 0; i < q_len; ++i) {
            float* row = res.gt.row(kvh, i);
            for (std::size_t j = 0; j < nb; ++j) {
                float mx = 0.0f;
                for (std::size_t a = 0; a < g; ++a) mx = std::max(mx, bm.at(kvh * g + a, i, j));
                row[j] = mx;
            }
            float sum = 0.0f;
            for (std::size_t j = 0; j < nb; ++j) sum += row[j];
            if (!(sum > 0.0f)) throw NumericError("ground_truth_naive: zero row mass");
            for (std::size_t j = 0; j < nb; ++j) row[j] /= sum;
        }
    }
    check_finite(res.gt, "ground_truth_naive");
    return res;
}

FusedResult ground_truth_fused(const AttentionInputs& inp, const ModelShape& shape) {
    validate_inputs(inp, shape);
    const std::size_t hq = shape.num_q_heads, g = shape.group_size();
    const std::size_t hkv = shape.num_kv_heads;
    const std::size_t q_len = inp.q.shape[1], kv_len = inp.k.shape[1], d = shape.head_dim;
    const std::size_t b = shape.block_size;
    const std::size_t nb = (kv_len + b - 1) / b;
    const float scale = 1.0f / std::sqrt(float(d));

    FusedResult res;
    res.out = Tensor({hq, q_len, d});
    res.gt.block_size = b;
    res.gt.gt = Tensor({hkv, q_len, nb});
    Tensor head_max({hq, q_len, nb});  // per-q-head block max probabilities

    std::vector<float> acc(d), s(b);
    std::vector<float> r(nb);  // per-block row max of exp(score - running max)
    for (std::size_t h = 0; h < hq; ++h) {
        const std::size_t kvh = h / g;
        for (std::size_t i = 0; i < q_len; ++i) {
            const std::int64_t p = inp.causal_offset + std::int64_t(i);
            const std::size_t valid = std::min(std::size_t(p) + 1, kv_len);
            const float* qrow = inp.q.row(h, i);
            float m = -std::numeric_limits<float>::infinity();
            float l = 0.0f;
            std::fill(acc.begin(), acc.end(), 0.0f);
            std::fill(r.begin(), r.end(), 0.0f);
            for (std::size_t bi = 0; bi < nb; ++bi) {
                const std::size_t lo = bi * b;
                const std::size_t hi = std::min({lo + b, kv_len, valid});
                if (lo >= hi) break;
                float bm = -std::numeric_limits<float>::infinity();
                for (std::size_t t = lo; t < hi; ++t) {
                    s[t - lo] = dot(qrow, inp.k.row(kvh, t), d) * scale;
                    bm = std::max(bm, s[t - lo]);
                }
                const float m_new = std::max(m, bm);
                if (m_new > m) {
                    const float f = std::exp(m - m_new);
                    l *= f;
                    for (std::size_t c = 0; c < d; ++c) acc[c] *= f;
                    for (std::size_t j = 0; j < bi; ++j) r[j] *= f;
                }
                r[bi] = std::exp(bm - m_new);
                for (std::size_t t = lo; t < hi; ++t) {
                    const float e = std::exp(s[t - lo] - m_new);
                    l += e;
                    const float* vrow = inp.v.row(kvh, t);
                    for (std::size_t c = 0; c < d; ++c) acc[c] += e * vrow[c];
                }
                m = m_new;
            }
            float* orow = res.out.row(h, i);
            for (std::size_t c = 0; c < d; ++c) orow[c] = acc[c] / l;
            float* hm = head_max.row(h, i);
            for (std::size_t j = 0; j < nb; ++j) hm[j] = r[j] / l;
        }
    }

    for (std::size_t kvh = 0; kvh < hkv; ++kvh) {
        for (std::size_t i = 0; i < q_len; ++i) {
            float* row = res.gt.gt.row(kvh, i);
            for (std::size_t j = 0; j < nb; ++j) {
                float mx = 0.0f;
                for (std::size_t a = 0; a < g; ++a) mx = std::max(mx, head_max.at(kvh * g + a, i, j));
                row[j] = mx;
            }
            float sum = 0.0f;
            for (std::size_t j = 0; j < nb; ++j) sum += row[j];
            if (!(sum > 0.0f)) throw NumericError("ground_truth_fused: zero row mass");
            for (std::size_t j = 0; j < nb; ++j) row[j] /= sum;
        }
    }
    check_finite(res.out, "ground_truth_fused");
    check_finite(res.gt.gt, "ground_truth_fused");
    return res;
}

FusedResult ground_truth_fused_packed(const AttentionInputs& packed,
                                      const std::vector<std::size_t>& seq_lens,
                                      const ModelShape& shape) {
    validate_inputs(packed, shape);
    std::size_t total = 0;
    for (std::size_t len : seq_lens) {
        if (len == 0) throw std::invalid_argument("packed segment length must be positive");
        total += len;
    }
    if (total != packed.q.shape[1] || total != packed.k.shape[1])
        throw std::invalid_argument("packed segment lengths do not sum to sequence length");

    const std::size_t hq = shape.num_q_heads, hkv = shape.num_kv_heads, d = shape.head_dim;
    const std::size_t b = shape.block_size;
    const std::size_t nb_max = (*std::max_element(seq_lens.begin(), seq_lens.end()) + b - 1) / b;
    FusedResult res;
    res.out = Tensor({hq, total, d});
    res.gt.block_size = b;
    res.gt.gt = Tensor({hkv, total, nb_max});

    std::size_t start = 0;
    for (std::size_t len : seq_lens) {
        AttentionInputs seg;
        seg.q = Tensor({hq, len, d});
        seg.k = Tensor({hkv, len, d});
        seg.v = Tensor({hkv, len, d});
        seg.causal_offset = 0;
        for (std::size_t h = 0; h < hq; ++h)
            for (std::size_t i = 0; i < len; ++i)
                std::copy_n(packed.q.row(h, start + i), d, seg.q.row(h, i));
        for (std::size_t h = 0; h < hkv; ++h)
            for (std::size_t i = 0; i < len; ++i) {
                std::copy_n(packed.k.row(h, start + i), d, seg.k.row(h, i));
                std::copy_n(packed.v.row(h, start + i), d, seg.v.row(h, i));
            }
        FusedResult seg_res = ground_truth_fused(seg, shape);
        const std::size_t nb = (len + b - 1) / b;
        for (std::size_t h = 0; h < hq; ++h)
            for (std::size_t i = 0; i < len; ++i)
                std::copy_n(seg_res.out.row(h, i), d, res.out.row(h, start + i));
        for (std::size_t h = 0; h < hkv; ++h)
            for (std::size_t i = 0; i < len; ++i)
                std::copy_n(seg_res.gt.gt.row(h, i), nb, res.gt.gt.row(h, start + i));
        start += len;
    }
    return res;
}

}  // namespace seer
