#include "seer/gate.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "seer/errors.hpp"
#include "seer/rng.hpp"
#include "seer/tensor_io.hpp"

namespace seer {

namespace {

// One kv group's query heads concatenated per row: [q_len, g*d], head-major.
Tensor group_queries(const Tensor& q_nope, const ModelShape& shape, std::size_t kv_head) {
    const std::size_t g = shape.group_size();
    const std::size_t d = shape.head_dim;
    const std::size_t q_len = q_nope.dim(1);
    Tensor x({q_len, g * d});
    for (std::size_t i = 0; i < q_len; ++i)
        for (std::size_t gi = 0; gi < g; ++gi) {
            const float* src = q_nope.row(kv_head * g + gi, i);
            std::copy(src, src + d, x.row(i) + gi * d);
        }
    return x;
}

// One kv head's pooled blocks: [num_blocks, 3*d] as max|min|avg.
Tensor pooled_keys(const Tensor& k_nope, const ModelShape& shape, std::size_t kv_head) {
    const std::size_t d = shape.head_dim;
    const std::size_t kv_len = k_nope.dim(1);
    Tensor rows({kv_len, d});
    const float* src = k_nope.row(kv_head, 0);
    std::copy(src, src + kv_len * d, rows.data.begin());
    const Tensor pmax = block_pool(rows, shape.block_size, PoolKind::Max);
    const Tensor pmin = block_pool(rows, shape.block_size, PoolKind::Min);
    const Tensor pavg = block_pool(rows, shape.block_size, PoolKind::Avg);
    const std::size_t nb = pmax.dim(0);
    Tensor p({nb, 3 * d});
    for (std::size_t j = 0; j < nb; ++j) {
        std::copy(pmax.row(j), pmax.row(j) + d, p.row(j));
        std::copy(pmin.row(j), pmin.row(j) + d, p.row(j) + d);
        std::copy(pavg.row(j), pavg.row(j) + d, p.row(j) + 2 * d);
    }
    return p;
}

std::vector<std::int64_t> block_positions(std::size_t nb, std::size_t block,
                                          std::int64_t offset) {
    std::vector<std::int64_t> pos(nb);
    for (std::size_t j = 0; j < nb; ++j) pos[j] = offset + std::int64_t(j * block);
    return pos;
}

std::vector<std::int64_t> negated(const std::vector<std::int64_t>& pos) {
    std::vector<std::int64_t> neg(pos.size());
    for (std::size_t i = 0; i < pos.size(); ++i) neg[i] = -pos[i];
    return neg;
}

std::size_t valid_blocks(std::int64_t p, std::size_t block, std::size_t nb) {
    if (p < 0) throw std::invalid_argument("gate_score: negative query position");
    return std::min(nb, std::size_t(p) / block + 1);
}

constexpr double kScoreFloor = 1e-9;

}  // namespace

GateParams init_gate_params(const ModelShape& shape, std::uint64_t seed) {
    shape.validate();
    GateParams params;
    params.w_q.reserve(shape.num_kv_heads);
    params.w_k.reserve(shape.num_kv_heads);
    Rng rng(seed);
    // All w_q in head order, then all w_k: the order is part of the
    // reproducibility contract (same seed, same weights).
    const std::size_t fan_q = shape.group_size() * shape.head_dim;
    const double bound_q = 1.0 / std::sqrt(double(fan_q));
    for (std::size_t h = 0; h < shape.num_kv_heads; ++h) {
        Tensor w({shape.gate_dim, fan_q});
        for (float& v : w.data) v = float(rng.uniform(-bound_q, bound_q));
        params.w_q.push_back(std::move(w));
    }
    const std::size_t fan_k = 3 * shape.head_dim;
    const double bound_k = 1.0 / std::sqrt(double(fan_k));
    for (std::size_t h = 0; h < shape.num_kv_heads; ++h) {
        Tensor w({shape.gate_dim, fan_k});
        for (float& v : w.data) v = float(rng.uniform(-bound_k, bound_k));
        params.w_k.push_back(std::move(w));
    }
    return params;
}

Tensor gate_forward_q(const Tensor& q_nope, const GateParams& params, const ModelShape& shape,
                      const std::vector<std::int64_t>& positions) {
    if (q_nope.rank() != 3 || q_nope.dim(0) != shape.num_q_heads ||
        q_nope.dim(2) != shape.head_dim)
        throw std::invalid_argument("gate_forward_q: query tensor shape mismatch");
    if (params.w_q.size() != shape.num_kv_heads)
        throw std::invalid_argument("gate_forward_q: param head count mismatch");
    const std::size_t q_len = q_nope.dim(1);
    if (positions.size() != q_len)
        throw std::invalid_argument("gate_forward_q: positions length mismatch");
    Tensor out({shape.num_kv_heads, q_len, shape.gate_dim});
    for (std::size_t h = 0; h < shape.num_kv_heads; ++h) {
        const Tensor x = group_queries(q_nope, shape, h);
        Tensor z = matmul(x, transpose2d(params.w_q[h]));
        if (params.use_rope) z = rope_apply(z, positions, shape.rope_theta);
        std::copy(z.data.begin(), z.data.end(), out.row(h, 0));
    }
    return out;
}

Tensor gate_forward_k(const Tensor& k_nope, const GateParams& params, const ModelShape& shape,
                      std::int64_t position_offset) {
    if (k_nope.rank() != 3 || k_nope.dim(0) != shape.num_kv_heads ||
        k_nope.dim(2) != shape.head_dim)
        throw std::invalid_argument("gate_forward_k: key tensor shape mismatch");
    if (params.w_k.size() != shape.num_kv_heads)
        throw std::invalid_argument("gate_forward_k: param head count mismatch");
    const std::size_t nb = shape.num_blocks(k_nope.dim(1));
    const std::vector<std::int64_t> pos = block_positions(nb, shape.block_size, position_offset);
    Tensor out({shape.num_kv_heads, nb, shape.gate_dim});
    for (std::size_t h = 0; h < shape.num_kv_heads; ++h) {
        const Tensor p = pooled_keys(k_nope, shape, h);
        Tensor z = matmul(p, transpose2d(params.w_k[h]));
        if (params.use_rope) z = rope_apply(z, pos, shape.rope_theta);
        std::copy(z.data.begin(), z.data.end(), out.row(h, 0));
    }
    return out;
}

GateScores gate_score(const Tensor& qg, const Tensor& kg, const ModelShape& shape, ScoreMode mode,
                      const std::vector<std::int64_t>& positions) {
    if (qg.rank() != 3 || kg.rank() != 3 || qg.dim(0) != shape.num_kv_heads ||
        kg.dim(0) != shape.num_kv_heads || qg.dim(2) != shape.gate_dim ||
        kg.dim(2) != shape.gate_dim)
        throw std::invalid_argument("gate_score: tensor shape mismatch");
    const std::size_t q_len = qg.dim(1);
    const std::size_t nb = kg.dim(1);
    if (positions.size() != q_len) throw std::invalid_argument("gate_score: positions length");

    const float inv_sqrt = 1.0f / std::sqrt(float(shape.gate_dim));
    const float neg_inf = -std::numeric_limits<float>::infinity();
    Tensor z({shape.num_kv_heads, q_len, nb});
    std::vector<std::uint8_t> mask(z.numel(), 0);
    for (std::size_t h = 0; h < shape.num_kv_heads; ++h)
        for (std::size_t i = 0; i < q_len; ++i) {
            const std::size_t valid = valid_blocks(positions[i], shape.block_size, nb);
            const float* qrow = qg.row(h, i);
            float* zrow = z.row(h, i);
            std::uint8_t* mrow = mask.data() + (h * q_len + i) * nb;
            for (std::size_t j = 0; j < valid; ++j) {
                const float* krow = kg.row(h, j);
                float acc = 0.0f;
                for (std::size_t t = 0; t < shape.gate_dim; ++t) acc += qrow[t] * krow[t];
                zrow[j] = acc * inv_sqrt;
                mrow[j] = 1;
            }
            for (std::size_t j = valid; j < nb; ++j) zrow[j] = neg_inf;
        }

    GateScores scores;
    if (mode == ScoreMode::Softmax) {
        scores.s = softmax_row(z, mask);
        scores.softmax = true;
    } else {
        scores.s = std::move(z);
        scores.softmax = false;
    }
    return scores;
}

double kl_loss(const GateScores& scores, const GroundTruthMap& gt) {
    if (!scores.softmax) throw std::invalid_argument("kl_loss: scores must be in softmax mode");
    if (!scores.s.same_shape(gt.gt)) throw std::invalid_argument("kl_loss: shape mismatch");
    const std::size_t nb = scores.s.dim(2);
    const std::size_t rows = scores.s.numel() / nb;
    double total = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
        const float* sv = scores.s.data.data() + r * nb;
        const float* tv = gt.gt.data.data() + r * nb;
        double row = 0.0;
        for (std::size_t j = 0; j < nb; ++j) {
            if (tv[j] <= 0.0f) continue;
            const double t = tv[j];
            row += t * (std::log(t) - std::log(std::max(double(sv[j]), kScoreFloor)));
        }
        total += row;
    }
    return total / double(rows);
}

GateGrads gate_backward(const GateSample& sample, const GateParams& params,
                        const ModelShape& shape, const GroundTruthMap& gt, double* loss_out) {
    const Tensor qg = gate_forward_q(sample.q_nope, params, shape, sample.positions);
    const Tensor kg = gate_forward_k(sample.k_nope, params, shape);
    const GateScores scores = gate_score(qg, kg, shape, ScoreMode::Softmax, sample.positions);
    if (!scores.s.same_shape(gt.gt))
        throw std::invalid_argument("gate_backward: ground truth shape mismatch");
    if (loss_out) *loss_out = kl_loss(scores, gt);

    const std::size_t q_len = qg.dim(1);
    const std::size_t nb = kg.dim(1);
    const std::vector<std::int64_t> kpos = block_positions(nb, shape.block_size, 0);

    // d(loss)/d(logits). For the floored KL through a softmax:
    //   dZ[i,j] = alpha * (s_ij * c_i - t_ij * [s_ij > floor]),
    // c_i = sum of t over entries where s clears the floor, alpha the row mean
    // factor. Masked entries have s = t = 0 and stay zero.
    const double alpha = 1.0 / double(shape.num_kv_heads * q_len);
    GateGrads grads;
    grads.w_q.reserve(shape.num_kv_heads);
    grads.w_k.reserve(shape.num_kv_heads);
    for (std::size_t h = 0; h < shape.num_kv_heads; ++h) {
        Tensor dz({q_len, nb});
        for (std::size_t i = 0; i < q_len; ++i) {
            const float* sv = scores.s.row(h, i);
            const float* tv = gt.gt.row(h, i);
            double c = 0.0;
            for (std::size_t j = 0; j < nb; ++j)
                if (double(sv[j]) > kScoreFloor) c += tv[j];
            float* dzrow = dz.row(i);
            for (std::size_t j = 0; j < nb; ++j) {
                const double live = double(sv[j]) > kScoreFloor ? tv[j] : 0.0;
                dzrow[j] = float(alpha * (double(sv[j]) * c - live));
            }
        }

        // Back through the scaled score product, then undo the rotation
        // (rotations are orthogonal, so the inverse is the negated position).
        const float inv_sqrt = 1.0f / std::sqrt(float(shape.gate_dim));
        Tensor qg_h({q_len, shape.gate_dim});
        std::copy(qg.row(h, 0), qg.row(h, 0) + q_len * shape.gate_dim, qg_h.data.begin());
        Tensor kg_h({nb, shape.gate_dim});
        std::copy(kg.row(h, 0), kg.row(h, 0) + nb * shape.gate_dim, kg_h.data.begin());

        Tensor dqg = matmul(dz, kg_h);
        for (float& v : dqg.data) v *= inv_sqrt;
        Tensor dkg = matmul(transpose2d(dz), qg_h);
        for (float& v : dkg.data) v *= inv_sqrt;
        if (params.use_rope) {
            dqg = rope_apply(dqg, negated(sample.positions), shape.rope_theta);
            dkg = rope_apply(dkg, negated(kpos), shape.rope_theta);
        }

        grads.w_q.push_back(matmul(transpose2d(dqg), group_queries(sample.q_nope, shape, h)));
        grads.w_k.push_back(matmul(transpose2d(dkg), pooled_keys(sample.k_nope, shape, h)));
    }
    return grads;
}

void save_checkpoint(const GateParams& params, const ModelShape& shape, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open checkpoint for writing: " + path);
    char theta[64];
    std::snprintf(theta, sizeof theta, "%.17g", shape.rope_theta);
    out << "SEERGATE v1\n"
        << "num_q_heads=" << shape.num_q_heads << "\n"
        << "num_kv_heads=" << shape.num_kv_heads << "\n"
        << "head_dim=" << shape.head_dim << "\n"
        << "gate_dim=" << shape.gate_dim << "\n"
        << "block_size=" << shape.block_size << "\n"
        << "rope_theta=" << theta << "\n"
        << "use_rope=" << (params.use_rope ? 1 : 0) << "\n"
        << "\n";
    for (const Tensor& w : params.w_q) save_tensor(w, out);
    for (const Tensor& w : params.w_k) save_tensor(w, out);
    if (!out) throw DataError("checkpoint write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint: " + path);
    std::string line;
    if (!std::getline(in, line) || line != "SEERGATE v1")
        throw DataError("not a gate checkpoint: " + path);

    Checkpoint ck;
    bool use_rope = true;
    while (std::getline(in, line) && !line.empty()) {
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw DataError("malformed checkpoint header line: " + line);
        const std::string key = line.substr(0, eq);
        const std::string val = line.substr(eq + 1);
        char* end = nullptr;
        if (key == "num_q_heads")
            ck.shape.num_q_heads = std::strtoull(val.c_str(), &end, 10);
        else if (key == "num_kv_heads")
            ck.shape.num_kv_heads = std::strtoull(val.c_str(), &end, 10);
        else if (key == "head_dim")
            ck.shape.head_dim = std::strtoull(val.c_str(), &end, 10);
        else if (key == "gate_dim")
            ck.shape.gate_dim = std::strtoull(val.c_str(), &end, 10);
        else if (key == "block_size")
            ck.shape.block_size = std::strtoull(val.c_str(), &end, 10);
        else if (key == "rope_theta")
            ck.shape.rope_theta = std::strtod(val.c_str(), &end);
        else if (key == "use_rope")
            use_rope = std::strtoull(val.c_str(), &end, 10) != 0;
        else
            continue;  // unknown keys are ignored for forward compatibility
        if (end == val.c_str()) throw DataError("malformed checkpoint value: " + line);
    }
    try {
        ck.shape.validate();
    } catch (const std::exception& e) {
        throw DataError(std::string("checkpoint header invalid: ") + e.what());
    }

    ck.params.use_rope = use_rope;
    const std::size_t fan_q = ck.shape.group_size() * ck.shape.head_dim;
    const std::size_t fan_k = 3 * ck.shape.head_dim;
    for (std::size_t h = 0; h < ck.shape.num_kv_heads; ++h) {
        Tensor w = load_tensor(in);
        if (w.rank() != 2 || w.dim(0) != ck.shape.gate_dim || w.dim(1) != fan_q)
            throw DataError("checkpoint w_q tensor has wrong shape");
        ck.params.w_q.push_back(std::move(w));
    }
    for (std::size_t h = 0; h < ck.shape.num_kv_heads; ++h) {
        Tensor w = load_tensor(in);
        if (w.rank() != 2 || w.dim(0) != ck.shape.gate_dim || w.dim(1) != fan_k)
            throw DataError("checkpoint w_k tensor has wrong shape");
        ck.params.w_k.push_back(std::move(w));
    }
    return ck;
}

}  // namespace seer
