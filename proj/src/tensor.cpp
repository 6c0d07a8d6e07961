#include "seer/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "seer/errors.hpp"

namespace seer {

namespace {

std::size_t numel_of(const std::vector<std::size_t>& dims) {
    std::size_t n = 1;
    for (std::size_t d : dims) {
        if (d == 0) throw std::invalid_argument("tensor dimension must be positive");
        if (n > (std::size_t(1) << 33) / d) throw std::invalid_argument("tensor too large");
        n *= d;
    }
    return n;
}

}  // namespace

Tensor::Tensor(std::vector<std::size_t> dims) : shape(std::move(dims)), data(numel_of(shape), 0.0f) {}

std::size_t Tensor::dim(std::size_t i) const {
    if (i >= shape.size()) throw std::invalid_argument("tensor dim index out of range");
    return shape[i];
}

void ModelShape::validate() const {
    if (num_kv_heads == 0 || num_q_heads == 0) throw std::invalid_argument("head counts must be positive");
    if (num_q_heads % num_kv_heads != 0)
        throw std::invalid_argument("num_q_heads must be a multiple of num_kv_heads");
    if (head_dim == 0 || head_dim % 2 != 0) throw std::invalid_argument("head_dim must be positive and even");
    if (gate_dim == 0 || gate_dim % 2 != 0) throw std::invalid_argument("gate_dim must be positive and even");
    if (block_size == 0) throw std::invalid_argument("block_size must be positive");
    if (!(rope_theta > 0.0)) throw std::invalid_argument("rope_theta must be positive");
}

void check_finite(const Tensor& t, const char* op) {
    for (float v : t.data) {
        if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite value in result");
    }
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2) throw std::invalid_argument("matmul: rank-2 tensors required");
    if (a.shape[1] != b.shape[0]) throw std::invalid_argument("matmul: inner dimensions differ");
    const std::size_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
    Tensor out({m, n});
    // i,k,j loop order: cache friendly and still strictly ascending over k per
    // output element, so summation order is fixed.
    for (std::size_t i = 0; i < m; ++i) {
        const float* arow = a.row(i);
        float* orow = out.row(i);
        for (std::size_t kk = 0; kk < k; ++kk) {
            const float av = arow[kk];
            const float* brow = b.row(kk);
            for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    check_finite(out, "matmul");
    return out;
}

Tensor transpose2d(const Tensor& a) {
    if (a.rank() != 2) throw std::invalid_argument("transpose2d: rank-2 tensor required");
    Tensor out({a.shape[1], a.shape[0]});
    for (std::size_t i = 0; i < a.shape[0]; ++i)
        for (std::size_t j = 0; j < a.shape[1]; ++j) out.at(j, i) = a.at(i, j);
    return out;
}

Tensor softmax_row(const Tensor& x, const std::vector<std::uint8_t>& mask) {
    if (x.rank() == 0) throw std::invalid_argument("softmax_row: scalar input");
    if (!mask.empty() && mask.size() != x.numel())
        throw std::invalid_argument("softmax_row: mask size mismatch");
    const std::size_t n = x.shape.back();
    const std::size_t rows = x.numel() / n;
    Tensor out(x.shape);
    for (std::size_t r = 0; r < rows; ++r) {
        const float* in = x.data.data() + r * n;
        const std::uint8_t* m = mask.empty() ? nullptr : mask.data() + r * n;
        float mx = -std::numeric_limits<float>::infinity();
        for (std::size_t j = 0; j < n; ++j)
            if (!m || m[j]) mx = std::max(mx, in[j]);
        if (mx == -std::numeric_limits<float>::infinity())
            throw std::invalid_argument("softmax_row: fully masked row");
        float sum = 0.0f;
        float* o = out.data.data() + r * n;
        for (std::size_t j = 0; j < n; ++j) {
            if (!m || m[j]) {
                o[j] = std::exp(in[j] - mx);
                sum += o[j];
            } else {
                o[j] = 0.0f;
            }
        }
        for (std::size_t j = 0; j < n; ++j) o[j] /= sum;
    }
    check_finite(out, "softmax_row");
    return out;
}

Tensor block_pool(const Tensor& x, std::size_t block, PoolKind kind) {
    if (x.rank() != 2) throw std::invalid_argument("block_pool: rank-2 tensor required");
    if (block == 0) throw std::invalid_argument("block_pool: block size must be positive");
    const std::size_t seq = x.shape[0], d = x.shape[1];
    const std::size_t nb = (seq + block - 1) / block;
    Tensor out({nb, d});
    for (std::size_t bi = 0; bi < nb; ++bi) {
        const std::size_t lo = bi * block;
        const std::size_t hi = std::min(lo + block, seq);
        float* o = out.row(bi);
        for (std::size_t c = 0; c < d; ++c) {
            float acc = x.at(lo, c);
            for (std::size_t r = lo + 1; r < hi; ++r) {
                const float v = x.at(r, c);
                switch (kind) {
                    case PoolKind::Max: acc = std::max(acc, v); break;
                    case PoolKind::Min: acc = std::min(acc, v); break;
                    case PoolKind::Avg: acc += v; break;
                }
            }
            o[c] = (kind == PoolKind::Avg) ? acc / float(hi - lo) : acc;
        }
    }
    check_finite(out, "block_pool");
    return out;
}

Tensor rope_apply(const Tensor& x, const std::vector<std::int64_t>& positions, double theta) {
    if (x.rank() != 2) throw std::invalid_argument("rope_apply: rank-2 tensor required");
    const std::size_t n = x.shape[0], d = x.shape[1];
    if (d % 2 != 0) throw std::invalid_argument("rope_apply: dimension must be even");
    if (positions.size() != n) throw std::invalid_argument("rope_apply: positions length mismatch");
    Tensor out({n, d});
    std::vector<double> inv_freq(d / 2);
    for (std::size_t i = 0; i < d / 2; ++i)
        inv_freq[i] = std::pow(theta, -2.0 * double(i) / double(d));
    for (std::size_t r = 0; r < n; ++r) {
        const double pos = double(positions[r]);
        const float* in = x.row(r);
        float* o = out.row(r);
        for (std::size_t i = 0; i < d / 2; ++i) {
            const double angle = pos * inv_freq[i];
            const float c = float(std::cos(angle));
            const float s = float(std::sin(angle));
            const float x0 = in[2 * i], x1 = in[2 * i + 1];
            o[2 * i] = x0 * c - x1 * s;
            o[2 * i + 1] = x0 * s + x1 * c;
        }
    }
    check_finite(out, "rope_apply");
    return out;
}

Tensor rope_heads(const Tensor& x, const std::vector<std::int64_t>& positions, double theta) {
    if (x.rank() != 3) throw std::invalid_argument("rope_heads: rank-3 tensor required");
    const std::size_t heads = x.shape[0], seq = x.shape[1], d = x.shape[2];
    Tensor out({heads, seq, d});
    Tensor slice({seq, d});
    for (std::size_t h = 0; h < heads; ++h) {
        std::copy(x.row(h, 0), x.row(h, 0) + seq * d, slice.data.begin());
        const Tensor rotated = rope_apply(slice, positions, theta);
        std::copy(rotated.data.begin(), rotated.data.end(), out.row(h, 0));
    }
    return out;
}

Tensor head_row(const Tensor& x, std::size_t row) {
    if (x.rank() != 3) throw std::invalid_argument("head_row: rank-3 tensor required");
    if (row >= x.shape[1]) throw std::invalid_argument("head_row: row out of range");
    const std::size_t heads = x.shape[0], d = x.shape[2];
    Tensor out({heads, 1, d});
    for (std::size_t h = 0; h < heads; ++h) {
        const float* src = x.row(h, row);
        std::copy(src, src + d, out.row(h, 0));
    }
    return out;
}

std::vector<std::size_t> topk_indices(std::span<const float> scores, std::size_t k) {
    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        if (scores[a] != scores[b]) return scores[a] > scores[b];
        return a < b;
    });
    idx.resize(std::min(k, idx.size()));
    return idx;
}

}  // namespace seer
