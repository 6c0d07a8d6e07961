#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace seer {

enum class PoolKind { Max, Min, Avg };

// Dense row-major float32 tensor with dynamic rank.
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<float> data;

    Tensor() = default;
    explicit Tensor(std::vector<std::size_t> dims);

    static Tensor zeros(std::vector<std::size_t> dims) { return Tensor(std::move(dims)); }

    std::size_t rank() const { return shape.size(); }
    std::size_t numel() const { return data.size(); }
    std::size_t dim(std::size_t i) const;

    // rank-2 element access
    float& at(std::size_t i, std::size_t j) { return data[i * shape[1] + j]; }
    float at(std::size_t i, std::size_t j) const { return data[i * shape[1] + j]; }

    // rank-3 element access
    float& at(std::size_t h, std::size_t i, std::size_t j) {
        return data[(h * shape[1] + i) * shape[2] + j];
    }
    float at(std::size_t h, std::size_t i, std::size_t j) const {
        return data[(h * shape[1] + i) * shape[2] + j];
    }

    // row pointers (rank-2 and rank-3)
    float* row(std::size_t i) { return data.data() + i * shape[1]; }
    const float* row(std::size_t i) const { return data.data() + i * shape[1]; }
    float* row(std::size_t h, std::size_t i) { return data.data() + (h * shape[1] + i) * shape[2]; }
    const float* row(std::size_t h, std::size_t i) const {
        return data.data() + (h * shape[1] + i) * shape[2];
    }

    bool same_shape(const Tensor& other) const { return shape == other.shape; }
};

// Dimensional contract shared by every module.
struct ModelShape {
    std::size_t num_q_heads = 8;
    std::size_t num_kv_heads = 2;
    std::size_t head_dim = 64;    // per-head width of q/k/v
    std::size_t gate_dim = 64;    // width of the gate's compressed block vectors
    std::size_t block_size = 64;  // tokens per key block
    double rope_theta = 10000.0;

    std::size_t group_size() const { return num_q_heads / num_kv_heads; }
    std::size_t num_blocks(std::size_t seq_len) const {
        return (seq_len + block_size - 1) / block_size;
    }
    void validate() const;
};

// Throws NumericError if any value is NaN or Inf.
void check_finite(const Tensor& t, const char* op);

// a [m,k] x b [k,n] -> [m,n]. Accumulation over k is fixed left-to-right, so
// repeated calls on identical inputs are bit-identical.
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor transpose2d(const Tensor& a);

// Softmax over the last dimension with max-subtraction. Masked entries
// (mask value 0) come out exactly 0. Mask is empty (all valid) or one byte
// per element of x. Throws on a fully masked row.
Tensor softmax_row(const Tensor& x, const std::vector<std::uint8_t>& mask = {});

// Non-overlapping pooling of rows of x [seq, d] into ceil(seq/block) rows.
// The trailing partial block pools only its available rows.
Tensor block_pool(const Tensor& x, std::size_t block, PoolKind kind);

// Rotary embedding on x [n, d], d even. Dim pair (2i, 2i+1) of row r is
// rotated by positions[r] * theta^(-2i/d). Position 0 is the identity;
// negative positions rotate backwards (inverse).
Tensor rope_apply(const Tensor& x, const std::vector<std::int64_t>& positions, double theta);

// rope_apply per head slice of x [heads, seq, d]; positions length == seq.
Tensor rope_heads(const Tensor& x, const std::vector<std::int64_t>& positions, double theta);

// One sequence row of every head: [heads, seq, d] -> [heads, 1, d].
Tensor head_row(const Tensor& x, std::size_t row);

// Indices of the k largest values, ties broken by lower index first.
// k > n clamps to n. Result ordered by (-value, index).
std::vector<std::size_t> topk_indices(std::span<const float> scores, std::size_t k);

}  // namespace seer
