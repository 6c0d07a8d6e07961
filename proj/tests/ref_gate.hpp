#pragma once

// Double precision re-implementation of the gate forward pass and KL loss,
// written independently of the library code. Central finite differences on
// this reference are accurate to ~1e-10, so analytic float32 gradients can be
// checked against it at 1e-3 relative without fighting float noise.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "seer/gate.hpp"
#include "seer/tensor.hpp"

namespace refgate {

struct DoubleParams {
    // per kv head, row-major [gate_dim, fan_in]
    std::vector<std::vector<double>> w_q;
    std::vector<std::vector<double>> w_k;
    bool use_rope = true;
};

inline DoubleParams to_double(const seer::GateParams& p) {
    DoubleParams d;
    d.use_rope = p.use_rope;
    for (const auto& w : p.w_q) d.w_q.emplace_back(w.data.begin(), w.data.end());
    for (const auto& w : p.w_k) d.w_k.emplace_back(w.data.begin(), w.data.end());
    return d;
}

inline void rope_row(std::vector<double>& row, std::int64_t pos, double theta) {
    const std::size_t d = row.size();
    for (std::size_t i = 0; 2 * i + 1 < d; ++i) {
        const double freq = std::pow(theta, -2.0 * double(i) / double(d));
        const double ang = double(pos) * freq;
        const double c = std::cos(ang), s = std::sin(ang);
        const double x = row[2 * i], y = row[2 * i + 1];
        row[2 * i] = x * c - y * s;
        row[2 * i + 1] = x * s + y * c;
    }
}

// kl_loss(gate_score(gate_forward_q, gate_forward_k), gt) in double.
inline double loss(const DoubleParams& params, const seer::ModelShape& shape,
                   const seer::Tensor& q_nope, const seer::Tensor& k_nope,
                   const std::vector<std::int64_t>& positions, const seer::Tensor& gt) {
    const std::size_t g = shape.group_size();
    const std::size_t d = shape.head_dim;
    const std::size_t dg = shape.gate_dim;
    const std::size_t b = shape.block_size;
    const std::size_t q_len = q_nope.shape[1];
    const std::size_t kv_len = k_nope.shape[1];
    const std::size_t nb = (kv_len + b - 1) / b;
    const double inv_sqrt = 1.0 / std::sqrt(double(dg));

    double total = 0.0;
    for (std::size_t h = 0; h < shape.num_kv_heads; ++h) {
        // pooled blocks -> projected -> rotated
        std::vector<std::vector<double>> kg(nb, std::vector<double>(dg, 0.0));
        for (std::size_t j = 0; j < nb; ++j) {
            const std::size_t lo = j * b, hi = std::min(kv_len, lo + b);
            std::vector<double> pooled(3 * d);
            for (std::size_t t = 0; t < d; ++t) {
                double mx = k_nope.at(h, lo, t), mn = mx, sum = 0.0;
                for (std::size_t r = lo; r < hi; ++r) {
                    const double v = k_nope.at(h, r, t);
                    mx = std::max(mx, v);
                    mn = std::min(mn, v);
                    sum += v;
                }
                pooled[t] = mx;
                pooled[d + t] = mn;
                pooled[2 * d + t] = sum / double(hi - lo);
            }
            for (std::size_t o = 0; o < dg; ++o) {
                double acc = 0.0;
                for (std::size_t t = 0; t < 3 * d; ++t)
                    acc += params.w_k[h][o * 3 * d + t] * pooled[t];
                kg[j][o] = acc;
            }
            if (params.use_rope) rope_row(kg[j], std::int64_t(lo), shape.rope_theta);
        }

        for (std::size_t r = 0; r < q_len; ++r) {
            std::vector<double> grouped(g * d);
            for (std::size_t gi = 0; gi < g; ++gi)
                for (std::size_t t = 0; t < d; ++t)
                    grouped[gi * d + t] = q_nope.at(h * g + gi, r, t);
            std::vector<double> qg(dg, 0.0);
            for (std::size_t o = 0; o < dg; ++o) {
                double acc = 0.0;
                for (std::size_t t = 0; t < g * d; ++t)
                    acc += params.w_q[h][o * g * d + t] * grouped[t];
                qg[o] = acc;
            }
            if (params.use_rope) rope_row(qg, positions[r], shape.rope_theta);

            const std::size_t valid = std::min(nb, std::size_t(positions[r]) / b + 1);
            std::vector<double> logits(valid);
            double m = -1e300;
            for (std::size_t j = 0; j < valid; ++j) {
                double acc = 0.0;
                for (std::size_t o = 0; o < dg; ++o) acc += qg[o] * kg[j][o];
                logits[j] = acc * inv_sqrt;
                m = std::max(m, logits[j]);
            }
            double z = 0.0;
            for (std::size_t j = 0; j < valid; ++j) z += std::exp(logits[j] - m);
            for (std::size_t j = 0; j < valid; ++j) {
                const double t = gt.at(h, r, j);
                if (t <= 0.0) continue;
                const double s = std::exp(logits[j] - m) / z;
                total += t * std::log(t / std::max(s, 1e-9));
            }
        }
    }
    return total / double(shape.num_kv_heads * q_len);
}

}  // namespace refgate
