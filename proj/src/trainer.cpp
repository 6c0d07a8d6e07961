#include "seer/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "seer/errors.hpp"
#include "seer/rng.hpp"
#include "seer/tensor_io.hpp"

namespace seer {

namespace {

// Synthetic corpus constants. The clustered kind plants cluster-center energy
// in the slowest-rotating rope dims so long-range block structure survives
// rotation; run length 80 is deliberately not a multiple of 32 or 64 so
// coarser eval block sizes straddle runs.
constexpr std::size_t kClusters = 8;
constexpr std::size_t kRunTokens = 80;
constexpr double kMixProb = 0.25;
constexpr double kMixScale = 0.6;  // off-run keys are damped: loud enough to
                                   // widen per-dim envelopes, exponentially
                                   // quiet in the actual softmax
constexpr double kKeyNoise = 0.35;
constexpr double kQueryNoise = 0.35;
// Each query is a graded mixture of target clusters, so the true block-mass
// ordering stays informative well past the hottest run.
constexpr std::size_t kQueryTargets = 3;
constexpr double kTargetAmps[kQueryTargets] = {1.0, 0.72, 0.44};
// Sparse high-magnitude spikes in the fast dims. Queries hold only noise
// there, so the softmax barely moves, but anything scoring blocks through
// per-dim min/max envelopes absorbs the full spike.
constexpr double kSpikeProb = 0.3;
constexpr std::size_t kSpikeCount = 4;
constexpr double kSpikeAmp = 3.0;
constexpr double kCenterNorm = 12.0;
constexpr double kTwoPi = 6.283185307179586476925286766559005768;
constexpr std::size_t kLocalWindow = 8;
constexpr double kLocalDecay = 0.6;
constexpr double kLocalGain = 2.0;  // lifts in-window logits clear of the
                                    // background maximum over long prefixes
constexpr double kLocalNoise = 0.25;

std::vector<std::int64_t> iota_positions(std::size_t n) {
    std::vector<std::int64_t> pos(n);
    std::iota(pos.begin(), pos.end(), std::int64_t(0));
    return pos;
}

std::size_t center_pair_lo(std::size_t head_dim) { return (3 * (head_dim / 2)) / 4; }

std::size_t center_count(std::size_t head_dim) {
    const std::size_t pairs = head_dim / 2 - center_pair_lo(head_dim);
    return std::min(kClusters, std::max<std::size_t>(pairs, 1));
}

// Cluster centers form a DFT frame over the slowest quarter of rope pairs:
// cluster m carries equal energy in every slow pair at phase 2*pi*m*i/M plus
// a shared random offset per pair. Equal energy means every cluster decays the
// same gentle way with distance, and the DFT phases make distinct clusters
// exactly orthogonal, so no draw can alias one cluster into another.
Tensor make_centers(const ModelShape& shape, Rng& rng) {
    const std::size_t d = shape.head_dim;
    const std::size_t pair_lo = center_pair_lo(d);
    const std::size_t pairs = std::max<std::size_t>(d / 2 - pair_lo, 1);
    const std::size_t clusters = center_count(d);
    const double amp = kCenterNorm / std::sqrt(double(pairs));
    std::vector<double> offset(pairs);
    for (double& phi : offset) phi = rng.uniform(0.0, kTwoPi);
    Tensor centers({clusters, d});
    for (std::size_t m = 0; m < clusters; ++m)
        for (std::size_t i = 0; i < pairs; ++i) {
            const std::size_t lo = 2 * std::min(pair_lo + i, d / 2 - 1);
            const double phi = offset[i] + kTwoPi * double(m * i) / double(clusters);
            centers.at(m, lo) = float(amp * std::cos(phi));
            centers.at(m, lo + 1) = float(amp * std::sin(phi));
        }
    return centers;
}

void synth_clustered(const ModelShape& shape, std::size_t seq_len, Rng& rng, Tensor& q_nope,
                     Tensor& k_nope) {
    const std::size_t d = shape.head_dim;
    const std::size_t g = shape.group_size();
    const std::size_t clusters = center_count(d);
    const Tensor centers = make_centers(shape, rng);

    // One run->cluster map for the whole sample. Clusters are dealt from a
    // reshuffled deck so no cluster owns more than ceil(runs/clusters) runs;
    // a 25%-token budget then always has room for every on-cluster block.
    const std::size_t num_runs = (seq_len + kRunTokens - 1) / kRunTokens;
    std::vector<std::size_t> run_cluster(num_runs);
    std::vector<std::size_t> deck(clusters);
    for (std::size_t i = 0; i < clusters; ++i) deck[i] = i;
    for (std::size_t r = 0; r < num_runs; ++r) {
        if (r % clusters == 0)
            for (std::size_t i = clusters - 1; i > 0; --i)
                std::swap(deck[i], deck[rng.uniform_int(i + 1)]);
        run_cluster[r] = deck[r % clusters];
    }

    const std::size_t dim_lo = 2 * center_pair_lo(d);
    for (std::size_t h = 0; h < shape.num_kv_heads; ++h)
        for (std::size_t p = 0; p < seq_len; ++p) {
            std::size_t m = run_cluster[p / kRunTokens];
            float scale = 1.0f;
            if (rng.uniform() < kMixProb) {
                m = rng.uniform_int(clusters);
                scale = float(kMixScale);
            }
            float* row = k_nope.row(h, p);
            for (std::size_t t = 0; t < d; ++t)
                row[t] = scale * centers.at(m, t) + float(kKeyNoise) * rng.gaussianf();
            if (dim_lo > 0 && rng.uniform() < kSpikeProb)
                for (std::size_t u = 0; u < kSpikeCount; ++u) {
                    const std::size_t t = rng.uniform_int(dim_lo);
                    row[t] += float(rng.uniform() < 0.5 ? -kSpikeAmp : kSpikeAmp);
                }
        }

    // Each (kv head, position) aims at up to kQueryTargets already-started
    // runs of distinct clusters with decaying amplitudes; the group's g query
    // heads share the targets and differ only in noise.
    for (std::size_t h = 0; h < shape.num_kv_heads; ++h)
        for (std::size_t p = 0; p < seq_len; ++p) {
            const std::size_t visible_runs = p / kRunTokens + 1;
            std::size_t target[kQueryTargets];
            std::size_t want = std::min(kQueryTargets, visible_runs);
            std::size_t found = 0;
            for (std::size_t tries = 0; found < want && tries < 64; ++tries) {
                const std::size_t m = run_cluster[rng.uniform_int(visible_runs)];
                bool dup = false;
                for (std::size_t u = 0; u < found; ++u) dup = dup || target[u] == m;
                if (!dup) target[found++] = m;
            }
            for (std::size_t gi = 0; gi < g; ++gi) {
                float* row = q_nope.row(h * g + gi, p);
                for (std::size_t t = 0; t < d; ++t) {
                    double acc = 0.0;
                    for (std::size_t u = 0; u < found; ++u)
                        acc += kTargetAmps[u] * centers.at(target[u], t);
                    row[t] = float(acc) + float(kQueryNoise) * rng.gaussianf();
                }
            }
        }
}

void synth_local(const ModelShape& shape, std::size_t seq_len, Rng& rng, Tensor& q_nope,
                 Tensor& k_nope) {
    const std::size_t d = shape.head_dim;
    const std::size_t g = shape.group_size();
    for (float& v : k_nope.data) v = rng.gaussianf();

    // Queries are a decayed mix of the last few keys of their own kv head, so
    // attention leans toward recent blocks. Weights are L2-normalized, then
    // scaled by kLocalGain so the window outranks the background max.
    std::vector<float> w(kLocalWindow);
    double norm2 = 0.0;
    for (std::size_t t = 0; t < kLocalWindow; ++t) {
        w[t] = float(std::pow(kLocalDecay, double(t)));
        norm2 += double(w[t]) * double(w[t]);
    }
    const float inv_norm = float(kLocalGain / std::sqrt(norm2));
    for (std::size_t t = 0; t < kLocalWindow; ++t) w[t] *= inv_norm;

    for (std::size_t h = 0; h < shape.num_kv_heads; ++h)
        for (std::size_t p = 0; p < seq_len; ++p)
            for (std::size_t gi = 0; gi < g; ++gi) {
                float* row = q_nope.row(h * g + gi, p);
                for (std::size_t t = 0; t < d; ++t) {
                    float acc = 0.0f;
                    for (std::size_t u = 0; u < kLocalWindow && u <= p; ++u)
                        acc += w[u] * k_nope.at(h, p - u, t);
                    row[t] = acc + float(kLocalNoise) * rng.gaussianf();
                }
            }
}

}  // namespace

void TrainConfig::validate() const {
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw std::invalid_argument("lr must be finite and >= 0");
    if (steps == 0) throw std::invalid_argument("steps must be >= 1");
    if (batch == 0) throw std::invalid_argument("batch must be >= 1");
}

void CorpusSpec::validate() const {
    shape.validate();
    if (dump_prefixes.empty()) {
        if (seq_lens.empty()) throw std::invalid_argument("corpus needs at least one seq_len");
        for (std::size_t s : seq_lens)
            if (s == 0) throw std::invalid_argument("seq_len must be >= 1");
    }
}

SynthKind synth_kind_from_string(const std::string& name) {
    if (name == "clustered") return SynthKind::Clustered;
    if (name == "local") return SynthKind::Local;
    if (name == "uniform") return SynthKind::Uniform;
    throw DataError("unknown synthetic corpus kind: " + name);
}

const char* to_string(SynthKind kind) {
    switch (kind) {
        case SynthKind::Clustered: return "clustered";
        case SynthKind::Local: return "local";
        case SynthKind::Uniform: return "uniform";
    }
    return "?";
}

SampleInputs synth_qk(SynthKind kind, const ModelShape& shape, std::size_t seq_len,
                      std::uint64_t seed) {
    shape.validate();
    if (seq_len == 0) throw std::invalid_argument("synth_qk: seq_len must be >= 1");
    Rng rng(seed);
    SampleInputs s;
    s.q_nope = Tensor({shape.num_q_heads, seq_len, shape.head_dim});
    s.k_nope = Tensor({shape.num_kv_heads, seq_len, shape.head_dim});

    switch (kind) {
        case SynthKind::Clustered: synth_clustered(shape, seq_len, rng, s.q_nope, s.k_nope); break;
        case SynthKind::Local: synth_local(shape, seq_len, rng, s.q_nope, s.k_nope); break;
        case SynthKind::Uniform:
            for (float& v : s.k_nope.data) v = rng.gaussianf();
            for (float& v : s.q_nope.data) v = rng.gaussianf();
            break;
    }

    Tensor v({shape.num_kv_heads, seq_len, shape.head_dim});
    for (float& x : v.data) x = rng.gaussianf();

    const std::vector<std::int64_t> pos = iota_positions(seq_len);
    s.attn.q = rope_heads(s.q_nope, pos, shape.rope_theta);
    s.attn.k = rope_heads(s.k_nope, pos, shape.rope_theta);
    s.attn.v = std::move(v);
    s.attn.causal_offset = 0;
    return s;
}

SampleInputs corpus_sample(const CorpusSpec& corpus, std::size_t sample_index) {
    corpus.validate();
    if (corpus.dump_prefixes.empty()) {
        const std::size_t seq = corpus.seq_lens[sample_index % corpus.seq_lens.size()];
        return synth_qk(corpus.kind, corpus.shape, seq, mix_seed(corpus.seed, sample_index));
    }

    const std::string& prefix = corpus.dump_prefixes[sample_index % corpus.dump_prefixes.size()];
    SampleInputs s;
    s.q_nope = load_tensor(prefix + ".q.satr");
    s.k_nope = load_tensor(prefix + ".k.satr");
    Tensor v = load_tensor(prefix + ".v.satr");
    const ModelShape& shape = corpus.shape;
    if (s.q_nope.rank() != 3 || s.q_nope.dim(0) != shape.num_q_heads ||
        s.q_nope.dim(2) != shape.head_dim)
        throw DataError("dump q tensor does not match corpus shape: " + prefix);
    const std::size_t seq = s.q_nope.dim(1);
    if (s.k_nope.rank() != 3 || s.k_nope.dim(0) != shape.num_kv_heads ||
        s.k_nope.dim(1) != seq || s.k_nope.dim(2) != shape.head_dim)
        throw DataError("dump k tensor does not match corpus shape: " + prefix);
    if (!v.same_shape(s.k_nope)) throw DataError("dump v tensor does not match k: " + prefix);

    const std::vector<std::int64_t> pos = iota_positions(seq);
    s.attn.q = rope_heads(s.q_nope, pos, shape.rope_theta);
    s.attn.k = rope_heads(s.k_nope, pos, shape.rope_theta);
    s.attn.v = std::move(v);
    s.attn.causal_offset = 0;
    return s;
}

double cosine_lr(double lr0, std::size_t step, std::size_t total) {
    if (total == 0) throw std::invalid_argument("cosine_lr: total must be >= 1");
    if (step >= total) return 0.0;  // cos(pi) is not exactly -1 in floating point
    constexpr double kPi = 3.141592653589793238462643383279502884;
    return lr0 * 0.5 * (1.0 + std::cos(kPi * double(step) / double(total)));
}

namespace {

std::vector<Tensor> zeros_like(const std::vector<Tensor>& src) {
    std::vector<Tensor> out;
    out.reserve(src.size());
    for (const Tensor& t : src) out.push_back(Tensor(t.shape));
    return out;
}

void accumulate(std::vector<Tensor>& acc, const std::vector<Tensor>& grads) {
    for (std::size_t i = 0; i < acc.size(); ++i)
        for (std::size_t j = 0; j < acc[i].data.size(); ++j) acc[i].data[j] += grads[i].data[j];
}

void adamw_update(Tensor& p, Tensor& m, Tensor& v, const Tensor& g, const TrainConfig& cfg,
                  double lr, double bias1, double bias2) {
    for (std::size_t j = 0; j < p.data.size(); ++j) {
        const double gj = g.data[j];
        const double mj = cfg.beta1 * m.data[j] + (1.0 - cfg.beta1) * gj;
        const double vj = cfg.beta2 * v.data[j] + (1.0 - cfg.beta2) * gj * gj;
        m.data[j] = float(mj);
        v.data[j] = float(vj);
        const double mhat = mj / bias1;
        const double vhat = vj / bias2;
        p.data[j] = float(p.data[j] - lr * (mhat / (std::sqrt(vhat) + cfg.eps) +
                                            cfg.weight_decay * p.data[j]));
    }
}

}  // namespace

TrainResult train(const TrainConfig& config, const CorpusSpec& corpus) {
    config.validate();
    corpus.validate();
    const ModelShape& shape = corpus.shape;

    TrainResult result;
    result.params = init_gate_params(shape, mix_seed(config.seed, 1));
    result.params.use_rope = config.use_rope;
    GateParams& params = result.params;

    std::vector<Tensor> m_q = zeros_like(params.w_q), v_q = zeros_like(params.w_q);
    std::vector<Tensor> m_k = zeros_like(params.w_k), v_k = zeros_like(params.w_k);

    for (std::size_t step = 0; step < config.steps; ++step) {
        const double lr = cosine_lr(config.lr, step, config.steps);

        GateGrads batch_grads;
        batch_grads.w_q = zeros_like(params.w_q);
        batch_grads.w_k = zeros_like(params.w_k);
        double batch_loss = 0.0;
        for (std::size_t item = 0; item < config.batch; ++item) {
            const SampleInputs sample = corpus_sample(corpus, step * config.batch + item);
            const GroundTruthMap gt = ground_truth_fused(sample.attn, shape).gt;
            const GateSample gs{sample.q_nope, sample.k_nope,
                                iota_positions(sample.q_nope.dim(1))};
            double loss = 0.0;
            const GateGrads grads = gate_backward(gs, params, shape, gt, &loss);
            batch_loss += loss;
            accumulate(batch_grads.w_q, grads.w_q);
            accumulate(batch_grads.w_k, grads.w_k);
        }
        batch_loss /= double(config.batch);
        const float inv_batch = 1.0f / float(config.batch);
        for (Tensor& t : batch_grads.w_q)
            for (float& x : t.data) x *= inv_batch;
        for (Tensor& t : batch_grads.w_k)
            for (float& x : t.data) x *= inv_batch;

        if (!std::isfinite(batch_loss))
            throw NumericError("train: non-finite loss at step " + std::to_string(step));

        const double t = double(step + 1);
        const double bias1 = 1.0 - std::pow(config.beta1, t);
        const double bias2 = 1.0 - std::pow(config.beta2, t);
        for (std::size_t h = 0; h < params.w_q.size(); ++h)
            adamw_update(params.w_q[h], m_q[h], v_q[h], batch_grads.w_q[h], config, lr, bias1,
                         bias2);
        for (std::size_t h = 0; h < params.w_k.size(); ++h)
            adamw_update(params.w_k[h], m_k[h], v_k[h], batch_grads.w_k[h], config, lr, bias1,
                         bias2);

        result.loss_history.push_back(batch_loss);
        result.lr_history.push_back(lr);
    }
    return result;
}

void write_loss_csv(const TrainResult& result, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot open loss csv for writing: " + path);
    out << "step,lr,loss\n";
    char buf[128];
    for (std::size_t i = 0; i < result.loss_history.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g\n", i, result.lr_history[i],
                      result.loss_history[i]);
        out << buf;
    }
    if (!out) throw DataError("loss csv write failed: " + path);
}

}  // namespace seer
