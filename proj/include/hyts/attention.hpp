// Grouped-Query Attention with an append-only KV cache, per-head QK
// normalization, and NTK-aware rotary position embeddings.
#pragma once

#include <cmath>
#include <cstring>
#include <vector>

#include "hyts/ops.hpp"
#include "hyts/tensor.hpp"

namespace hyts {

struct RopeConfig {
    double base = 10000.0;
    double ntk_alpha = 1.0;  // >= 1; 1 means vanilla RoPE
    int64_t d_head = 64;     // even rotation dimension

    void validate() const {
        if (d_head <= 2) throw ConfigError("RopeConfig.d_head must be > 2");
        if (d_head % 2 != 0) throw ConfigError("RopeConfig.d_head must be even");
        if (ntk_alpha < 1.0) throw ConfigError("RopeConfig.ntk_alpha must be >= 1");
        if (base <= 0.0) throw ConfigError("RopeConfig.base must be > 0");
    }
};

// Effective rotary base after NTK scaling: base * alpha^(d/(d-2)).
// alpha = 1 leaves the base bit-identical to the vanilla value.
inline double ntk_rope_base(const RopeConfig& cfg) {
    cfg.validate();
    const double exponent =
        static_cast<double>(cfg.d_head) / static_cast<double>(cfg.d_head - 2);
    return cfg.base * std::pow(cfg.ntk_alpha, exponent);
}

// Per-pair rotation frequencies f_i = base'^(-2i/d), i in [0, d/2).
inline std::vector<double> rope_frequencies(const RopeConfig& cfg) {
    const double eff = ntk_rope_base(cfg);
    std::vector<double> f(static_cast<size_t>(cfg.d_head / 2));
    for (size_t i = 0; i < f.size(); ++i)
        f[i] = std::pow(eff, -2.0 * static_cast<double>(i) / static_cast<double>(cfg.d_head));
    return f;
}

// Rotate adjacent channel pairs of q or k [T, H, d_head] by pos * f_i.
// Norm-preserving; position 0 is the identity.
template <typename T>
TensorT<T> apply_rope(const TensorT<T>& qk, const std::vector<int64_t>& positions,
                      const RopeConfig& cfg) {
    require_rank(qk, 3, "apply_rope input");
    if (qk.dim(2) != cfg.d_head)
        throw ShapeError("apply_rope: last dim " + std::to_string(qk.dim(2)) +
                         " != rope d_head " + std::to_string(cfg.d_head));
    if (static_cast<int64_t>(positions.size()) != qk.dim(0))
        throw ShapeError("apply_rope: positions length must equal T");
    for (int64_t p : positions)
        if (p < 0) throw DomainError("apply_rope: positions must be non-negative");

    const std::vector<double> freqs = rope_frequencies(cfg);
    TensorT<T> out = qk;
    const int64_t seq = qk.dim(0), heads = qk.dim(1), half = cfg.d_head / 2;
    for (int64_t t = 0; t < seq; ++t) {
        const double pos = static_cast<double>(positions[static_cast<size_t>(t)]);
        for (int64_t i = 0; i < half; ++i) {
            const double angle = pos * freqs[static_cast<size_t>(i)];
            const T cs = static_cast<T>(std::cos(angle));
            const T sn = static_cast<T>(std::sin(angle));
            for (int64_t h = 0; h < heads; ++h) {
                const T a = qk.at(t, h, 2 * i);
                const T b = qk.at(t, h, 2 * i + 1);
                out.at(t, h, 2 * i) = a * cs - b * sn;
                out.at(t, h, 2 * i + 1) = a * sn + b * cs;
            }
        }
    }
    return out;
}

struct AttnConfig {
    int64_t n_q_heads = 4;
    int64_t n_kv_heads = 2;
    int64_t d_head = 16;
    RopeConfig rope;
    bool use_qk_norm = true;
    double norm_eps = 1e-5;

    // Query head h reads kv head floor(h * n_kv / n_q).
    int64_t kv_index(int64_t q_head) const { return q_head * n_kv_heads / n_q_heads; }

    void validate() const {
        if (n_q_heads < 1 || n_kv_heads < 1)
            throw ConfigError("AttnConfig head counts must be >= 1");
        if (n_q_heads % n_kv_heads != 0)
            throw ConfigError("AttnConfig.n_q_heads must be a multiple of n_kv_heads");
        if (d_head != rope.d_head) throw ConfigError("AttnConfig.d_head must match rope.d_head");
        rope.validate();
    }
};

// Append-only per-layer cache of rotated keys and values.
template <typename T>
struct KvCacheT {
    int64_t n_kv = 0;
    int64_t d_head = 0;
    int64_t len = 0;
    std::vector<T> k;  // [len, n_kv, d_head] flattened
    std::vector<T> v;

    static KvCacheT make(const AttnConfig& cfg) {
        return KvCacheT{cfg.n_kv_heads, cfg.d_head, 0, {}, {}};
    }

    int64_t row_elems() const { return n_kv * d_head; }

    // Stored floats per token; the GQA memory-saving claim is structural.
    int64_t floats_per_token() const { return 2 * n_kv * d_head; }
    int64_t total_floats() const { return static_cast<int64_t>(k.size() + v.size()); }

    void append(const T* krow, const T* vrow) {
        k.insert(k.end(), krow, krow + row_elems());
        v.insert(v.end(), vrow, vrow + row_elems());
        ++len;
    }

    const T* k_at(int64_t pos, int64_t kv_head) const {
        return k.data() + (pos * n_kv + kv_head) * d_head;
    }
    const T* v_at(int64_t pos, int64_t kv_head) const {
        return v.data() + (pos * n_kv + kv_head) * d_head;
    }
};

using KvCache = KvCacheT<float>;

template <typename T>
struct AttnLayerParamsT {
    TensorT<T> w_q;     // [d_model, n_q * d_head]
    TensorT<T> w_k;     // [d_model, n_kv * d_head]
    TensorT<T> w_v;     // [d_model, n_kv * d_head]
    TensorT<T> w_o;     // [n_q * d_head, d_model]
    TensorT<T> q_gain;  // [d_head], shared across heads
    TensorT<T> k_gain;  // [d_head]
};

using AttnLayerParams = AttnLayerParamsT<float>;

// Per-head RMS normalization of q and k before RoPE and score computation.
template <typename T>
std::pair<TensorT<T>, TensorT<T>> qk_norm(const TensorT<T>& q, const TensorT<T>& k,
                                          const TensorT<T>& q_gain, const TensorT<T>& k_gain,
                                          double eps = 1e-5) {
    require_rank(q, 3, "qk_norm q");
    require_rank(k, 3, "qk_norm k");
    return {rmsnorm(q, q_gain, eps), rmsnorm(k, k_gain, eps)};
}

namespace detail {

// Shared prefill/decode body. Appends the new tokens' K/V, then runs causal
// attention for each new query over everything cached so far.
template <typename T>
TensorT<T> gqa_forward(const AttnConfig& cfg, const AttnLayerParamsT<T>& params,
                       const TensorT<T>& residual_in, KvCacheT<T>& cache, int64_t start_pos,
                       const TensorT<T>* pre_norm_gain, double norm_eps) {
    cfg.validate();
    require_rank(residual_in, 2, "gqa residual_in");
    const int64_t seq = residual_in.dim(0);
    const int64_t d_model = residual_in.dim(1);
    const int64_t nq = cfg.n_q_heads, nkv = cfg.n_kv_heads, dh = cfg.d_head;
    if (params.w_q.dim(0) != d_model)
        throw ShapeError("gqa: residual width does not match w_q");
    if (start_pos < 0) start_pos = cache.len;
    if (start_pos != cache.len)
        throw CacheError("gqa: start position " + std::to_string(start_pos) +
                         " is discontiguous with cache length " + std::to_string(cache.len));

    const TensorT<T> u =
        pre_norm_gain ? rmsnorm(residual_in, *pre_norm_gain, norm_eps) : residual_in;

    TensorT<T> qf = matmul(u, params.w_q);  // [T, nq*dh]
    TensorT<T> kf = matmul(u, params.w_k);  // [T, nkv*dh]
    TensorT<T> vf = matmul(u, params.w_v);  // [T, nkv*dh]

    TensorT<T> q({seq, nq, dh});
    q.data = qf.data;
    TensorT<T> k({seq, nkv, dh});
    k.data = kf.data;

    if (cfg.use_qk_norm) {
        auto normed = qk_norm(q, k, params.q_gain, params.k_gain, cfg.norm_eps);
        q = std::move(normed.first);
        k = std::move(normed.second);
    }

    std::vector<int64_t> positions(static_cast<size_t>(seq));
    for (int64_t t = 0; t < seq; ++t) positions[static_cast<size_t>(t)] = start_pos + t;
    q = apply_rope(q, positions, cfg.rope);
    k = apply_rope(k, positions, cfg.rope);

    for (int64_t t = 0; t < seq; ++t) cache.append(&k.at(t, 0, 0), &vf.at(t, 0));

    const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
    TensorT<T> attn_out({seq, nq * dh}, T(0));
    std::vector<T> scores;
    for (int64_t t = 0; t < seq; ++t) {
        const int64_t visible = start_pos + t + 1;  // causal horizon in cache positions
        for (int64_t h = 0; h < nq; ++h) {
            const int64_t kvh = cfg.kv_index(h);
            const T* qrow = &q.at(t, h, 0);
            scores.assign(static_cast<size_t>(visible), T(0));
            T mx = -std::numeric_limits<T>::infinity();
            for (int64_t pos = 0; pos < visible; ++pos) {
                const T* krow = cache.k_at(pos, kvh);
                T dot = T(0);
                for (int64_t i = 0; i < dh; ++i) dot += qrow[i] * krow[i];
                dot *= scale;
                scores[static_cast<size_t>(pos)] = dot;
                mx = std::max(mx, dot);
            }
            T denom = T(0);
            for (int64_t pos = 0; pos < visible; ++pos) {
                T& s = scores[static_cast<size_t>(pos)];
                s = std::exp(s - mx);
                denom += s;
            }
            const T inv = T(1) / denom;
            T* orow = &attn_out.at(t, h * dh);
            for (int64_t pos = 0; pos < visible; ++pos) {
                const T w = scores[static_cast<size_t>(pos)] * inv;
                const T* vrow = cache.v_at(pos, kvh);
                for (int64_t i = 0; i < dh; ++i) orow[i] += w * vrow[i];
            }
        }
    }

    TensorT<T> proj = matmul(attn_out, params.w_o);  // [T, d_model]
    TensorT<T> out = residual_in;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += proj.data[i];
    return out;
}

}  // namespace detail

// Causal GQA over a block of new tokens; K/V are appended to the cache and
// the attention output is added back onto the residual stream.
template <typename T>
TensorT<T> gqa_prefill(const AttnConfig& cfg, const AttnLayerParamsT<T>& params,
                       const TensorT<T>& residual_in, KvCacheT<T>& cache, int64_t start_pos = -1,
                       std::type_identity_t<const TensorT<T>*> pre_norm_gain = nullptr,
                       double norm_eps = 1e-5) {
    return detail::gqa_forward(cfg, params, residual_in, cache, start_pos, pre_norm_gain, norm_eps);
}

// One-token incremental path over the cached positions plus the new token.
template <typename T>
TensorT<T> gqa_decode_step(const AttnConfig& cfg, const AttnLayerParamsT<T>& params,
                           const TensorT<T>& residual_in, KvCacheT<T>& cache,
                           std::type_identity_t<const TensorT<T>*> pre_norm_gain = nullptr,
                           double norm_eps = 1e-5) {
    require_rank(residual_in, 2, "gqa_decode_step residual_in");
    if (residual_in.dim(0) != 1)
        throw ShapeError("gqa_decode_step expects a single-token residual, got " +
                         residual_in.shape_str());
    return detail::gqa_forward(cfg, params, residual_in, cache, -1, pre_norm_gain, norm_eps);
}

}  // namespace hyts
