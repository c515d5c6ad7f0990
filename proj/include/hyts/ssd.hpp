// Mamba2 layer: selective state-space recurrence with three equivalent
// evaluation paths.
//
//   ssd_naive_scan    token-by-token recurrence, the slow in-tree oracle
//   ssd_chunked_scan  block-wise prefill path (intra-chunk batched matrix
//                     math, inter-chunk state carry via per-chunk decay)
//   ssd_decode_step   single-token state update for incremental decode
//
// Per head h (group g), with alpha_t = exp(dt_t * A_h):
//   H_t = alpha_t * H_{t-1} + (dt_t * x_t) (x) B_t
//   y_t = H_t . C_t + D_h * x_t
//
// State arithmetic is F32 by default; Precision::Bf16Emu rounds the state
// after every write to expose the accumulated error.
#pragma once

#include <cmath>
#include <optional>

#include "hyts/ops.hpp"
#include "hyts/tensor.hpp"

namespace hyts {

struct SsdConfig {
    int64_t n_heads = 4;
    int64_t d_head = 16;
    int64_t d_state = 16;
    int64_t n_groups = 2;   // B/C sharing groups; heads per group = n_heads / n_groups
    int64_t chunk_size = 8;
    int64_t conv_width = 4; // 0 disables the depthwise causal conv + silu stage

    int64_t d_inner() const { return n_heads * d_head; }
    int64_t bc_width() const { return n_groups * d_state; }
    int64_t conv_channels() const { return d_inner() + 2 * bc_width(); }
    bool use_conv() const { return conv_width >= 2; }

    // Query the B/C group for a head.
    int64_t group_of(int64_t head) const { return head * n_groups / n_heads; }

    void validate() const {
        if (n_heads < 1) throw ConfigError("SsdConfig.n_heads must be >= 1");
        if (d_head < 1) throw ConfigError("SsdConfig.d_head must be >= 1");
        if (d_state < 1) throw ConfigError("SsdConfig.d_state must be >= 1");
        if (n_groups < 1 || n_heads % n_groups != 0)
            throw ConfigError("SsdConfig.n_groups must divide n_heads");
        if (chunk_size < 1) throw ConfigError("SsdConfig.chunk_size must be >= 1");
        if (conv_width < 0 || conv_width == 1)
            throw ConfigError("SsdConfig.conv_width must be 0 (off) or >= 2");
    }
};

// Per-layer recurrent state: one d_head x d_state matrix per head.
template <typename T>
struct SsmStateT {
    TensorT<T> h;  // [n_heads, d_head, d_state]

    static SsmStateT zeros(const SsdConfig& cfg) {
        return SsmStateT{TensorT<T>({cfg.n_heads, cfg.d_head, cfg.d_state}, T(0))};
    }

    template <typename U>
    SsmStateT<U> cast() const {
        return SsmStateT<U>{h.template cast<U>()};
    }
};

using SsmState = SsmStateT<float>;

template <typename T>
struct SsdScanResult {
    TensorT<T> y;         // [T, n_heads, d_head]
    SsmStateT<T> state;   // state after the last token
};

namespace detail {

template <typename T>
inline void round_state_if(TensorT<T>& h, Precision p) {
    if (p != Precision::Bf16Emu) return;
    if constexpr (std::is_same_v<T, float>) {
        for (float& v : h.data) v = bf16_round(v);
    } else {
        throw ConfigError("Bf16Emu state rounding only applies to F32 tensors");
    }
}

template <typename T>
inline void check_scan_shapes(const SsdConfig& cfg, const TensorT<T>& a, const TensorT<T>& dt,
                              const TensorT<T>& x, const TensorT<T>& b, const TensorT<T>& c,
                              const TensorT<T>& d_skip, const SsmStateT<T>& h0) {
    cfg.validate();
    require_rank(a, 1, "ssd a");
    require_rank(dt, 2, "ssd dt");
    require_rank(x, 3, "ssd x");
    require_rank(b, 3, "ssd b");
    require_rank(c, 3, "ssd c");
    require_rank(d_skip, 1, "ssd d_skip");
    const int64_t t = dt.dim(0);
    if (a.dim(0) != cfg.n_heads || d_skip.dim(0) != cfg.n_heads)
        throw ShapeError("ssd: a/d_skip must have n_heads entries");
    if (dt.dim(1) != cfg.n_heads) throw ShapeError("ssd: dt must be [T, n_heads]");
    if (x.dim(0) != t || x.dim(1) != cfg.n_heads || x.dim(2) != cfg.d_head)
        throw ShapeError("ssd: x must be [T, n_heads, d_head], got " + x.shape_str());
    if (b.dim(0) != t || b.dim(1) != cfg.n_groups || b.dim(2) != cfg.d_state)
        throw ShapeError("ssd: b must be [T, n_groups, d_state], got " + b.shape_str());
    if (!c.same_shape(b)) throw ShapeError("ssd: c must match b shape");
    if (h0.h.shape != std::vector<int64_t>{cfg.n_heads, cfg.d_head, cfg.d_state})
        throw ShapeError("ssd: h0 shape " + h0.h.shape_str() + " does not match config");
    for (int64_t h = 0; h < cfg.n_heads; ++h)
        if (!(a.at(h) <= T(0)))
            throw DomainError("ssd: decay rate a[" + std::to_string(h) + "] must be <= 0");
}

}  // namespace detail

// Token-by-token recurrence. This is the defining semantics and the slow
// oracle every faster path is checked against.
template <typename T>
SsdScanResult<T> ssd_naive_scan(const SsdConfig& cfg, const TensorT<T>& a, const TensorT<T>& dt,
                                const TensorT<T>& x, const TensorT<T>& b, const TensorT<T>& c,
                                const TensorT<T>& d_skip, const SsmStateT<T>& h0,
                                Precision state_precision = TensorT<T>::precision()) {
    detail::check_scan_shapes(cfg, a, dt, x, b, c, d_skip, h0);
    const int64_t seq = dt.dim(0), nh = cfg.n_heads, p = cfg.d_head, n = cfg.d_state;

    SsdScanResult<T> out{TensorT<T>({seq, nh, p}, T(0)), h0};
    TensorT<T>& hs = out.state.h;

    for (int64_t t = 0; t < seq; ++t) {
        for (int64_t h = 0; h < nh; ++h) {
            const int64_t g = cfg.group_of(h);
            const T step = dt.at(t, h);
            const T alpha = std::exp(step * a.at(h));
            const T* bt = &b.at(t, g, 0);
            const T* ct = &c.at(t, g, 0);
            T* hmat = &hs.at(h, 0, 0);
            for (int64_t pi = 0; pi < p; ++pi) {
                const T scaled_x = step * x.at(t, h, pi);
                T* hrow = hmat + pi * n;
                T yv = T(0);
                for (int64_t ni = 0; ni < n; ++ni) {
                    hrow[ni] = alpha * hrow[ni] + scaled_x * bt[ni];
                    yv += hrow[ni] * ct[ni];
                }
                out.y.at(t, h, pi) = yv + d_skip.at(h) * x.at(t, h, pi);
                if (!std::isfinite(out.y.at(t, h, pi)))
                    throw NumericError("ssd_naive_scan: non-finite output at step " + std::to_string(t));
            }
        }
        detail::round_state_if(hs, state_precision);
    }
    return out;
}

// Block-wise prefill path. The sequence is split into ceil(T/chunk) chunks;
// intra-chunk outputs come from the decay table and batched dot products,
// the recurrent state crosses chunks via the per-chunk total decay. A ragged
// final chunk just shortens the decay table; it is never padded.
template <typename T>
SsdScanResult<T> ssd_chunked_scan(const SsdConfig& cfg, const TensorT<T>& a, const TensorT<T>& dt,
                                  const TensorT<T>& x, const TensorT<T>& b, const TensorT<T>& c,
                                  const TensorT<T>& d_skip, const SsmStateT<T>& h0,
                                  Precision state_precision = TensorT<T>::precision()) {
    detail::check_scan_shapes(cfg, a, dt, x, b, c, d_skip, h0);
    const int64_t seq = dt.dim(0), nh = cfg.n_heads, p = cfg.d_head, n = cfg.d_state;
    const int64_t chunk = cfg.chunk_size;

    SsdScanResult<T> out{TensorT<T>({seq, nh, p}, T(0)), h0};
    TensorT<T>& hs = out.state.h;

    std::vector<T> log_a, sigma;
    for (int64_t c0 = 0; c0 < seq; c0 += chunk) {
        const int64_t len = std::min(chunk, seq - c0);
        for (int64_t h = 0; h < nh; ++h) {
            const int64_t g = cfg.group_of(h);

            // Local decays in log space: log_a[i] = dt * A, sigma[i] = prod_{k<=i} alpha_k.
            log_a.assign(static_cast<size_t>(len), T(0));
            sigma.assign(static_cast<size_t>(len), T(0));
            double cum = 0.0;
            for (int64_t i = 0; i < len; ++i) {
                log_a[static_cast<size_t>(i)] = dt.at(c0 + i, h) * a.at(h);
                cum += static_cast<double>(log_a[static_cast<size_t>(i)]);
                sigma[static_cast<size_t>(i)] = static_cast<T>(std::exp(cum));
            }
            TensorT<T> la({len});
            la.data.assign(log_a.begin(), log_a.end());
            const TensorT<T> decay = decay_matrix(la);  // [len, len] lower triangular

            // Pairwise B.C scores for this group, lower triangle only.
            TensorT<T> scores({len, len}, T(0));
            for (int64_t i = 0; i < len; ++i) {
                const T* ci = &c.at(c0 + i, g, 0);
                for (int64_t j = 0; j <= i; ++j) {
                    const T* bj = &b.at(c0 + j, g, 0);
                    T dot = T(0);
                    for (int64_t ni = 0; ni < n; ++ni) dot += ci[ni] * bj[ni];
                    scores.at(i, j) = dot * decay.at(i, j);
                }
            }

            T* hmat = &hs.at(h, 0, 0);
            for (int64_t i = 0; i < len; ++i) {
                const T* ci = &c.at(c0 + i, g, 0);
                for (int64_t pi = 0; pi < p; ++pi) {
                    // Intra-chunk contribution.
                    T yv = T(0);
                    for (int64_t j = 0; j <= i; ++j)
                        yv += scores.at(i, j) * dt.at(c0 + j, h) * x.at(c0 + j, h, pi);
                    // State carried into the chunk, decayed to position i.
                    const T* hrow = hmat + pi * n;
                    T hv = T(0);
                    for (int64_t ni = 0; ni < n; ++ni) hv += hrow[ni] * ci[ni];
                    yv += sigma[static_cast<size_t>(i)] * hv;
                    yv += d_skip.at(h) * x.at(c0 + i, h, pi);
                    out.y.at(c0 + i, h, pi) = yv;
                }
            }

            // Chunk state update: H' = (total decay) * H + sum_j L[len-1][j] * dt_j * x_j (x) B_j.
            const T total_decay = sigma[static_cast<size_t>(len - 1)];
            for (int64_t pi = 0; pi < p; ++pi) {
                T* hrow = hmat + pi * n;
                for (int64_t ni = 0; ni < n; ++ni) hrow[ni] *= total_decay;
            }
            for (int64_t j = 0; j < len; ++j) {
                const T w = decay.at(len - 1, j) * dt.at(c0 + j, h);
                if (w == T(0)) continue;
                const T* bj = &b.at(c0 + j, g, 0);
                for (int64_t pi = 0; pi < p; ++pi) {
                    const T wx = w * x.at(c0 + j, h, pi);
                    T* hrow = hmat + pi * n;
                    for (int64_t ni = 0; ni < n; ++ni) hrow[ni] += wx * bj[ni];
                }
            }
        }
        detail::round_state_if(hs, state_precision);
        for (int64_t i = c0; i < c0 + len; ++i)
            for (int64_t h = 0; h < nh; ++h)
                for (int64_t pi = 0; pi < p; ++pi)
                    if (!std::isfinite(out.y.at(i, h, pi)))
                        throw NumericError("ssd_chunked_scan: non-finite output at step " +
                                           std::to_string(i));
    }
    return out;
}

// Single-token selective state update for decode. x_t is [n_heads, d_head],
// b_t/c_t are [n_groups, d_state], dt_t is [n_heads]; returns y [n_heads, d_head].
template <typename T>
SsdScanResult<T> ssd_decode_step(const SsdConfig& cfg, const TensorT<T>& a, const TensorT<T>& dt_t,
                                 const TensorT<T>& x_t, const TensorT<T>& b_t, const TensorT<T>& c_t,
                                 const TensorT<T>& d_skip, const SsmStateT<T>& h,
                                 Precision state_precision = TensorT<T>::precision()) {
    require_rank(dt_t, 1, "ssd dt_t");
    require_rank(x_t, 2, "ssd x_t");
    require_rank(b_t, 2, "ssd b_t");
    require_rank(c_t, 2, "ssd c_t");
    // Reuse the sequence-shape checks on the T=1 views.
    TensorT<T> dt({1, dt_t.dim(0)});
    dt.data = dt_t.data;
    TensorT<T> x({1, x_t.dim(0), x_t.dim(1)});
    x.data = x_t.data;
    TensorT<T> b({1, b_t.dim(0), b_t.dim(1)});
    b.data = b_t.data;
    TensorT<T> c({1, c_t.dim(0), c_t.dim(1)});
    c.data = c_t.data;
    detail::check_scan_shapes(cfg, a, dt, x, b, c, d_skip, h);

    const int64_t nh = cfg.n_heads, p = cfg.d_head, n = cfg.d_state;
    SsdScanResult<T> out{TensorT<T>({1, nh, p}, T(0)), h};
    TensorT<T>& hs = out.state.h;
    for (int64_t hh = 0; hh < nh; ++hh) {
        const int64_t g = cfg.group_of(hh);
        const T step = dt_t.at(hh);
        const T alpha = std::exp(step * a.at(hh));
        const T* bt = &b_t.at(g, 0);
        const T* ct = &c_t.at(g, 0);
        T* hmat = &hs.at(hh, 0, 0);
        for (int64_t pi = 0; pi < p; ++pi) {
            const T scaled_x = step * x_t.at(hh, pi);
            T* hrow = hmat + pi * n;
            T yv = T(0);
            for (int64_t ni = 0; ni < n; ++ni) {
                hrow[ni] = alpha * hrow[ni] + scaled_x * bt[ni];
                yv += hrow[ni] * ct[ni];
            }
            out.y.at(0, hh, pi) = yv + d_skip.at(hh) * x_t.at(hh, pi);
            if (!std::isfinite(out.y.at(0, hh, pi)))
                throw NumericError("ssd_decode_step: non-finite output at step 0");
        }
    }
    detail::round_state_if(hs, state_precision);
    return out;
}

// ---------------------------------------------------------------------------
// Full layer

// Parameter bundle for one Mamba2 layer. All projections map from d_model.
template <typename T>
struct SsdLayerParamsT {
    TensorT<T> w_x;          // [d_model, d_inner]
    TensorT<T> w_gate;       // [d_model, d_inner]
    TensorT<T> w_b;          // [d_model, n_groups * d_state]
    TensorT<T> w_c;          // [d_model, n_groups * d_state]
    TensorT<T> w_dt;         // [d_model, n_heads]
    TensorT<T> dt_bias;      // [n_heads]
    TensorT<T> a_log;        // [n_heads]; A = -exp(a_log) < 0
    TensorT<T> d_skip;       // [n_heads]
    TensorT<T> conv_kernel;  // [conv_width, d_inner + 2*n_groups*d_state]; unused when conv off
    TensorT<T> w_out;        // [d_inner, d_model]
};

using SsdLayerParams = SsdLayerParamsT<float>;

// Decode-time continuation state: recurrent matrices plus the raw tail of
// the conv input window.
template <typename T>
struct MambaStateT {
    SsmStateT<T> ssm;
    TensorT<T> conv_tail;  // [conv_width-1, conv_channels]; zero rows before the sequence start

    static MambaStateT zeros(const SsdConfig& cfg) {
        MambaStateT s{SsmStateT<T>::zeros(cfg), {}};
        if (cfg.use_conv())
            s.conv_tail = TensorT<T>({cfg.conv_width - 1, cfg.conv_channels()}, T(0));
        return s;
    }
};

using MambaState = MambaStateT<float>;

template <typename T>
struct SsdLayerResult {
    TensorT<T> residual;    // [T, d_model]
    MambaStateT<T> state;
};

namespace detail {

// Depthwise causal conv + silu over the stacked x/B/C streams. `tail` holds
// the conv_width-1 rows preceding this segment.
template <typename T>
TensorT<T> causal_conv_silu(const SsdConfig& cfg, const TensorT<T>& kernel, const TensorT<T>& xbc,
                            const TensorT<T>& tail) {
    const int64_t seq = xbc.dim(0), ch = xbc.dim(1), w = cfg.conv_width;
    if (kernel.dim(0) != w || kernel.dim(1) != ch)
        throw ShapeError("ssd conv kernel must be [conv_width, channels]");
    TensorT<T> out({seq, ch});
    for (int64_t t = 0; t < seq; ++t) {
        for (int64_t cc = 0; cc < ch; ++cc) {
            T acc = T(0);
            for (int64_t k = 0; k < w; ++k) {
                const int64_t src = t - (w - 1) + k;
                T v;
                if (src >= 0) {
                    v = xbc.at(src, cc);
                } else {
                    const int64_t tail_row = src + (w - 1);  // -1 maps to last tail row
                    v = tail.at(tail_row, cc);
                }
                acc += kernel.at(k, cc) * v;
            }
            out.at(t, cc) = silu_scalar(acc);
        }
    }
    return out;
}

}  // namespace detail

// One Mamba2 layer over the residual stream:
//   in-projections -> optional conv+silu on x/B/C -> dt = softplus(proj + bias)
//   -> scan -> out = out_proj(silu(gate) * y) -> residual add.
// `prev` carries decode continuation state (nullptr = sequence start).
// `pre_norm_gain` applies the block's RMS pre-norm to the mixer input.
template <typename T>
SsdLayerResult<T> ssd_layer_forward(const SsdConfig& cfg, const SsdLayerParamsT<T>& params,
                                    const TensorT<T>& residual_in,
                                    std::type_identity_t<const MambaStateT<T>*> prev,
                                    std::type_identity_t<const TensorT<T>*> pre_norm_gain = nullptr,
                                    double norm_eps = 1e-5) {
    cfg.validate();
    require_rank(residual_in, 2, "ssd_layer residual_in");
    const int64_t seq = residual_in.dim(0);
    const int64_t d_model = residual_in.dim(1);
    if (params.w_x.dim(0) != d_model)
        throw ShapeError("ssd_layer: residual width " + std::to_string(d_model) +
                         " does not match w_x " + params.w_x.shape_str());

    const TensorT<T> u =
        pre_norm_gain ? rmsnorm(residual_in, *pre_norm_gain, norm_eps) : residual_in;

    TensorT<T> xs = matmul(u, params.w_x);      // [T, d_inner]
    TensorT<T> bs = matmul(u, params.w_b);      // [T, G*N]
    TensorT<T> cs = matmul(u, params.w_c);      // [T, G*N]
    TensorT<T> zs = matmul(u, params.w_gate);   // [T, d_inner]
    TensorT<T> dt_raw = matmul(u, params.w_dt); // [T, H]

    const int64_t di = cfg.d_inner(), gn = cfg.bc_width();
    MambaStateT<T> next = prev ? *prev : MambaStateT<T>::zeros(cfg);

    if (cfg.use_conv()) {
        TensorT<T> xbc({seq, cfg.conv_channels()});
        for (int64_t t = 0; t < seq; ++t) {
            T* row = xbc.row_ptr(t);
            std::memcpy(row, xs.row_ptr(t), sizeof(T) * static_cast<size_t>(di));
            std::memcpy(row + di, bs.row_ptr(t), sizeof(T) * static_cast<size_t>(gn));
            std::memcpy(row + di + gn, cs.row_ptr(t), sizeof(T) * static_cast<size_t>(gn));
        }
        TensorT<T> conved = detail::causal_conv_silu(cfg, params.conv_kernel, xbc, next.conv_tail);
        // Roll the raw window forward for the next call.
        const int64_t tail_rows = cfg.conv_width - 1;
        for (int64_t r = 0; r < tail_rows; ++r) {
            const int64_t src = seq - tail_rows + r;
            for (int64_t cc = 0; cc < cfg.conv_channels(); ++cc)
                next.conv_tail.at(r, cc) =
                    src >= 0 ? xbc.at(src, cc) : next.conv_tail.at(r + seq, cc);
        }
        for (int64_t t = 0; t < seq; ++t) {
            const T* row = conved.row_ptr(t);
            std::memcpy(xs.row_ptr(t), row, sizeof(T) * static_cast<size_t>(di));
            std::memcpy(bs.row_ptr(t), row + di, sizeof(T) * static_cast<size_t>(gn));
            std::memcpy(cs.row_ptr(t), row + di + gn, sizeof(T) * static_cast<size_t>(gn));
        }
    }

    // Discretization step sizes, strictly positive.
    TensorT<T> dt({seq, cfg.n_heads});
    for (int64_t t = 0; t < seq; ++t)
        for (int64_t h = 0; h < cfg.n_heads; ++h)
            dt.at(t, h) = softplus(dt_raw.at(t, h) + params.dt_bias.at(h));

    TensorT<T> a({cfg.n_heads});
    for (int64_t h = 0; h < cfg.n_heads; ++h) a.at(h) = -std::exp(params.a_log.at(h));

    // Reshape streams to the per-head layout.
    TensorT<T> x3({seq, cfg.n_heads, cfg.d_head});
    x3.data = xs.data;
    TensorT<T> b3({seq, cfg.n_groups, cfg.d_state});
    b3.data = bs.data;
    TensorT<T> c3({seq, cfg.n_groups, cfg.d_state});
    c3.data = cs.data;

    SsdScanResult<T> scan;
    if (seq == 1 && prev != nullptr) {
        // Decode path: single-token selective state update.
        TensorT<T> dt1({cfg.n_heads});
        dt1.data = dt.data;
        TensorT<T> x1({cfg.n_heads, cfg.d_head});
        x1.data = xs.data;
        TensorT<T> b1({cfg.n_groups, cfg.d_state});
        b1.data = bs.data;
        TensorT<T> c1({cfg.n_groups, cfg.d_state});
        c1.data = cs.data;
        scan = ssd_decode_step(cfg, a, dt1, x1, b1, c1, params.d_skip, next.ssm);
    } else {
        scan = ssd_chunked_scan(cfg, a, dt, x3, b3, c3, params.d_skip, next.ssm);
    }
    next.ssm = scan.state;

    // Gated output projection back into the residual stream.
    TensorT<T> gated({seq, di});
    for (int64_t t = 0; t < seq; ++t)
        for (int64_t i = 0; i < di; ++i)
            gated.at(t, i) = silu_scalar(zs.at(t, i)) * scan.y.data[static_cast<size_t>(t * di + i)];
    TensorT<T> proj = matmul(gated, params.w_out);  // [T, d_model]

    SsdLayerResult<T> out{residual_in, std::move(next)};
    for (size_t i = 0; i < out.residual.data.size(); ++i) out.residual.data[i] += proj.data[i];
    return out;
}

}  // namespace hyts
