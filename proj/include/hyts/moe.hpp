// Mixture-of-experts feed-forward layer: softmax router with top-k
// selection over the specialized experts, an always-on shared expert added
// with weight 1, and capacity accounting with the gamma factor.
#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "hyts/ops.hpp"
#include "hyts/tensor.hpp"

namespace hyts {

enum class DropPolicy {
    NoDrop,          // inference default: every routed token is processed
    DropToCapacity,  // contributions beyond per-expert capacity are omitted
};

struct MoeConfig {
    int64_t n_experts = 32;
    int64_t n_shared = 1;
    int64_t top_k = 2;
    double capacity_factor = 1.5;
    int64_t d_ff = 128;
    DropPolicy drop_policy = DropPolicy::NoDrop;

    void validate() const {
        if (n_experts < 1) throw ConfigError("MoeConfig.n_experts must be >= 1");
        if (top_k < 1 || top_k > n_experts)
            throw ConfigError("MoeConfig.top_k must be in [1, n_experts]");
        if (capacity_factor <= 0.0) throw ConfigError("MoeConfig.capacity_factor must be > 0");
        if (d_ff < 1) throw ConfigError("MoeConfig.d_ff must be >= 1");
        if (n_shared != 1) throw ConfigError("MoeConfig.n_shared must be 1");
    }
};

// Per-token routing outcome, flattened [tokens x k].
struct RoutingDecision {
    int64_t tokens = 0;
    int64_t k = 0;
    std::vector<int32_t> expert;   // selected expert ids, distinct per token
    std::vector<double> weight;    // renormalized probabilities, sum to 1 per token
    std::vector<uint8_t> dropped;  // capacity drops (never set under NoDrop)

    int32_t expert_at(int64_t t, int64_t j) const { return expert[size_t(t * k + j)]; }
    double weight_at(int64_t t, int64_t j) const { return weight[size_t(t * k + j)]; }
    bool dropped_at(int64_t t, int64_t j) const { return dropped[size_t(t * k + j)] != 0; }
};

// Softmax over all expert logits, take the top k by probability (ties broken
// toward the lowest expert index), renormalize the selected mass to 1.
template <typename T>
RoutingDecision route_topk(const TensorT<T>& router_logits, int64_t k) {
    require_rank(router_logits, 2, "route_topk logits");
    const int64_t tokens = router_logits.dim(0), n_experts = router_logits.dim(1);
    if (k < 1 || k > n_experts)
        throw ConfigError("route_topk: k=" + std::to_string(k) + " out of range for " +
                          std::to_string(n_experts) + " experts");

    const TensorT<T> probs = softmax_lastdim(router_logits);
    RoutingDecision d;
    d.tokens = tokens;
    d.k = k;
    d.expert.resize(size_t(tokens * k));
    d.weight.resize(size_t(tokens * k));
    d.dropped.assign(size_t(tokens * k), 0);

    std::vector<int32_t> order(static_cast<size_t>(n_experts));
    for (int64_t t = 0; t < tokens; ++t) {
        std::iota(order.begin(), order.end(), 0);
        const T* row = probs.row_ptr(t);
        std::partial_sort(order.begin(), order.begin() + k, order.end(),
                          [row](int32_t a, int32_t b) {
                              if (row[a] != row[b]) return row[a] > row[b];
                              return a < b;
                          });
        double mass = 0.0;
        for (int64_t j = 0; j < k; ++j) mass += double(row[order[size_t(j)]]);
        for (int64_t j = 0; j < k; ++j) {
            d.expert[size_t(t * k + j)] = order[size_t(j)];
            d.weight[size_t(t * k + j)] = double(row[order[size_t(j)]]) / mass;
        }
    }
    return d;
}

// Per-expert token budget: ceil(gamma * T * k / E).
inline int64_t expert_capacity(int64_t tokens, const MoeConfig& cfg) {
    cfg.validate();
    if (tokens < 1) throw ConfigError("expert_capacity: tokens must be >= 1");
    const double raw = cfg.capacity_factor * double(tokens) * double(cfg.top_k) /
                       double(cfg.n_experts);
    return static_cast<int64_t>(std::ceil(raw));
}

// Flag contributions beyond capacity in token order. Weights are not
// re-spread; the dropped contribution is simply omitted downstream.
inline void apply_capacity(RoutingDecision& d, const MoeConfig& cfg) {
    if (cfg.drop_policy == DropPolicy::NoDrop) return;
    const int64_t cap = expert_capacity(d.tokens, cfg);
    std::vector<int64_t> used(size_t(cfg.n_experts), 0);
    for (int64_t t = 0; t < d.tokens; ++t)
        for (int64_t j = 0; j < d.k; ++j) {
            int64_t& u = used[size_t(d.expert_at(t, j))];
            if (u >= cap)
                d.dropped[size_t(t * d.k + j)] = 1;
            else
                ++u;
        }
}

template <typename T>
struct MoeExpertT {
    TensorT<T> w_gate;  // [d_model, d_ff]
    TensorT<T> w_up;    // [d_model, d_ff]
    TensorT<T> w_down;  // [d_ff, d_model]
};

template <typename T>
struct MoeLayerParamsT {
    TensorT<T> router_w;               // [d_model, n_experts]
    MoeExpertT<T> shared;              // applied to every token, weight 1
    std::vector<MoeExpertT<T>> experts;
};

using MoeExpert = MoeExpertT<float>;
using MoeLayerParams = MoeLayerParamsT<float>;

namespace detail {

// Gated feed-forward on one row: down(silu(gate(x)) * up(x)), accumulated
// into out with the given weight.
template <typename T>
void expert_apply(const MoeExpertT<T>& e, const T* x, int64_t d_model, double weight, T* out) {
    const int64_t d_ff = e.w_gate.dim(1);
    std::vector<T> hidden(static_cast<size_t>(d_ff));
    for (int64_t j = 0; j < d_ff; ++j) {
        T g = T(0), u = T(0);
        for (int64_t i = 0; i < d_model; ++i) {
            g += x[i] * e.w_gate.at(i, j);
            u += x[i] * e.w_up.at(i, j);
        }
        hidden[size_t(j)] = silu_scalar(g) * u;
    }
    for (int64_t i = 0; i < d_model; ++i) {
        T acc = T(0);
        for (int64_t j = 0; j < d_ff; ++j) acc += hidden[size_t(j)] * e.w_down.at(j, i);
        out[i] += static_cast<T>(weight * double(acc));
    }
}

}  // namespace detail

// y_t = shared(x_t) + sum_{i in topk} w_i * expert_i(x_t); the residual add
// is the caller's job. Pass out_decision to inspect routing.
template <typename T>
TensorT<T> moe_forward(const MoeConfig& cfg, const MoeLayerParamsT<T>& params, const TensorT<T>& x,
                       RoutingDecision* out_decision = nullptr) {
    cfg.validate();
    require_rank(x, 2, "moe_forward x");
    const int64_t tokens = x.dim(0), d_model = x.dim(1);
    if (params.router_w.dim(0) != d_model || params.router_w.dim(1) != cfg.n_experts)
        throw ShapeError("moe_forward: router weights " + params.router_w.shape_str() +
                         " do not match d_model/n_experts");
    if (int64_t(params.experts.size()) != cfg.n_experts)
        throw ShapeError("moe_forward: expected " + std::to_string(cfg.n_experts) + " experts, got " +
                         std::to_string(params.experts.size()));

    const TensorT<T> logits = matmul(x, params.router_w);
    RoutingDecision d = route_topk(logits, cfg.top_k);
    apply_capacity(d, cfg);

    TensorT<T> y({tokens, d_model}, T(0));
    for (int64_t t = 0; t < tokens; ++t) {
        const T* xrow = x.row_ptr(t);
        T* yrow = y.row_ptr(t);
        detail::expert_apply(params.shared, xrow, d_model, 1.0, yrow);
        for (int64_t j = 0; j < cfg.top_k; ++j) {
            if (d.dropped_at(t, j)) continue;
            detail::expert_apply(params.experts[size_t(d.expert_at(t, j))], xrow, d_model,
                                 d.weight_at(t, j), yrow);
        }
    }
    if (out_decision) *out_decision = std::move(d);
    return y;
}

struct LoadBalanceStats {
    std::vector<int64_t> counts;    // routed (non-dropped) tokens per expert
    std::vector<double> fraction;   // counts / total routed
    double max_over_mean = 0.0;
    int64_t total_routed = 0;
    int64_t total_dropped = 0;
};

inline LoadBalanceStats load_balance_stats(const std::vector<RoutingDecision>& decisions,
                                           int64_t n_experts) {
    int64_t tokens = 0;
    for (const auto& d : decisions) tokens += d.tokens;
    if (tokens < 1) throw ConfigError("load_balance_stats: need at least one token");
    LoadBalanceStats s;
    s.counts.assign(size_t(n_experts), 0);
    for (const auto& d : decisions)
        for (int64_t t = 0; t < d.tokens; ++t)
            for (int64_t j = 0; j < d.k; ++j) {
                if (d.dropped_at(t, j)) {
                    ++s.total_dropped;
                    continue;
                }
                ++s.counts[size_t(d.expert_at(t, j))];
                ++s.total_routed;
            }
    s.fraction.assign(size_t(n_experts), 0.0);
    int64_t mx = 0;
    for (size_t e = 0; e < s.counts.size(); ++e) {
        if (s.total_routed > 0) s.fraction[e] = double(s.counts[e]) / double(s.total_routed);
        mx = std::max(mx, s.counts[e]);
    }
    const double mean = double(s.total_routed) / double(n_experts);
    s.max_over_mean = mean > 0 ? double(mx) / mean : 0.0;
    return s;
}

}  // namespace hyts
