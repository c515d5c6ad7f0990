// Simulated context parallelism for the Mamba scan: one sequence sharded
// across R in-process ranks, with the two state-passing paradigms.
//
//   sequential  rank r finishes its shard, forwards the final state to
//               rank r+1 (R-1 point-to-point messages, chain depth R)
//   parallel    every rank scans its shard from a zero state, one
//               all-gather publishes the per-shard total decays, each rank
//               forms only the cross-shard terms built from ITS OWN
//               boundary state, and one reduce-scatter sums the partial
//               initial states (constant chain depth, independent of R)
//
// "Communication" is an explicit payload handoff recorded in a CpTrace so
// tests can assert message structure; results must be identical however
// the simulated ranks are scheduled.
#pragma once

#include <algorithm>
#include <cmath>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "hyts/ssd.hpp"
#include "hyts/tensor.hpp"

namespace hyts {

struct CpPlan {
    int64_t n_ranks = 1;
    std::vector<std::pair<int64_t, int64_t>> shards;  // [lo, hi) contiguous, ordered
    int64_t chunk_size = 8;

    int64_t total() const { return shards.empty() ? 0 : shards.back().second; }
};

// Near-equal contiguous shards; sizes differ by at most one, longer shards
// first. T < R is a plan error.
inline CpPlan shard_sequence(int64_t total_len, int64_t n_ranks, int64_t chunk_size = 8) {
    if (n_ranks < 1) throw ConfigError("shard_sequence: n_ranks must be >= 1");
    if (total_len < n_ranks)
        throw ConfigError("shard_sequence: T=" + std::to_string(total_len) +
                          " shorter than R=" + std::to_string(n_ranks));
    CpPlan plan;
    plan.n_ranks = n_ranks;
    plan.chunk_size = chunk_size;
    const int64_t base = total_len / n_ranks, rem = total_len % n_ranks;
    int64_t lo = 0;
    for (int64_t r = 0; r < n_ranks; ++r) {
        const int64_t len = base + (r < rem ? 1 : 0);
        plan.shards.emplace_back(lo, lo + len);
        lo += len;
    }
    return plan;
}

enum class CpMessageKind { StateForward, AllGatherDecayChunk, ReduceScatterStates };

inline const char* cp_message_kind_name(CpMessageKind k) {
    switch (k) {
        case CpMessageKind::StateForward: return "StateForward";
        case CpMessageKind::AllGatherDecayChunk: return "AllGatherDecayChunk";
        case CpMessageKind::ReduceScatterStates: return "ReduceScatterStates";
    }
    return "?";
}

// src/dst are rank ids; kGroup marks a collective endpoint. Payloads are
// shape descriptors only; the data itself moves through function returns.
struct CpMessage {
    static constexpr int64_t kGroup = -1;
    CpMessageKind kind;
    int64_t src;
    int64_t dst;
    std::vector<int64_t> payload_shape;
};

// Ordered message log plus the dependency DAG of per-rank compute phases
// and collectives. The log order is a valid topological order by
// construction; trace_critical_path re-checks that.
struct CpTrace {
    std::vector<CpMessage> messages;
    std::vector<std::string> nodes;
    std::vector<std::pair<int, int>> edges;  // a -> b: b depends on a

    int add_node(std::string label) {
        nodes.push_back(std::move(label));
        return int(nodes.size()) - 1;
    }
    void add_edge(int a, int b) { edges.emplace_back(a, b); }

    int64_t count(CpMessageKind k) const {
        int64_t n = 0;
        for (const auto& msg : messages)
            if (msg.kind == k) ++n;
        return n;
    }
};

// Longest dependency chain, counted in nodes. Kahn topological DP; a cycle
// raises TraceError.
inline int64_t trace_critical_path(const CpTrace& trace) {
    const int n = int(trace.nodes.size());
    if (n == 0) return 0;
    std::vector<std::vector<int>> out(size_t(n));
    std::vector<int> indeg(size_t(n), 0);
    for (auto [a, b] : trace.edges) {
        out[size_t(a)].push_back(b);
        ++indeg[size_t(b)];
    }
    std::vector<int> ready;
    std::vector<int64_t> depth(size_t(n), 1);
    for (int i = 0; i < n; ++i)
        if (indeg[size_t(i)] == 0) ready.push_back(i);
    int processed = 0;
    int64_t best = 0;
    while (!ready.empty()) {
        const int v = ready.back();
        ready.pop_back();
        ++processed;
        best = std::max(best, depth[size_t(v)]);
        for (int w : out[size_t(v)]) {
            depth[size_t(w)] = std::max(depth[size_t(w)], depth[size_t(v)] + 1);
            if (--indeg[size_t(w)] == 0) ready.push_back(w);
        }
    }
    if (processed != n) throw TraceError("trace_critical_path: dependency graph has a cycle");
    return best;
}

// Line-delimited export: `kind src dst payload_shape`, collectives use the
// literal token "group". Stable field order for golden tests.
inline std::string trace_to_lines(const CpTrace& trace) {
    std::ostringstream os;
    for (const auto& m : trace.messages) {
        os << cp_message_kind_name(m.kind) << ' ';
        if (m.src == CpMessage::kGroup)
            os << "group ";
        else
            os << m.src << ' ';
        if (m.dst == CpMessage::kGroup)
            os << "group ";
        else
            os << m.dst << ' ';
        for (size_t i = 0; i < m.payload_shape.size(); ++i) {
            if (i) os << 'x';
            os << m.payload_shape[i];
        }
        os << '\n';
    }
    return os.str();
}

template <typename T>
struct CpScanResult {
    TensorT<T> y;          // [T, H, P] concatenated over shards
    SsmStateT<T> h_final;  // state after the last token of the last shard
    CpTrace trace;
};

namespace detail {

template <typename T>
struct ShardInputs {
    TensorT<T> dt, x, b, c;
};

template <typename T>
ShardInputs<T> slice_shard(const TensorT<T>& dt, const TensorT<T>& x, const TensorT<T>& b,
                           const TensorT<T>& c, int64_t lo, int64_t hi) {
    auto slice = [&](const TensorT<T>& t) {
        std::vector<int64_t> shape = t.shape;
        shape[0] = hi - lo;
        TensorT<T> out(shape);
        const int64_t stride = t.row_stride();
        std::copy(t.data.begin() + lo * stride, t.data.begin() + hi * stride, out.data.begin());
        return out;
    };
    return {slice(dt), slice(x), slice(b), slice(c)};
}

template <typename T>
void paste_shard(TensorT<T>& y, const TensorT<T>& shard_y, int64_t lo) {
    const int64_t stride = y.row_stride();
    std::copy(shard_y.data.begin(), shard_y.data.end(), y.data.begin() + lo * stride);
}

}  // namespace detail

// Sequential paradigm: rank r scans its shard with the state received from
// rank r-1 as initial state, then forwards its final state to rank r+1.
template <typename T>
CpScanResult<T> cp_sequential_scan(const CpPlan& plan, const SsdConfig& cfg, const TensorT<T>& a,
                                   const TensorT<T>& dt, const TensorT<T>& x, const TensorT<T>& b,
                                   const TensorT<T>& c, const TensorT<T>& d_skip,
                                   const SsmStateT<T>& h0) {
    if (plan.total() != dt.dim(0))
        throw ShapeError("cp_sequential_scan: plan does not cover the sequence");
    SsdConfig local_cfg = cfg;
    local_cfg.chunk_size = plan.chunk_size;

    CpScanResult<T> out{TensorT<T>({dt.dim(0), cfg.n_heads, cfg.d_head}, T(0)), h0, {}};
    SsmStateT<T> carry = h0;
    std::vector<int> rank_nodes;
    for (int64_t r = 0; r < plan.n_ranks; ++r) {
        const auto [lo, hi] = plan.shards[size_t(r)];
        auto in = detail::slice_shard(dt, x, b, c, lo, hi);
        auto res = ssd_chunked_scan(local_cfg, a, in.dt, in.x, in.b, in.c, d_skip, carry);
        detail::paste_shard(out.y, res.y, lo);
        carry = res.state;

        const int node = out.trace.add_node("rank" + std::to_string(r) + ".scan");
        if (!rank_nodes.empty()) out.trace.add_edge(rank_nodes.back(), node);
        rank_nodes.push_back(node);
        if (r + 1 < plan.n_ranks)
            out.trace.messages.push_back({CpMessageKind::StateForward, r, r + 1,
                                          {cfg.n_heads, cfg.d_head, cfg.d_state}});
    }
    out.h_final = carry;
    return out;
}

// Parallel paradigm. Phase 1: every rank scans its shard from a zero state
// (boundary state s_r) and computes the shard total decay D_r analytically.
// The all-gather publishes the decay_chunk table. Phase 2: rank q builds
// the partial terms (prod_{q<p<r} D_p) * s_q for every downstream rank r,
// omitting all terms whose boundary state lives on another rank; rank 0
// also owns the h0 terms. The reduce-scatter sums partials into each
// rank's true initial state. Phase 3: every rank re-scans its shard from
// the received state to finish its outputs.
template <typename T>
CpScanResult<T> cp_parallel_scan(const CpPlan& plan, const SsdConfig& cfg, const TensorT<T>& a,
                                 const TensorT<T>& dt, const TensorT<T>& x, const TensorT<T>& b,
                                 const TensorT<T>& c, const TensorT<T>& d_skip,
                                 const SsmStateT<T>& h0) {
    if (plan.total() != dt.dim(0))
        throw ShapeError("cp_parallel_scan: plan does not cover the sequence");
    const int64_t ranks = plan.n_ranks, nh = cfg.n_heads;
    SsdConfig local_cfg = cfg;
    local_cfg.chunk_size = plan.chunk_size;

    CpScanResult<T> out{TensorT<T>({dt.dim(0), cfg.n_heads, cfg.d_head}, T(0)), h0, {}};

    // Phase 1: local boundary states and per-shard decay_chunk.
    std::vector<SsmStateT<T>> boundary;
    TensorT<T> decay_chunk({ranks, nh}, T(0));  // the all-gathered table
    std::vector<int> phase1(size_t(ranks));
    std::vector<detail::ShardInputs<T>> shard_in;
    for (int64_t r = 0; r < ranks; ++r) {
        const auto [lo, hi] = plan.shards[size_t(r)];
        shard_in.push_back(detail::slice_shard(dt, x, b, c, lo, hi));
        auto res = ssd_chunked_scan(local_cfg, a, shard_in.back().dt, shard_in.back().x,
                                    shard_in.back().b, shard_in.back().c, d_skip,
                                    SsmStateT<T>::zeros(cfg));
        boundary.push_back(res.state);
        for (int64_t h = 0; h < nh; ++h) {
            double log_decay = 0.0;
            for (int64_t t = lo; t < hi; ++t)
                log_decay += double(dt.at(t, h)) * double(a.at(h));
            decay_chunk.at(r, h) = static_cast<T>(std::exp(log_decay));
        }
        phase1[size_t(r)] = out.trace.add_node("rank" + std::to_string(r) + ".local_scan");
    }

    const int gather = out.trace.add_node("allgather.decay_chunk");
    out.trace.messages.push_back(
        {CpMessageKind::AllGatherDecayChunk, CpMessage::kGroup, CpMessage::kGroup, {ranks, nh}});
    for (int64_t r = 0; r < ranks; ++r) out.trace.add_edge(phase1[size_t(r)], gather);

    // Phase 2: partial initial states. partial[q][r] is rank q's
    // contribution to rank r's initial state; terms with non-local boundary
    // states are never formed.
    std::vector<std::vector<SsmStateT<T>>> partial(
        size_t(ranks), std::vector<SsmStateT<T>>(size_t(ranks), SsmStateT<T>::zeros(cfg)));
    std::vector<int> phase2(size_t(ranks));
    for (int64_t q = 0; q < ranks; ++q) {
        phase2[size_t(q)] = out.trace.add_node("rank" + std::to_string(q) + ".partial_terms");
        out.trace.add_edge(gather, phase2[size_t(q)]);
        for (int64_t r = q + 1; r < ranks; ++r) {
            // prod_{q<p<r} D_p, per head, from the gathered table.
            SsmStateT<T>& term = partial[size_t(q)][size_t(r)];
            for (int64_t h = 0; h < nh; ++h) {
                double scale = 1.0;
                for (int64_t p = q + 1; p < r; ++p) scale *= double(decay_chunk.at(p, h));
                for (int64_t pi = 0; pi < cfg.d_head; ++pi)
                    for (int64_t ni = 0; ni < cfg.d_state; ++ni)
                        term.h.at(h, pi, ni) =
                            static_cast<T>(scale * double(boundary[size_t(q)].h.at(h, pi, ni)));
            }
        }
        if (q == 0) {
            // Rank 0 owns the sequence-initial state h0.
            for (int64_t r = 0; r < ranks; ++r) {
                SsmStateT<T>& term = partial[0][size_t(r)];
                for (int64_t h = 0; h < nh; ++h) {
                    double scale = 1.0;
                    for (int64_t p = 0; p < r; ++p) scale *= double(decay_chunk.at(p, h));
                    for (int64_t pi = 0; pi < cfg.d_head; ++pi)
                        for (int64_t ni = 0; ni < cfg.d_state; ++ni)
                            term.h.at(h, pi, ni) +=
                                static_cast<T>(scale * double(h0.h.at(h, pi, ni)));
                }
            }
        }
    }

    const int reduce = out.trace.add_node("reducescatter.init_states");
    out.trace.messages.push_back({CpMessageKind::ReduceScatterStates, CpMessage::kGroup,
                                  CpMessage::kGroup,
                                  {ranks, nh, cfg.d_head, cfg.d_state}});
    for (int64_t q = 0; q < ranks; ++q) out.trace.add_edge(phase2[size_t(q)], reduce);

    // Reduce: initial state for rank r = sum over q of partial[q][r].
    std::vector<SsmStateT<T>> init(size_t(ranks), SsmStateT<T>::zeros(cfg));
    for (int64_t r = 0; r < ranks; ++r)
        for (int64_t q = 0; q < ranks; ++q)
            for (size_t i = 0; i < init[size_t(r)].h.data.size(); ++i)
                init[size_t(r)].h.data[i] += partial[size_t(q)][size_t(r)].h.data[i];

    // Phase 3: finish outputs locally from the consolidated initial states.
    for (int64_t r = 0; r < ranks; ++r) {
        const auto [lo, hi] = plan.shards[size_t(r)];
        auto res = ssd_chunked_scan(local_cfg, a, shard_in[size_t(r)].dt, shard_in[size_t(r)].x,
                                    shard_in[size_t(r)].b, shard_in[size_t(r)].c, d_skip,
                                    init[size_t(r)]);
        detail::paste_shard(out.y, res.y, lo);
        const int node = out.trace.add_node("rank" + std::to_string(r) + ".final_scan");
        out.trace.add_edge(reduce, node);
        if (r == ranks - 1) out.h_final = res.state;
    }
    return out;
}

}  // namespace hyts
