// Hybrid model assembly: interleaved Attention / Mamba2 / MoE-FFN layers
// over a shared residual stream, with per-sequence Session state for
// incremental decoding.
//
// Layer counting follows the block pattern string one character per layer:
// 'A' attention, 'M' mamba, 'F' feed-forward.
#pragma once

#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "hyts/attention.hpp"
#include "hyts/moe.hpp"
#include "hyts/ops.hpp"
#include "hyts/ssd.hpp"
#include "hyts/tensor.hpp"

namespace hyts {

enum class BlockKind { Attention, Mamba, Ffn };

inline char block_kind_char(BlockKind k) {
    switch (k) {
        case BlockKind::Attention: return 'A';
        case BlockKind::Mamba: return 'M';
        case BlockKind::Ffn: return 'F';
    }
    return '?';
}

struct LayerCensus {
    int64_t attention = 0;
    int64_t mamba = 0;
    int64_t ffn = 0;

    int64_t total() const { return attention + mamba + ffn; }
    double attention_frac() const { return double(attention) / double(total()); }
    double mamba_frac() const { return double(mamba) / double(total()); }
    double ffn_frac() const { return double(ffn) / double(total()); }
};

// Parse a block pattern like "AMFMFMFMF". Whitespace is stripped; anything
// else outside {A,M,F} raises ParseError with the character offset.
inline std::pair<std::vector<BlockKind>, LayerCensus> parse_block_pattern(std::string_view s) {
    std::vector<BlockKind> kinds;
    LayerCensus census;
    for (size_t i = 0; i < s.size(); ++i) {
        const char c = s[i];
        if (c == ' ' || c == '\t' || c == '\n' || c == '\r') continue;
        switch (c) {
            case 'A':
                kinds.push_back(BlockKind::Attention);
                ++census.attention;
                break;
            case 'M':
                kinds.push_back(BlockKind::Mamba);
                ++census.mamba;
                break;
            case 'F':
                kinds.push_back(BlockKind::Ffn);
                ++census.ffn;
                break;
            default:
                throw ParseError("block pattern: illegal character '" + std::string(1, c) +
                                 "' at offset " + std::to_string(i));
        }
    }
    if (kinds.empty()) throw ParseError("block pattern: empty after stripping whitespace");
    return {std::move(kinds), census};
}

// Production-shape validator: a pattern claiming the turbos-128 preset must
// have exactly (7 attention, 57 mamba, 64 ffn) layers with fractions
// 5.5% / 44.5% / 50% within half a point. Pure AMF+MF tiling cannot reach
// F=64 with A=7: the canonical pattern appends standalone F layers.
inline void validate_turbos128_pattern(std::string_view pattern) {
    const auto [kinds, census] = parse_block_pattern(pattern);
    if (census.attention != 7 || census.mamba != 57 || census.ffn != 64)
        throw ConfigError("turbos-128 pattern census must be (A=7, M=57, F=64), got (A=" +
                          std::to_string(census.attention) + ", M=" + std::to_string(census.mamba) +
                          ", F=" + std::to_string(census.ffn) + ")");
    auto within = [](double got, double want) { return std::abs(got * 100.0 - want) <= 0.5; };
    if (!within(census.attention_frac(), 5.5) || !within(census.mamba_frac(), 44.5) ||
        !within(census.ffn_frac(), 50.0))
        throw ConfigError("turbos-128 pattern fractions out of tolerance");
}

// Canonical 128-layer interleaving: 7 groups of AMF + 7x MF, one extra MF,
// then 7 trailing F layers to reach the (7, 57, 64) census.
inline std::string turbos128_pattern() {
    std::string p;
    for (int g = 0; g < 7; ++g) {
        p += "AMF";
        for (int r = 0; r < 7; ++r) p += "MF";
    }
    p += "MF";
    p += std::string(7, 'F');
    return p;
}

struct ModelConfig {
    int64_t d_model = 64;
    int64_t vocab_size = 259;
    std::string block_pattern = "AMFMFMFMF";
    AttnConfig attn;
    SsdConfig ssd;
    MoeConfig moe;
    double norm_eps = 1e-5;
    uint64_t seed = 42;
    bool tie_embeddings = true;

    void validate() const {
        if (d_model < 1) throw ConfigError("ModelConfig.d_model must be >= 1");
        if (vocab_size < 1) throw ConfigError("ModelConfig.vocab_size must be >= 1");
        if (norm_eps <= 0) throw ConfigError("ModelConfig.norm_eps must be > 0");
        const auto [kinds, census] = parse_block_pattern(block_pattern);
        (void)census;
        attn.validate();
        ssd.validate();
        moe.validate();
        if (attn.n_q_heads * attn.d_head != d_model)
            throw ConfigError("ModelConfig: n_q_heads * d_head must equal d_model");
    }
};

// Context ceiling for decode; not a config-file field.
inline constexpr int64_t kMaxContext = 32768;

// Byte-level token ids.
inline constexpr int32_t kTokenBos = 256;
inline constexpr int32_t kTokenEos = 257;
inline constexpr int32_t kTokenPad = 258;

inline std::vector<int32_t> encode_bytes(std::string_view text, bool add_bos = true) {
    std::vector<int32_t> ids;
    ids.reserve(text.size() + 1);
    if (add_bos) ids.push_back(kTokenBos);
    for (unsigned char c : text) ids.push_back(static_cast<int32_t>(c));
    return ids;
}

inline std::string decode_bytes(std::span<const int32_t> ids) {
    std::string out;
    for (int32_t id : ids)
        if (id >= 0 && id < 256) out.push_back(static_cast<char>(id));
    return out;
}

// One residual-stream layer: its kind, pre-norm gain, and parameters.
struct Block {
    BlockKind kind;
    Tensor norm_gain;  // [d_model]
    std::variant<AttnLayerParams, SsdLayerParams, MoeLayerParams> params;
};

struct Model {
    ModelConfig cfg;
    std::vector<BlockKind> layout;
    LayerCensus census;
    Tensor embedding;        // [vocab, d_model]
    std::vector<Block> blocks;
    Tensor final_norm_gain;  // [d_model]
    Tensor lm_head;          // [d_model, vocab]; empty when tied to the embedding
};

// Per-sequence inference cache bundle: one KV cache per attention layer,
// one recurrent state per mamba layer, a position counter. Single-owner;
// never share one Session across threads.
struct Session {
    std::vector<KvCache> kv;          // indexed by attention-layer ordinal
    std::vector<MambaState> mamba;    // indexed by mamba-layer ordinal
    int64_t position = 0;
};

namespace detail {

inline Tensor init_matrix(uint64_t seed, const std::string& name, int64_t rows, int64_t cols) {
    Rng rng = Rng::named(seed, name);
    Tensor t({rows, cols});
    const double s = 1.0 / std::sqrt(double(rows));  // fan-in scaled uniform
    fill_uniform(t, rng, -s, s);
    return t;
}

inline Tensor init_vector(uint64_t seed, const std::string& name, int64_t n, double lo, double hi) {
    Rng rng = Rng::named(seed, name);
    Tensor t({n});
    fill_uniform(t, rng, lo, hi);
    return t;
}

inline AttnLayerParams init_attn_params(const ModelConfig& cfg, const std::string& prefix) {
    AttnLayerParams p;
    const AttnConfig& a = cfg.attn;
    p.w_q = init_matrix(cfg.seed, prefix + ".w_q", cfg.d_model, a.n_q_heads * a.d_head);
    p.w_k = init_matrix(cfg.seed, prefix + ".w_k", cfg.d_model, a.n_kv_heads * a.d_head);
    p.w_v = init_matrix(cfg.seed, prefix + ".w_v", cfg.d_model, a.n_kv_heads * a.d_head);
    p.w_o = init_matrix(cfg.seed, prefix + ".w_o", a.n_q_heads * a.d_head, cfg.d_model);
    p.q_gain = Tensor::ones({a.d_head});
    p.k_gain = Tensor::ones({a.d_head});
    return p;
}

inline SsdLayerParams init_ssd_params(const ModelConfig& cfg, const std::string& prefix) {
    SsdLayerParams p;
    const SsdConfig& s = cfg.ssd;
    p.w_x = init_matrix(cfg.seed, prefix + ".w_x", cfg.d_model, s.d_inner());
    p.w_gate = init_matrix(cfg.seed, prefix + ".w_gate", cfg.d_model, s.d_inner());
    p.w_b = init_matrix(cfg.seed, prefix + ".w_b", cfg.d_model, s.bc_width());
    p.w_c = init_matrix(cfg.seed, prefix + ".w_c", cfg.d_model, s.bc_width());
    p.w_dt = init_matrix(cfg.seed, prefix + ".w_dt", cfg.d_model, s.n_heads);
    // dt lands in softplus([-3,-1]) ~ [0.05, 0.31]; decay rates exp of [ln .5, ln 4].
    p.dt_bias = init_vector(cfg.seed, prefix + ".dt_bias", s.n_heads, -3.0, -1.0);
    p.a_log = init_vector(cfg.seed, prefix + ".a_log", s.n_heads, std::log(0.5), std::log(4.0));
    p.d_skip = init_vector(cfg.seed, prefix + ".d_skip", s.n_heads, 0.5, 1.5);
    if (s.use_conv()) {
        Rng rng = Rng::named(cfg.seed, prefix + ".conv_kernel");
        p.conv_kernel = Tensor({s.conv_width, s.conv_channels()});
        const double cs = 1.0 / std::sqrt(double(s.conv_width));
        fill_uniform(p.conv_kernel, rng, -cs, cs);
    }
    p.w_out = init_matrix(cfg.seed, prefix + ".w_out", s.d_inner(), cfg.d_model);
    return p;
}

inline MoeLayerParams init_moe_params(const ModelConfig& cfg, const std::string& prefix) {
    MoeLayerParams p;
    const MoeConfig& m = cfg.moe;
    p.router_w = init_matrix(cfg.seed, prefix + ".router_w", cfg.d_model, m.n_experts);
    auto expert = [&](const std::string& name) {
        MoeExpert e;
        e.w_gate = init_matrix(cfg.seed, name + ".w_gate", cfg.d_model, m.d_ff);
        e.w_up = init_matrix(cfg.seed, name + ".w_up", cfg.d_model, m.d_ff);
        e.w_down = init_matrix(cfg.seed, name + ".w_down", m.d_ff, cfg.d_model);
        return e;
    };
    p.shared = expert(prefix + ".shared");
    for (int64_t e = 0; e < m.n_experts; ++e)
        p.experts.push_back(expert(prefix + ".experts." + std::to_string(e)));
    return p;
}

}  // namespace detail

// Deterministic seeded construction: a given seed yields bit-identical
// weights on every run regardless of build order.
inline Model build_model(const ModelConfig& cfg) {
    cfg.validate();
    Model m;
    m.cfg = cfg;
    auto parsed = parse_block_pattern(cfg.block_pattern);
    m.layout = std::move(parsed.first);
    m.census = parsed.second;

    m.embedding = detail::init_matrix(cfg.seed, "embedding", cfg.vocab_size, cfg.d_model);
    m.final_norm_gain = Tensor::ones({cfg.d_model});
    if (!cfg.tie_embeddings)
        m.lm_head = detail::init_matrix(cfg.seed, "lm_head", cfg.d_model, cfg.vocab_size);

    for (size_t i = 0; i < m.layout.size(); ++i) {
        const std::string prefix = "blocks." + std::to_string(i);
        Block b;
        b.kind = m.layout[i];
        b.norm_gain = Tensor::ones({cfg.d_model});
        switch (b.kind) {
            case BlockKind::Attention:
                b.params = detail::init_attn_params(cfg, prefix + ".attn");
                break;
            case BlockKind::Mamba:
                b.params = detail::init_ssd_params(cfg, prefix + ".ssd");
                break;
            case BlockKind::Ffn:
                b.params = detail::init_moe_params(cfg, prefix + ".moe");
                break;
        }
        m.blocks.push_back(std::move(b));
    }
    return m;
}

inline Session make_session(const Model& m) {
    Session s;
    for (BlockKind k : m.layout) {
        if (k == BlockKind::Attention) s.kv.push_back(KvCache::make(m.cfg.attn));
        if (k == BlockKind::Mamba) s.mamba.push_back(MambaState::zeros(m.cfg.ssd));
    }
    return s;
}

namespace detail {

inline Tensor embed_tokens(const Model& m, std::span<const int32_t> tokens) {
    Tensor h({int64_t(tokens.size()), m.cfg.d_model});
    for (size_t t = 0; t < tokens.size(); ++t) {
        const int32_t id = tokens[t];
        if (id < 0 || id >= m.cfg.vocab_size)
            throw InputError("token id " + std::to_string(id) + " outside vocabulary of " +
                             std::to_string(m.cfg.vocab_size));
        std::memcpy(h.row_ptr(int64_t(t)), m.embedding.row_ptr(id),
                    sizeof(float) * size_t(m.cfg.d_model));
    }
    return h;
}

// Run all blocks over a span of embedded tokens, updating the session.
inline Tensor run_blocks(const Model& m, Tensor h, Session& session) {
    size_t kv_idx = 0, mamba_idx = 0;
    for (const Block& b : m.blocks) {
        switch (b.kind) {
            case BlockKind::Attention: {
                const auto& p = std::get<AttnLayerParams>(b.params);
                KvCache& cache = session.kv[kv_idx++];
                if (h.dim(0) == 1 && cache.len > 0)
                    h = gqa_decode_step(m.cfg.attn, p, h, cache, &b.norm_gain, m.cfg.norm_eps);
                else
                    h = gqa_prefill(m.cfg.attn, p, h, cache, -1, &b.norm_gain, m.cfg.norm_eps);
                break;
            }
            case BlockKind::Mamba: {
                const auto& p = std::get<SsdLayerParams>(b.params);
                MambaState& state = session.mamba[mamba_idx];
                auto r = ssd_layer_forward(m.cfg.ssd, p, h,
                                           session.position > 0 ? &state : nullptr, &b.norm_gain,
                                           m.cfg.norm_eps);
                h = std::move(r.residual);
                session.mamba[mamba_idx] = std::move(r.state);
                ++mamba_idx;
                break;
            }
            case BlockKind::Ffn: {
                const auto& p = std::get<MoeLayerParams>(b.params);
                Tensor normed = rmsnorm(h, b.norm_gain, m.cfg.norm_eps);
                Tensor delta = moe_forward(m.cfg.moe, p, normed);
                for (size_t i = 0; i < h.data.size(); ++i) h.data[i] += delta.data[i];
                break;
            }
        }
    }
    return h;
}

inline Tensor project_logits(const Model& m, const Tensor& h) {
    Tensor normed = rmsnorm(h, m.final_norm_gain, m.cfg.norm_eps);
    const int64_t seq = normed.dim(0), dm = m.cfg.d_model, vocab = m.cfg.vocab_size;
    Tensor logits({seq, vocab}, 0.0f);
    if (m.cfg.tie_embeddings) {
        // logits = normed . embedding^T
        for (int64_t t = 0; t < seq; ++t) {
            const float* hrow = normed.row_ptr(t);
            float* lrow = logits.row_ptr(t);
            for (int64_t v = 0; v < vocab; ++v) {
                const float* erow = m.embedding.row_ptr(v);
                float acc = 0.0f;
                for (int64_t i = 0; i < dm; ++i) acc += hrow[i] * erow[i];
                lrow[v] = acc;
            }
        }
    } else {
        logits = matmul(normed, m.lm_head);
    }
    return logits;
}

}  // namespace detail

// Full-sequence prefill: next-token logits for every position plus a
// session primed to decode at position T.
inline std::pair<Tensor, Session> prefill(const Model& m, std::span<const int32_t> tokens) {
    if (tokens.empty()) throw InputError("prefill: need at least one token");
    if (int64_t(tokens.size()) > kMaxContext)
        throw CapacityError("prefill: sequence exceeds max context");
    Session session = make_session(m);
    Tensor h = detail::embed_tokens(m, tokens);
    h = detail::run_blocks(m, std::move(h), session);
    session.position = int64_t(tokens.size());
    Tensor logits = detail::project_logits(m, h);
    return {std::move(logits), std::move(session)};
}

// One incremental step: consumes `token`, advances the session, returns the
// next-token logits for the new position.
inline Tensor decode_step(const Model& m, Session& session, int32_t token) {
    if (session.position >= kMaxContext) throw CapacityError("decode_step: context overflow");
    const int32_t toks[1] = {token};
    Tensor h = detail::embed_tokens(m, std::span<const int32_t>(toks, 1));
    h = detail::run_blocks(m, std::move(h), session);
    session.position += 1;
    Tensor logits = detail::project_logits(m, h);
    Tensor row({m.cfg.vocab_size});
    row.data = std::move(logits.data);
    return row;
}

struct SamplingConfig {
    bool greedy = true;
    double temperature = 1.0;
    uint64_t seed = 0;
};

// Greedy argmax with lowest-index tie break.
inline int32_t argmax_token(const Tensor& logits) {
    int32_t best = 0;
    float bv = logits.at(0);
    for (int64_t v = 1; v < logits.numel(); ++v)
        if (logits.at(v) > bv) {
            bv = logits.at(v);
            best = int32_t(v);
        }
    return best;
}

inline int32_t sample_token(const Tensor& logits, const SamplingConfig& s, Rng& rng) {
    if (s.greedy) return argmax_token(logits);
    if (s.temperature <= 0) throw ConfigError("sampling temperature must be > 0");
    Tensor scaled = logits;
    for (auto& v : scaled.data) v = float(double(v) / s.temperature);
    Tensor probs = softmax_lastdim(scaled);
    double u = rng.unit();
    double cum = 0.0;
    for (int64_t v = 0; v < probs.numel(); ++v) {
        cum += double(probs.at(v));
        if (u < cum) return int32_t(v);
    }
    return int32_t(probs.numel() - 1);
}

// Drive decode_step from a prompt. Greedy or seeded temperature sampling;
// generation is reproducible for a fixed seed.
inline std::vector<int32_t> generate(const Model& m, std::span<const int32_t> prompt,
                                     int64_t max_new, const SamplingConfig& sampling,
                                     bool stop_on_eos = true) {
    if (max_new < 1) throw InputError("generate: max_new must be >= 1");
    Rng rng(sampling.seed);
    auto [logits, session] = prefill(m, prompt);
    Tensor last({m.cfg.vocab_size});
    std::memcpy(last.data.data(), logits.row_ptr(logits.dim(0) - 1),
                sizeof(float) * size_t(m.cfg.vocab_size));

    std::vector<int32_t> out;
    for (int64_t step = 0; step < max_new; ++step) {
        const int32_t next = sample_token(last, sampling, rng);
        out.push_back(next);
        if (stop_on_eos && next == kTokenEos) break;
        if (step + 1 < max_new) last = decode_step(m, session, next);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Presets

// Desk-scale configuration used by tests and the CLI default.
inline ModelConfig tiny_preset() {
    ModelConfig cfg;
    cfg.d_model = 64;
    cfg.vocab_size = 259;
    cfg.block_pattern = "AMFMFMFMF";  // census (A=1, M=4, F=4)
    cfg.attn.n_q_heads = 4;
    cfg.attn.n_kv_heads = 2;
    cfg.attn.d_head = 16;
    cfg.attn.rope.d_head = 16;
    cfg.attn.rope.base = 10000.0;
    cfg.attn.rope.ntk_alpha = 1.0;
    cfg.attn.use_qk_norm = true;
    cfg.ssd.n_heads = 4;
    cfg.ssd.d_head = 16;
    cfg.ssd.d_state = 16;
    cfg.ssd.n_groups = 2;
    cfg.ssd.chunk_size = 8;
    cfg.ssd.conv_width = 4;
    cfg.moe.n_experts = 4;
    cfg.moe.top_k = 2;
    cfg.moe.capacity_factor = 1.5;
    cfg.moe.d_ff = 128;
    cfg.norm_eps = 1e-5;
    cfg.seed = 42;
    cfg.tie_embeddings = true;
    return cfg;
}

// Full-scale architecture shape. Useful for census validation and analytic
// FLOP counting only; never materialize its weights.
inline ModelConfig turbos128_preset() {
    ModelConfig cfg;
    cfg.d_model = 5120;
    cfg.vocab_size = 131072;  // 128K
    cfg.block_pattern = turbos128_pattern();
    cfg.attn.n_q_heads = 64;
    cfg.attn.n_kv_heads = 8;
    cfg.attn.d_head = 80;
    cfg.attn.rope.d_head = 80;
    cfg.attn.rope.base = 10000.0;
    cfg.attn.rope.ntk_alpha = 1000.0;  // 256K-stage scaling
    cfg.attn.use_qk_norm = true;
    cfg.ssd.n_heads = 64;
    cfg.ssd.d_head = 80;
    cfg.ssd.d_state = 128;
    cfg.ssd.n_groups = 16;
    cfg.ssd.chunk_size = 128;
    cfg.ssd.conv_width = 4;
    cfg.moe.n_experts = 32;
    cfg.moe.top_k = 2;
    cfg.moe.capacity_factor = 1.5;
    cfg.moe.d_ff = 17024;
    cfg.seed = 1;
    cfg.tie_embeddings = false;
    validate_turbos128_pattern(cfg.block_pattern);
    return cfg;
}

}  // namespace hyts
