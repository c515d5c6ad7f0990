#include <gtest/gtest.h>

#include <cmath>

#include "hyts/attention.hpp"
#include "test_util.hpp"

using namespace hyts;
using hyts_test::max_abs_diff;

namespace {

AttnConfig tiny_attn(bool qk = true) {
    AttnConfig cfg;
    cfg.n_q_heads = 4;
    cfg.n_kv_heads = 2;
    cfg.d_head = 16;
    cfg.rope.d_head = 16;
    cfg.use_qk_norm = qk;
    return cfg;
}

AttnLayerParams random_attn_params(const AttnConfig& cfg, int64_t d_model, uint64_t seed) {
    Rng rng(seed);
    AttnLayerParams p;
    const double s = 1.0 / std::sqrt(double(d_model));
    auto mat = [&](int64_t r, int64_t c) {
        Tensor t({r, c});
        fill_uniform(t, rng, -s, s);
        return t;
    };
    p.w_q = mat(d_model, cfg.n_q_heads * cfg.d_head);
    p.w_k = mat(d_model, cfg.n_kv_heads * cfg.d_head);
    p.w_v = mat(d_model, cfg.n_kv_heads * cfg.d_head);
    p.w_o = mat(cfg.n_q_heads * cfg.d_head, d_model);
    p.q_gain = Tensor::ones({cfg.d_head});
    p.k_gain = Tensor::ones({cfg.d_head});
    return p;
}

Tensor random_residual(int64_t seq, int64_t d_model, uint64_t seed) {
    Rng rng(seed);
    Tensor t({seq, d_model});
    fill_uniform(t, rng, -1.0, 1.0);
    return t;
}

// Plain multi-head attention oracle in double precision: no cache, no GQA
// sharing (valid when n_kv == n_q), explicit causal mask.
TensorD mha_oracle(const AttnConfig& cfg, const AttnLayerParams& p, const Tensor& residual_in) {
    const int64_t seq = residual_in.dim(0), dm = residual_in.dim(1);
    const int64_t nh = cfg.n_q_heads, dh = cfg.d_head;
    auto mm = [](const TensorD& a, const TensorD& b) {
        TensorD c({a.dim(0), b.dim(1)}, 0.0);
        for (int64_t i = 0; i < a.dim(0); ++i)
            for (int64_t j = 0; j < b.dim(1); ++j) {
                double acc = 0;
                for (int64_t k = 0; k < a.dim(1); ++k) acc += a.at(i, k) * b.at(k, j);
                c.at(i, j) = acc;
            }
        return c;
    };
    TensorD u = residual_in.cast<double>();
    TensorD q = mm(u, p.w_q.cast<double>());
    TensorD k = mm(u, p.w_k.cast<double>());
    TensorD v = mm(u, p.w_v.cast<double>());

    // optional per-head rms norm with unit-gain handling
    auto norm_heads = [&](TensorD& m, const Tensor& gain) {
        for (int64_t t = 0; t < seq; ++t)
            for (int64_t h = 0; h < nh; ++h) {
                double ss = 0;
                for (int64_t i = 0; i < dh; ++i) {
                    double val = m.at(t, h * dh + i);
                    ss += val * val;
                }
                const double inv = 1.0 / std::sqrt(ss / dh + cfg.norm_eps);
                for (int64_t i = 0; i < dh; ++i)
                    m.at(t, h * dh + i) = m.at(t, h * dh + i) * inv * double(gain.at(i));
            }
    };
    if (cfg.use_qk_norm) {
        norm_heads(q, p.q_gain);
        norm_heads(k, p.k_gain);
    }

    // rope
    const std::vector<double> freqs = rope_frequencies(cfg.rope);
    auto rope = [&](TensorD& m) {
        for (int64_t t = 0; t < seq; ++t)
            for (int64_t h = 0; h < nh; ++h)
                for (int64_t i = 0; i < dh / 2; ++i) {
                    const double ang = double(t) * freqs[size_t(i)];
                    const double a = m.at(t, h * dh + 2 * i), b = m.at(t, h * dh + 2 * i + 1);
                    m.at(t, h * dh + 2 * i) = a * std::cos(ang) - b * std::sin(ang);
                    m.at(t, h * dh + 2 * i + 1) = a * std::sin(ang) + b * std::cos(ang);
                }
    };
    rope(q);
    rope(k);

    TensorD attn({seq, nh * dh}, 0.0);
    const double scale = 1.0 / std::sqrt(double(dh));
    for (int64_t t = 0; t < seq; ++t)
        for (int64_t h = 0; h < nh; ++h) {
            std::vector<double> w(size_t(t + 1));
            double mx = -1e300;
            for (int64_t s = 0; s <= t; ++s) {
                double dot = 0;
                for (int64_t i = 0; i < dh; ++i) dot += q.at(t, h * dh + i) * k.at(s, h * dh + i);
                w[size_t(s)] = dot * scale;
                mx = std::max(mx, w[size_t(s)]);
            }
            double denom = 0;
            for (auto& x : w) {
                x = std::exp(x - mx);
                denom += x;
            }
            for (int64_t s = 0; s <= t; ++s)
                for (int64_t i = 0; i < dh; ++i)
                    attn.at(t, h * dh + i) += (w[size_t(s)] / denom) * v.at(s, h * dh + i);
        }
    TensorD out = mm(attn, p.w_o.cast<double>());
    for (int64_t t = 0; t < seq; ++t)
        for (int64_t j = 0; j < dm; ++j) out.at(t, j) += double(residual_in.at(t, j));
    return out;
}

}  // namespace

TEST(NtkRope, AlphaOneKeepsBaseExactly) {
    RopeConfig cfg;
    cfg.base = 10000.0;
    cfg.ntk_alpha = 1.0;
    cfg.d_head = 128;
    EXPECT_EQ(ntk_rope_base(cfg), 10000.0);
    // Same code path, same constants as a vanilla-rope frequency table.
    const auto f = rope_frequencies(cfg);
    for (size_t i = 0; i < f.size(); ++i)
        EXPECT_EQ(f[i], std::pow(10000.0, -2.0 * double(i) / 128.0));
}

TEST(NtkRope, MatchesDirectFormula) {
    RopeConfig cfg;
    cfg.base = 10000.0;
    cfg.ntk_alpha = 50.0;
    cfg.d_head = 128;
    const double expect = 10000.0 * std::pow(50.0, 128.0 / 126.0);
    EXPECT_NEAR(ntk_rope_base(cfg) / expect, 1.0, 1e-6);
}

TEST(NtkRope, MonotoneInAlpha) {
    RopeConfig a;
    a.ntk_alpha = 50.0;
    a.d_head = 128;
    RopeConfig b = a;
    b.ntk_alpha = 1000.0;
    EXPECT_GT(ntk_rope_base(b), ntk_rope_base(a));
}

TEST(NtkRope, RejectsDegenerateHead) {
    RopeConfig cfg;
    cfg.d_head = 2;
    EXPECT_THROW(ntk_rope_base(cfg), ConfigError);
}

TEST(ApplyRope, PositionZeroIsIdentity) {
    RopeConfig cfg;
    cfg.d_head = 8;
    Rng rng(1);
    Tensor q({1, 3, 8});
    fill_uniform(q, rng, -1.0, 1.0);
    Tensor out = apply_rope(q, {0}, cfg);
    EXPECT_EQ(out.data, q.data);
}

TEST(ApplyRope, PreservesNorm) {
    RopeConfig cfg;
    cfg.d_head = 16;
    cfg.ntk_alpha = 50.0;
    Rng rng(2);
    Tensor q({5, 2, 16});
    fill_uniform(q, rng, -1.0, 1.0);
    Tensor out = apply_rope(q, {0, 3, 10, 100, 1000}, cfg);
    for (int64_t t = 0; t < 5; ++t)
        for (int64_t h = 0; h < 2; ++h) {
            double n_in = 0, n_out = 0;
            for (int64_t i = 0; i < 16; ++i) {
                n_in += double(q.at(t, h, i)) * q.at(t, h, i);
                n_out += double(out.at(t, h, i)) * out.at(t, h, i);
            }
            EXPECT_NEAR(std::sqrt(n_in), std::sqrt(n_out), 1e-6);
        }
}

TEST(ApplyRope, RelativeAngleProperty) {
    // dot(R(p1)q, R(p2)k) depends only on p1 - p2.
    RopeConfig cfg;
    cfg.d_head = 16;
    Rng rng(3);
    Tensor q({1, 1, 16}), k({1, 1, 16});
    fill_uniform(q, rng, -1.0, 1.0);
    fill_uniform(k, rng, -1.0, 1.0);
    auto dot_at = [&](int64_t p1, int64_t p2) {
        Tensor rq = apply_rope(q, {p1}, cfg);
        Tensor rk = apply_rope(k, {p2}, cfg);
        double d = 0;
        for (int64_t i = 0; i < 16; ++i) d += double(rq.at(0, 0, i)) * rk.at(0, 0, i);
        return d;
    };
    for (int64_t c : {1, 17, 300})
        EXPECT_NEAR(dot_at(7, 3), dot_at(7 + c, 3 + c), 1e-5);
}

TEST(QkNorm, ScaleInvariance) {
    AttnConfig cfg = tiny_attn();
    Rng rng(4);
    Tensor q({3, 4, 16}), k({3, 2, 16});
    fill_uniform(q, rng, -1.0, 1.0);
    fill_uniform(k, rng, -1.0, 1.0);
    Tensor gain = Tensor::ones({16});
    auto [q1, k1] = qk_norm(q, k, gain, gain, 1e-9);
    Tensor q10 = q;
    for (auto& v : q10.data) v *= 10.0f;
    auto [q2, k2] = qk_norm(q10, k, gain, gain, 1e-9);
    EXPECT_LE(max_abs_diff(q1, q2), 1e-6);
}

TEST(QkNorm, ComposesPerHeadRmsnorm) {
    AttnConfig cfg = tiny_attn();
    Rng rng(5);
    Tensor q({3, 4, 16}), k({3, 2, 16});
    fill_uniform(q, rng, -1.0, 1.0);
    fill_uniform(k, rng, -1.0, 1.0);
    Tensor qg({16}), kg({16});
    fill_uniform(qg, rng, 0.5, 1.5);
    fill_uniform(kg, rng, 0.5, 1.5);
    auto [qn, kn] = qk_norm(q, k, qg, kg, 1e-5);
    // Per-head composition through the numerics-module rmsnorm.
    for (int64_t t = 0; t < 3; ++t)
        for (int64_t h = 0; h < 4; ++h) {
            Tensor head({16});
            for (int64_t i = 0; i < 16; ++i) head.at(i) = q.at(t, h, i);
            Tensor ref = rmsnorm(head, qg, 1e-5);
            for (int64_t i = 0; i < 16; ++i) EXPECT_NEAR(qn.at(t, h, i), ref.at(i), 1e-7);
        }
}

TEST(GqaPrefill, SingleTokenAttendsToItself) {
    AttnConfig cfg = tiny_attn(false);
    const int64_t dm = 64;
    AttnLayerParams p = random_attn_params(cfg, dm, 10);
    Tensor residual = random_residual(1, dm, 11);
    KvCache cache = KvCache::make(cfg);
    Tensor out = gqa_prefill(cfg, p, residual, cache);
    EXPECT_EQ(cache.len, 1);
    // With one position the attention weight is 1, so the output is
    // residual + w_o(v) exactly.
    Tensor vf = matmul(residual, p.w_v);
    Tensor attn({1, cfg.n_q_heads * cfg.d_head});
    for (int64_t h = 0; h < cfg.n_q_heads; ++h) {
        const int64_t kvh = cfg.kv_index(h);
        for (int64_t i = 0; i < cfg.d_head; ++i)
            attn.at(0, h * cfg.d_head + i) = vf.at(0, kvh * cfg.d_head + i);
    }
    Tensor expect = matmul(attn, p.w_o);
    for (int64_t j = 0; j < dm; ++j)
        EXPECT_NEAR(out.at(0, j), expect.at(0, j) + residual.at(0, j), 1e-5);
}

TEST(GqaPrefill, DegenerateGqaMatchesMhaOracle) {
    AttnConfig cfg = tiny_attn();
    cfg.n_kv_heads = cfg.n_q_heads;  // no sharing
    const int64_t dm = 64, seq = 12;
    AttnLayerParams p = random_attn_params(cfg, dm, 20);
    Tensor residual = random_residual(seq, dm, 21);
    KvCache cache = KvCache::make(cfg);
    Tensor out = gqa_prefill(cfg, p, residual, cache);
    TensorD ref = mha_oracle(cfg, p, residual);
    EXPECT_LE(hyts_test::max_abs_diff_cast(out, ref), 1e-5);
}

TEST(GqaPrefill, CausalPrefixProperty) {
    AttnConfig cfg = tiny_attn();
    const int64_t dm = 64, seq = 10, extra = 5;
    AttnLayerParams p = random_attn_params(cfg, dm, 30);
    Tensor full = random_residual(seq + extra, dm, 31);
    Tensor head({seq, dm});
    std::copy(full.data.begin(), full.data.begin() + seq * dm, head.data.begin());

    KvCache c1 = KvCache::make(cfg), c2 = KvCache::make(cfg);
    Tensor out_head = gqa_prefill(cfg, p, head, c1);
    Tensor out_full = gqa_prefill(cfg, p, full, c2);
    for (int64_t t = 0; t < seq; ++t)
        for (int64_t j = 0; j < dm; ++j) EXPECT_NEAR(out_head.at(t, j), out_full.at(t, j), 1e-5);
}

TEST(GqaPrefill, HeadSharingMap) {
    AttnConfig cfg;
    cfg.n_q_heads = 2;
    cfg.n_kv_heads = 1;
    cfg.d_head = 8;
    cfg.rope.d_head = 8;
    EXPECT_EQ(cfg.kv_index(0), 0);
    EXPECT_EQ(cfg.kv_index(1), 0);
    AttnConfig big = tiny_attn();
    big.n_q_heads = 64;
    big.n_kv_heads = 8;
    for (int64_t h = 0; h < 64; ++h) EXPECT_EQ(big.kv_index(h), h / 8);
}

TEST(GqaPrefill, PositionDiscontinuityThrows) {
    AttnConfig cfg = tiny_attn();
    const int64_t dm = 64;
    AttnLayerParams p = random_attn_params(cfg, dm, 40);
    Tensor residual = random_residual(3, dm, 41);
    KvCache cache = KvCache::make(cfg);
    EXPECT_THROW(gqa_prefill(cfg, p, residual, cache, /*start_pos=*/2), CacheError);
}

TEST(GqaDecode, FirstDecodeEqualsPrefillT1) {
    AttnConfig cfg = tiny_attn();
    const int64_t dm = 64;
    AttnLayerParams p = random_attn_params(cfg, dm, 50);
    Tensor residual = random_residual(1, dm, 51);
    KvCache c1 = KvCache::make(cfg), c2 = KvCache::make(cfg);
    Tensor a = gqa_prefill(cfg, p, residual, c1);
    Tensor b = gqa_decode_step(cfg, p, residual, c2);
    EXPECT_LE(max_abs_diff(a, b), 1e-6);
}

TEST(GqaDecode, PrefillThenDecodeEqualsFullPrefill) {
    AttnConfig cfg = tiny_attn();
    const int64_t dm = 64, seq = 9;
    AttnLayerParams p = random_attn_params(cfg, dm, 60);
    Tensor full = random_residual(seq, dm, 61);
    Tensor head({seq - 1, dm});
    std::copy(full.data.begin(), full.data.begin() + (seq - 1) * dm, head.data.begin());
    Tensor tail({1, dm});
    std::copy(full.data.begin() + (seq - 1) * dm, full.data.end(), tail.data.begin());

    KvCache c1 = KvCache::make(cfg), c2 = KvCache::make(cfg);
    Tensor out_full = gqa_prefill(cfg, p, full, c1);
    gqa_prefill(cfg, p, head, c2);
    EXPECT_EQ(c2.len, seq - 1);
    Tensor out_tail = gqa_decode_step(cfg, p, tail, c2);
    EXPECT_EQ(c2.len, seq);
    for (int64_t j = 0; j < dm; ++j)
        EXPECT_NEAR(out_tail.at(0, j), out_full.at(seq - 1, j), 1e-5);
}

TEST(GqaDecode, CacheGrowsByOnePerCall) {
    AttnConfig cfg = tiny_attn();
    const int64_t dm = 64;
    AttnLayerParams p = random_attn_params(cfg, dm, 70);
    KvCache cache = KvCache::make(cfg);
    for (int step = 0; step < 5; ++step) {
        Tensor tok = random_residual(1, dm, 71 + uint64_t(step));
        gqa_decode_step(cfg, p, tok, cache);
        EXPECT_EQ(cache.len, step + 1);
    }
}

TEST(KvCache, StoresExactlyTwoNkvDheadFloatsPerToken) {
    AttnConfig cfg = tiny_attn();
    const int64_t dm = 64;
    AttnLayerParams p = random_attn_params(cfg, dm, 80);
    KvCache cache = KvCache::make(cfg);
    Tensor residual = random_residual(7, dm, 81);
    gqa_prefill(cfg, p, residual, cache);
    EXPECT_EQ(cache.floats_per_token(), 2 * cfg.n_kv_heads * cfg.d_head);
    EXPECT_EQ(cache.total_floats(), cache.len * cache.floats_per_token());
    // Structural claim: stored floats scale with n_kv, not n_q.
    EXPECT_LT(cache.floats_per_token(), 2 * cfg.n_q_heads * cfg.d_head);
}
