#include <gtest/gtest.h>

#include <cmath>

#include "hyts/ops.hpp"

using namespace hyts;

namespace {

// Independent slow oracle: plain i-j-k triple loop, double accumulation.
TensorD matmul_oracle(const TensorD& a, const TensorD& b) {
    TensorD c({a.dim(0), b.dim(1)}, 0.0);
    for (int64_t i = 0; i < a.dim(0); ++i)
        for (int64_t j = 0; j < b.dim(1); ++j) {
            double acc = 0.0;
            for (int64_t k = 0; k < a.dim(1); ++k) acc += a.at(i, k) * b.at(k, j);
            c.at(i, j) = acc;
        }
    return c;
}

Tensor random_tensor(std::vector<int64_t> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    fill_uniform(t, rng, lo, hi);
    return t;
}

Tensor identity(int64_t n) {
    Tensor t({n, n}, 0.0f);
    for (int64_t i = 0; i < n; ++i) t.at(i, i) = 1.0f;
    return t;
}

Tensor transpose2d(const Tensor& a) {
    Tensor t({a.dim(1), a.dim(0)});
    for (int64_t i = 0; i < a.dim(0); ++i)
        for (int64_t j = 0; j < a.dim(1); ++j) t.at(j, i) = a.at(i, j);
    return t;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    EXPECT_EQ(a.shape, b.shape);
    double m = 0.0;
    for (size_t i = 0; i < a.data.size(); ++i)
        m = std::max(m, std::abs(static_cast<double>(a.data[i]) - static_cast<double>(b.data[i])));
    return m;
}

}  // namespace

TEST(Matmul, IdentityIsNoop) {
    Rng rng(1);
    Tensor x = random_tensor({3, 5}, rng);
    Tensor y = matmul(identity(3), x);
    EXPECT_EQ(y.shape, x.shape);
    for (size_t i = 0; i < x.data.size(); ++i) EXPECT_FLOAT_EQ(y.data[i], x.data[i]);
}

TEST(Matmul, HandArithmetic) {
    Tensor a({2, 2});
    a.data = {1, 2, 3, 4};
    Tensor b({2, 1});
    b.data = {0, 1};
    Tensor c = matmul(a, b);
    EXPECT_FLOAT_EQ(c.at(0, 0), 2.0f);
    EXPECT_FLOAT_EQ(c.at(1, 0), 4.0f);
}

TEST(Matmul, MatchesTripleLoopF64Oracle) {
    Rng rng(7);
    for (int trial = 0; trial < 10; ++trial) {
        Tensor a = random_tensor({8, 8}, rng);
        Tensor b = random_tensor({8, 8}, rng);
        Tensor c = matmul(a, b);
        TensorD ref = matmul_oracle(a.cast<double>(), b.cast<double>());
        for (int64_t i = 0; i < 8; ++i)
            for (int64_t j = 0; j < 8; ++j)
                EXPECT_NEAR(c.at(i, j), ref.at(i, j), 1e-5);
    }
}

TEST(Matmul, ShapeMismatchThrows) {
    Tensor a({2, 3}), b({4, 2});
    EXPECT_THROW(matmul(a, b), ShapeError);
    Tensor v({3});
    EXPECT_THROW(matmul(a, v), ShapeError);
}

TEST(Matmul, TransposeProperty) {
    Rng rng(11);
    Tensor a = random_tensor({8, 8}, rng);
    Tensor b = random_tensor({8, 8}, rng);
    Tensor lhs = transpose2d(matmul(a, b));
    Tensor rhs = matmul(transpose2d(b), transpose2d(a));
    EXPECT_LE(max_abs_diff(lhs, rhs), 1e-5);
}

TEST(Matmul, AssociativityWithIdentity) {
    Rng rng(13);
    Tensor a = random_tensor({8, 8}, rng);
    Tensor b = random_tensor({8, 8}, rng);
    Tensor lhs = matmul(matmul(a, identity(8)), b);
    Tensor rhs = matmul(a, matmul(identity(8), b));
    EXPECT_LE(max_abs_diff(lhs, rhs), 1e-5);
}

TEST(Rmsnorm, UnitRms) {
    Tensor x = Tensor::ones({6});
    Tensor gain = Tensor::ones({6});
    Tensor y = rmsnorm(x, gain, 1e-12);
    for (float v : y.data) EXPECT_NEAR(v, 1.0f, 1e-6);
}

TEST(Rmsnorm, ZeroInputStaysZero) {
    Tensor x = Tensor::zeros({4});
    Tensor gain({4});
    gain.data = {0.5f, -2.0f, 3.0f, 7.0f};
    Tensor y = rmsnorm(x, gain, 1e-5);
    for (float v : y.data) EXPECT_FLOAT_EQ(v, 0.0f);
}

TEST(Rmsnorm, MatchesDirectFormulaF64) {
    Rng rng(3);
    const int64_t rows = 5, d = 32;
    Tensor x = random_tensor({rows, d}, rng);
    Tensor gain = random_tensor({d}, rng, 0.5, 1.5);
    const double eps = 1e-5;
    Tensor y = rmsnorm(x, gain, eps);
    for (int64_t r = 0; r < rows; ++r) {
        double ss = 0.0;
        for (int64_t j = 0; j < d; ++j) ss += double(x.at(r, j)) * double(x.at(r, j));
        const double inv = 1.0 / std::sqrt(ss / d + eps);
        for (int64_t j = 0; j < d; ++j)
            EXPECT_NEAR(y.at(r, j), double(x.at(r, j)) * inv * double(gain.at(j)), 1e-6);
    }
}

TEST(Rmsnorm, RejectsNonPositiveEps) {
    Tensor x = Tensor::ones({3}), gain = Tensor::ones({3});
    EXPECT_THROW(rmsnorm(x, gain, 0.0), DomainError);
    EXPECT_THROW(rmsnorm(x, gain, -1.0), DomainError);
}

TEST(Softmax, UniformOnEqualLogits) {
    Tensor x({3});
    x.data = {0, 0, 0};
    Tensor y = softmax_lastdim(x);
    for (float v : y.data) EXPECT_NEAR(v, 1.0f / 3.0f, 1e-7);
}

TEST(Softmax, MaskedElementIsZero) {
    Tensor x({2});
    x.data = {1.5f, -std::numeric_limits<float>::infinity()};
    Tensor y = softmax_lastdim(x);
    EXPECT_FLOAT_EQ(y.at(0), 1.0f);
    EXPECT_FLOAT_EQ(y.at(1), 0.0f);
}

TEST(Softmax, MatchesDirectFormula) {
    Tensor x({2});
    x.data = {2.0f, 1.0f};
    Tensor y = softmax_lastdim(x);
    const double z0 = std::exp(2.0), z1 = std::exp(1.0);
    EXPECT_NEAR(y.at(0), z0 / (z0 + z1), 1e-7);
    EXPECT_NEAR(y.at(1), z1 / (z0 + z1), 1e-7);
}

TEST(Softmax, RowsSumToOneAndShiftInvariant) {
    Rng rng(5);
    Tensor x = random_tensor({8, 16}, rng, -4.0, 4.0);
    Tensor y = softmax_lastdim(x);
    Tensor shifted = x;
    for (int64_t r = 0; r < 8; ++r)
        for (int64_t j = 0; j < 16; ++j) shifted.at(r, j) += 3.25f;
    Tensor y2 = softmax_lastdim(shifted);
    for (int64_t r = 0; r < 8; ++r) {
        double sum = 0.0;
        for (int64_t j = 0; j < 16; ++j) {
            sum += y.at(r, j);
            EXPECT_NEAR(y.at(r, j), y2.at(r, j), 1e-6);
        }
        EXPECT_NEAR(sum, 1.0, 1e-6);
    }
}

TEST(Softmax, MonotoneInInputs) {
    Tensor x({3});
    x.data = {0.1f, 0.9f, 0.5f};
    Tensor y = softmax_lastdim(x);
    EXPECT_LT(y.at(0), y.at(2));
    EXPECT_LT(y.at(2), y.at(1));
}

TEST(Silu, PointValues) {
    Tensor x({4});
    x.data = {0.0f, 1.0f, 40.0f, -40.0f};
    Tensor y = silu(x);
    EXPECT_FLOAT_EQ(y.at(0), 0.0f);
    EXPECT_NEAR(y.at(1), 1.0 / (1.0 + std::exp(-1.0)), 1e-7);
    EXPECT_NEAR(y.at(2), 40.0f, 1e-5);
    EXPECT_NEAR(y.at(3), 0.0f, 1e-7);
}

TEST(DecayMatrix, ZeroLogDecayGivesOnesTriangle) {
    Tensor la({3});
    la.data = {0, 0, 0};
    Tensor l = decay_matrix(la);
    for (int64_t i = 0; i < 3; ++i)
        for (int64_t j = 0; j < 3; ++j)
            EXPECT_FLOAT_EQ(l.at(i, j), i >= j ? 1.0f : 0.0f);
}

TEST(DecayMatrix, SingleProduct) {
    Tensor la({2});
    la.data = {std::log(0.5f), std::log(0.5f)};
    Tensor l = decay_matrix(la);
    EXPECT_FLOAT_EQ(l.at(0, 0), 1.0f);
    EXPECT_FLOAT_EQ(l.at(0, 1), 0.0f);
    EXPECT_NEAR(l.at(1, 0), 0.5f, 1e-7);
    EXPECT_FLOAT_EQ(l.at(1, 1), 1.0f);
}

TEST(DecayMatrix, MatchesDirectProductOracle) {
    Rng rng(17);
    const int64_t n = 16;
    Tensor la({n});
    for (int64_t i = 0; i < n; ++i) la.at(i) = static_cast<float>(rng.uniform(-2.0, 0.0));
    Tensor l = decay_matrix(la);
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j <= i; ++j) {
            double prod = 1.0;
            for (int64_t k = j + 1; k <= i; ++k) prod *= std::exp(double(la.at(k)));
            EXPECT_NEAR(l.at(i, j), prod, 1e-6);
        }
}

TEST(DecayMatrix, ChainProperty) {
    Rng rng(19);
    const int64_t n = 12;
    Tensor la({n});
    for (int64_t i = 0; i < n; ++i) la.at(i) = static_cast<float>(rng.uniform(-1.0, 0.0));
    Tensor l = decay_matrix(la);
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j <= i; ++j)
            for (int64_t m = 0; m <= j; ++m)
                EXPECT_NEAR(l.at(i, m), double(l.at(i, j)) * double(l.at(j, m)), 1e-6);
}

TEST(DecayMatrix, PositiveLogDecayThrows) {
    Tensor la({2});
    la.data = {0.0f, 0.1f};
    EXPECT_THROW(decay_matrix(la), DomainError);
    la.data = {0.0f, std::numeric_limits<float>::quiet_NaN()};
    EXPECT_THROW(decay_matrix(la), DomainError);
}

TEST(Bf16Round, IdempotentOnRandomFloats) {
    Rng rng(23);
    for (int i = 0; i < 100000; ++i) {
        const float x = static_cast<float>(rng.uniform(-1e6, 1e6));
        const float once = bf16_round(x);
        EXPECT_EQ(std::bit_cast<uint32_t>(once), std::bit_cast<uint32_t>(bf16_round(once)));
        // Low mantissa bits must be cleared.
        EXPECT_EQ(std::bit_cast<uint32_t>(once) & 0xFFFFu, 0u);
    }
}

TEST(Bf16Round, RoundsToNearestEven) {
    // 1.0 + 2^-8 sits exactly halfway between bf16 neighbours 1.0 and 1.0078125;
    // nearest-even picks 1.0 (mantissa lsb 0).
    const float halfway = std::bit_cast<float>(0x3F808000u);
    EXPECT_FLOAT_EQ(bf16_round(halfway), 1.0f);
    // Just above halfway rounds up.
    const float above = std::bit_cast<float>(0x3F808001u);
    EXPECT_FLOAT_EQ(bf16_round(above), std::bit_cast<float>(0x3F810000u));
}

TEST(Tensor, ShapeInvariants) {
    EXPECT_THROW(Tensor({0, 3}), ShapeError);
    EXPECT_THROW(Tensor(std::vector<int64_t>{}), ShapeError);
    Tensor t({2, 3});
    EXPECT_EQ(t.numel(), 6);
    EXPECT_EQ(t.shape_str(), "2x3");
}

TEST(Rng, NamedStreamsAreStableAndDistinct) {
    Rng a = Rng::named(42, "w_q");
    Rng b = Rng::named(42, "w_q");
    Rng c = Rng::named(42, "w_k");
    const uint64_t a0 = a.next();
    EXPECT_EQ(a0, b.next());
    EXPECT_NE(a0, c.next());
}
