// Core dense ops: matmul, rmsnorm, softmax, silu, and the log-space decay
// table used by the chunked scan. All ops are pure functions over immutable
// inputs with explicit shape checks at the boundary.
#pragma once

#include <algorithm>
#include <cmath>

#include "hyts/tensor.hpp"

namespace hyts {

// c[i][j] = sum_k a[i][k] * b[k][j]. Rank-2 only; inner dims must agree.
template <typename T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
    require_rank(a, 2, "matmul lhs");
    require_rank(b, 2, "matmul rhs");
    if (a.dim(1) != b.dim(0))
        throw ShapeError("matmul: inner dimensions differ, " + a.shape_str() + " x " + b.shape_str());
    const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    TensorT<T> c({m, n}, T(0));
    // i-k-j order keeps the rhs row hot.
    for (int64_t i = 0; i < m; ++i) {
        const T* arow = a.row_ptr(i);
        T* crow = c.row_ptr(i);
        for (int64_t kk = 0; kk < k; ++kk) {
            const T av = arow[kk];
            if (av == T(0)) continue;
            const T* brow = b.row_ptr(kk);
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
    return c;
}

// y = x / sqrt(mean(x^2) + eps) * gain over the last dimension.
// The mean-square reduction runs in double regardless of T.
template <typename T>
TensorT<T> rmsnorm(const TensorT<T>& x, const TensorT<T>& gain, double eps) {
    if (eps <= 0.0) throw DomainError("rmsnorm: eps must be > 0");
    require_rank(gain, 1, "rmsnorm gain");
    const int64_t d = x.shape.back();
    if (gain.dim(0) != d)
        throw ShapeError("rmsnorm: gain length " + gain.shape_str() + " != last dim " +
                         std::to_string(d));
    TensorT<T> y;
    y.shape = x.shape;
    y.data.resize(x.data.size());
    const int64_t rows = x.numel() / d;
    for (int64_t r = 0; r < rows; ++r) {
        const T* xr = x.data.data() + r * d;
        T* yr = y.data.data() + r * d;
        double ss = 0.0;
        for (int64_t j = 0; j < d; ++j) ss += static_cast<double>(xr[j]) * static_cast<double>(xr[j]);
        const double inv = 1.0 / std::sqrt(ss / static_cast<double>(d) + eps);
        for (int64_t j = 0; j < d; ++j)
            yr[j] = static_cast<T>(static_cast<double>(xr[j]) * inv) * gain.at(j);
    }
    return y;
}

// Max-subtracted softmax over the last dimension; rows sum to 1.
// -inf entries come out as exact zeros (masked positions).
template <typename T>
TensorT<T> softmax_lastdim(const TensorT<T>& x) {
    const int64_t n = x.shape.back();
    TensorT<T> y;
    y.shape = x.shape;
    y.data.resize(x.data.size());
    const int64_t rows = x.numel() / n;
    for (int64_t r = 0; r < rows; ++r) {
        const T* xr = x.data.data() + r * n;
        T* yr = y.data.data() + r * n;
        T mx = xr[0];
        for (int64_t j = 1; j < n; ++j) mx = std::max(mx, xr[j]);
        if (!(mx > -std::numeric_limits<T>::infinity()))
            throw DomainError("softmax_lastdim: all entries of a row are -inf");
        T sum = T(0);
        for (int64_t j = 0; j < n; ++j) {
            yr[j] = std::exp(xr[j] - mx);
            sum += yr[j];
        }
        const T inv = T(1) / sum;
        for (int64_t j = 0; j < n; ++j) yr[j] *= inv;
    }
    return y;
}

template <typename T>
inline T sigmoid(T x) {
    // Split on sign to avoid exp overflow.
    return x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
}

template <typename T>
inline T silu_scalar(T x) {
    return x * sigmoid(x);
}

// y = x * sigmoid(x) elementwise.
template <typename T>
TensorT<T> silu(const TensorT<T>& x) {
    TensorT<T> y;
    y.shape = x.shape;
    y.data.resize(x.data.size());
    for (size_t i = 0; i < x.data.size(); ++i) y.data[i] = silu_scalar(x.data[i]);
    return y;
}

template <typename T>
inline T softplus(T x) {
    // log(1 + e^x), overflow-safe: for large x this is x itself.
    if (x > T(30)) return x;
    return std::log1p(std::exp(x));
}

// Lower-triangular decay table: L[i][j] = exp(sum_{k=j+1..i} log_alpha[k])
// for i >= j, L[i][i] = 1, zero above the diagonal. Built from cumulative
// sums in log space so long products stay stable.
template <typename T>
TensorT<T> decay_matrix(const TensorT<T>& log_alpha) {
    require_rank(log_alpha, 1, "decay_matrix log_alpha");
    const int64_t n = log_alpha.dim(0);
    for (int64_t t = 0; t < n; ++t) {
        const T v = log_alpha.at(t);
        if (!std::isfinite(v)) throw DomainError("decay_matrix: log_alpha[" + std::to_string(t) + "] is not finite");
        if (v > T(0))
            throw DomainError("decay_matrix: log_alpha[" + std::to_string(t) +
                              "] > 0 (state would grow)");
    }
    std::vector<double> cum(static_cast<size_t>(n));
    double acc = 0.0;
    for (int64_t t = 0; t < n; ++t) {
        acc += static_cast<double>(log_alpha.at(t));
        cum[static_cast<size_t>(t)] = acc;
    }
    TensorT<T> out({n, n}, T(0));
    for (int64_t i = 0; i < n; ++i) {
        out.at(i, i) = T(1);
        for (int64_t j = 0; j < i; ++j)
            out.at(i, j) = static_cast<T>(std::exp(cum[static_cast<size_t>(i)] - cum[static_cast<size_t>(j)]));
    }
    return out;
}

}  // namespace hyts
