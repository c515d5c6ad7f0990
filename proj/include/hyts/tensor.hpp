// Dense row-major tensors, element precisions, and the error taxonomy
// shared by every hyts module. No external math dependencies: all fast
// paths here are cross-checked against independent slow oracles in the
// test suite, so traversal order must stay deterministic.
#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace hyts {

// ---------------------------------------------------------------------------
// Errors

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape/dimension mismatch at an op boundary.
struct ShapeError : Error {
    using Error::Error;
};

// Math-domain violation (e.g. positive log-decay, non-positive eps).
struct DomainError : Error {
    using Error::Error;
};

// Non-finite value produced mid-computation; message carries the step index.
struct NumericError : Error {
    using Error::Error;
};

// Invalid configuration; message names the offending field.
struct ConfigError : Error {
    using Error::Error;
};

// Text parsing failure; message carries the offset.
struct ParseError : Error {
    using Error::Error;
};

// Bad model input (e.g. token id out of vocabulary).
struct InputError : Error {
    using Error::Error;
};

// KV/state cache position discontinuity.
struct CacheError : Error {
    using Error::Error;
};

// Context-length overflow.
struct CapacityError : Error {
    using Error::Error;
};

// Malformed communication trace (cycle in the dependency graph).
struct TraceError : Error {
    using Error::Error;
};

// File I/O failures keep a machine-checkable kind so callers can map them
// to distinct exit codes.
struct IoError : Error {
    enum class Kind {
        FileMissing,
        BadMagic,
        ManifestInvalid,
        Truncated,
        ShapeMismatch,
    };
    Kind kind;
    IoError(Kind k, const std::string& msg) : Error(msg), kind(k) {}
};

// ---------------------------------------------------------------------------
// Precision

// BF16EMU is 32-bit storage whose mantissa is rounded to 8 bits after every
// write; it exists so tests can demonstrate why recurrent state must be F32.
enum class Precision {
    F32,
    F64,
    Bf16Emu,
};

inline const char* precision_name(Precision p) {
    switch (p) {
        case Precision::F32: return "f32";
        case Precision::F64: return "f64";
        case Precision::Bf16Emu: return "bf16emu";
    }
    return "?";
}

// Round-to-nearest-even truncation of a float mantissa to 8 bits (the
// bfloat16 grid). Idempotent: the low 16 bits of a rounded value are zero,
// so a second round is the identity.
inline float bf16_round(float x) {
    if (std::isnan(x)) return x;
    uint32_t bits = std::bit_cast<uint32_t>(x);
    uint32_t lsb = (bits >> 16) & 1u;
    bits += 0x7FFFu + lsb;
    bits &= 0xFFFF0000u;
    return std::bit_cast<float>(bits);
}

// ---------------------------------------------------------------------------
// Tensor

// Dense row-major array. Shape entries are >= 1 and product(shape) always
// equals data.size(); precision is fixed by the element type.
template <typename T>
struct TensorT {
    static_assert(std::is_floating_point_v<T>);

    std::vector<int64_t> shape;
    std::vector<T> data;

    TensorT() = default;

    explicit TensorT(std::vector<int64_t> s, T fill = T(0)) : shape(std::move(s)) {
        data.assign(static_cast<size_t>(checked_numel(shape)), fill);
    }

    static TensorT zeros(std::vector<int64_t> s) { return TensorT(std::move(s), T(0)); }
    static TensorT ones(std::vector<int64_t> s) { return TensorT(std::move(s), T(1)); }

    static int64_t checked_numel(const std::vector<int64_t>& s) {
        if (s.empty()) throw ShapeError("tensor shape must have at least one dimension");
        int64_t n = 1;
        for (int64_t d : s) {
            if (d < 1) throw ShapeError("tensor dimensions must be >= 1, got " + std::to_string(d));
            n *= d;
        }
        return n;
    }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    int64_t dim(int i) const { return shape[static_cast<size_t>(i)]; }

    bool same_shape(const TensorT& other) const { return shape == other.shape; }

    static constexpr Precision precision() {
        return std::is_same_v<T, float> ? Precision::F32 : Precision::F64;
    }

    // Row-major element access. Rank is the caller's responsibility; these
    // are the hot paths and stay unchecked beyond the rank match.
    T& at(int64_t i) { return data[static_cast<size_t>(i)]; }
    const T& at(int64_t i) const { return data[static_cast<size_t>(i)]; }

    T& at(int64_t i, int64_t j) { return data[static_cast<size_t>(i * shape[1] + j)]; }
    const T& at(int64_t i, int64_t j) const { return data[static_cast<size_t>(i * shape[1] + j)]; }

    T& at(int64_t i, int64_t j, int64_t k) {
        return data[static_cast<size_t>((i * shape[1] + j) * shape[2] + k)];
    }
    const T& at(int64_t i, int64_t j, int64_t k) const {
        return data[static_cast<size_t>((i * shape[1] + j) * shape[2] + k)];
    }

    T* row_ptr(int64_t i) { return data.data() + i * row_stride(); }
    const T* row_ptr(int64_t i) const { return data.data() + i * row_stride(); }

    int64_t row_stride() const {
        int64_t s = 1;
        for (size_t d = 1; d < shape.size(); ++d) s *= shape[d];
        return s;
    }

    bool all_finite() const {
        for (T v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    std::string shape_str() const {
        std::string s;
        for (size_t i = 0; i < shape.size(); ++i) {
            if (i) s += 'x';
            s += std::to_string(shape[i]);
        }
        return s;
    }

    template <typename U>
    TensorT<U> cast() const {
        TensorT<U> out;
        out.shape = shape;
        out.data.resize(data.size());
        for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
        return out;
    }
};

using Tensor = TensorT<float>;
using TensorD = TensorT<double>;

template <typename T>
inline void require_rank(const TensorT<T>& t, int rank, const char* what) {
    if (t.rank() != rank)
        throw ShapeError(std::string(what) + ": expected rank " + std::to_string(rank) +
                         ", got shape " + t.shape_str());
}

// ---------------------------------------------------------------------------
// Deterministic RNG
//
// std::mt19937_64 with explicit scaling instead of std distributions, so a
// fixed seed yields the same stream on every platform and toolchain.

class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    // Per-tensor generator: mixing the name into the seed makes weight init
    // independent of construction order.
    static Rng named(uint64_t seed, std::string_view name) {
        uint64_t h = 1469598103934665603ull;  // FNV-1a
        for (char c : name) {
            h ^= static_cast<unsigned char>(c);
            h *= 1099511628211ull;
        }
        return Rng(seed ^ h);
    }

    uint64_t next() { return gen_(); }

    // Uniform in [0, 1) with 53 random bits.
    double unit() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * unit(); }

    // Uniform integer in [0, n).
    int64_t integer(int64_t n) { return static_cast<int64_t>(unit() * static_cast<double>(n)); }

private:
    std::mt19937_64 gen_;
};

template <typename T>
inline void fill_uniform(TensorT<T>& t, Rng& rng, double lo, double hi) {
    for (T& v : t.data) v = static_cast<T>(rng.uniform(lo, hi));
}

}  // namespace hyts
