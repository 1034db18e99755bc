// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <complex>
#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace fdd {

using cdouble = std::complex<double>;

/// Raised when matrix shapes do not agree.
class ShapeError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

/// Raised when a linear system is numerically singular.
class SingularError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// Raised for zero or otherwise unusable inputs (zero channel, zero precoder, too few samples).
class DegenerateInputError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

// Complex matrix with separate real and imaginary planes, both row-major.
class CMatrix {
  public:
    CMatrix() = default;
    CMatrix(std::size_t rows, std::size_t cols);
    CMatrix(std::size_t rows, std::size_t cols, std::vector<double> re, std::vector<double> im);

    static CMatrix identity(std::size_t n);
    static CMatrix from_complex(std::size_t rows, std::size_t cols, std::span<const cdouble> values);

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return rows_ * cols_; }

    double& re(std::size_t r, std::size_t c) { return re_[r * cols_ + c]; }
    double& im(std::size_t r, std::size_t c) { return im_[r * cols_ + c]; }
    double re(std::size_t r, std::size_t c) const { return re_[r * cols_ + c]; }
    double im(std::size_t r, std::size_t c) const { return im_[r * cols_ + c]; }

    cdouble operator()(std::size_t r, std::size_t c) const { return {re(r, c), im(r, c)}; }
    void set(std::size_t r, std::size_t c, cdouble v) {
        re(r, c) = v.real();
        im(r, c) = v.imag();
    }

    std::span<double> re_plane() { return re_; }
    std::span<double> im_plane() { return im_; }
    std::span<const double> re_plane() const { return re_; }
    std::span<const double> im_plane() const { return im_; }

    CMatrix conj_transpose() const;
    CMatrix column(std::size_t c) const;
    CMatrix row(std::size_t r) const;

    double frobenius_norm_sq() const;
    bool all_finite() const;

    CMatrix& operator*=(double s);
    friend CMatrix operator*(double s, CMatrix m) { return m *= s; }
    friend CMatrix operator+(const CMatrix& a, const CMatrix& b);
    friend CMatrix operator-(const CMatrix& a, const CMatrix& b);
    friend bool operator==(const CMatrix& a, const CMatrix& b) = default;

  private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> re_;
    std::vector<double> im_;
};

/// Product op(a)·b where op is the Hermitian transpose when `conj_transpose_a` is set.
CMatrix cgemm(const CMatrix& a, const CMatrix& b, bool conj_transpose_a = false);

/// Solves a·x = b for Hermitian positive definite `a` by Cholesky factorization.
/// Throws SingularError when the spectral condition number of `a` exceeds `max_condition`.
CMatrix solve_hermitian(const CMatrix& a, const CMatrix& b, double max_condition = 1e12);

/// Eigenvalues of a Hermitian matrix in ascending order.
std::vector<double> hermitian_eigenvalues(const CMatrix& a);

// ---------------------------------------------------------------------------
// Random streams

enum class Purpose : std::uint64_t {
    channels = 1,
    noise = 2,
    init = 3,
    validation = 4,
    test = 5,
};

std::string to_string(Purpose p);

/// mt19937_64 engine with portable uniform and Gaussian draws (no reliance on
/// implementation-defined std distributions, so streams match across toolchains).
class RandomStream {
  public:
    explicit RandomStream(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }
    /// Uniform on [0, 1) with 53 random bits.
    double uniform();
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    /// Standard normal via Box-Muller; the second value of each pair is cached.
    double normal();
    /// Circularly symmetric complex Gaussian with E|z|^2 = variance.
    cdouble complex_normal(double variance);
    std::size_t uniform_index(std::size_t n);

  private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

/// Deterministic derivation of independent streams from one root seed.
class SeedTree {
  public:
    explicit SeedTree(std::uint64_t root_seed) : root_(root_seed) {}

    std::uint64_t root_seed() const { return root_; }
    std::uint64_t leaf_seed(Purpose purpose, std::uint64_t index = 0) const;
    RandomStream stream(Purpose purpose, std::uint64_t index = 0) const {
        return RandomStream(leaf_seed(purpose, index));
    }
    /// A child tree, used to hand a sub-experiment its own namespace of streams.
    SeedTree child(std::uint64_t tag) const;

  private:
    std::uint64_t root_;
};

std::uint64_t splitmix64(std::uint64_t x);

/// n i.i.d. N(0, variance) samples drawn from the stream seeded by `seed`.
std::vector<double> gaussian_stream(std::uint64_t seed, std::size_t n, double variance);

/// Lower-case hex SHA-256 digest.
std::string sha256_hex(std::string_view data);

}  // namespace fdd
