// SPDX-License-Identifier: Apache-2.0
#include "fdd/numerics.hpp"

#include <Eigen/Dense>
#include <openssl/evp.h>

#include <algorithm>
#include <cmath>
#include <numbers>

namespace fdd {

CMatrix::CMatrix(std::size_t rows, std::size_t cols)
    : rows_(rows), cols_(cols), re_(rows * cols, 0.0), im_(rows * cols, 0.0) {}

CMatrix::CMatrix(std::size_t rows, std::size_t cols, std::vector<double> re, std::vector<double> im)
    : rows_(rows), cols_(cols), re_(std::move(re)), im_(std::move(im)) {
    if (re_.size() != rows * cols || im_.size() != rows * cols)
        throw ShapeError("CMatrix: plane length does not match rows*cols");
}

CMatrix CMatrix::identity(std::size_t n) {
    CMatrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m.re(i, i) = 1.0;
    return m;
}

CMatrix CMatrix::from_complex(std::size_t rows, std::size_t cols, std::span<const cdouble> values) {
    if (values.size() != rows * cols) throw ShapeError("CMatrix::from_complex: size mismatch");
    CMatrix m(rows, cols);
    for (std::size_t i = 0; i < values.size(); ++i) {
        m.re_[i] = values[i].real();
        m.im_[i] = values[i].imag();
    }
    return m;
}

CMatrix CMatrix::conj_transpose() const {
    CMatrix t(cols_, rows_);
    for (std::size_t r = 0; r < rows_; ++r)
        for (std::size_t c = 0; c < cols_; ++c) {
            t.re(c, r) = re(r, c);
            t.im(c, r) = -im(r, c);
        }
    return t;
}

CMatrix CMatrix::column(std::size_t c) const {
    if (c >= cols_) throw ShapeError("CMatrix::column: index out of range");
    CMatrix out(rows_, 1);
    for (std::size_t r = 0; r < rows_; ++r) {
        out.re(r, 0) = re(r, c);
        out.im(r, 0) = im(r, c);
    }
    return out;
}

CMatrix CMatrix::row(std::size_t r) const {
    if (r >= rows_) throw ShapeError("CMatrix::row: index out of range");
    CMatrix out(1, cols_);
    for (std::size_t c = 0; c < cols_; ++c) {
        out.re(0, c) = re(r, c);
        out.im(0, c) = im(r, c);
    }
    return out;
}

double CMatrix::frobenius_norm_sq() const {
    double s = 0.0;
    for (std::size_t i = 0; i < re_.size(); ++i) s += re_[i] * re_[i] + im_[i] * im_[i];
    return s;
}

bool CMatrix::all_finite() const {
    auto finite = [](double v) { return std::isfinite(v); };
    return std::all_of(re_.begin(), re_.end(), finite) && std::all_of(im_.begin(), im_.end(), finite);
}

CMatrix& CMatrix::operator*=(double s) {
    for (auto& v : re_) v *= s;
    for (auto& v : im_) v *= s;
    return *this;
}

CMatrix operator+(const CMatrix& a, const CMatrix& b) {
    if (a.rows_ != b.rows_ || a.cols_ != b.cols_) throw ShapeError("CMatrix +: shape mismatch");
    CMatrix out = a;
    for (std::size_t i = 0; i < out.re_.size(); ++i) {
        out.re_[i] += b.re_[i];
        out.im_[i] += b.im_[i];
    }
    return out;
}

CMatrix operator-(const CMatrix& a, const CMatrix& b) {
    if (a.rows_ != b.rows_ || a.cols_ != b.cols_) throw ShapeError("CMatrix -: shape mismatch");
    CMatrix out = a;
    for (std::size_t i = 0; i < out.re_.size(); ++i) {
        out.re_[i] -= b.re_[i];
        out.im_[i] -= b.im_[i];
    }
    return out;
}

CMatrix cgemm(const CMatrix& a, const CMatrix& b, bool conj_transpose_a) {
    const std::size_t n = conj_transpose_a ? a.cols() : a.rows();
    const std::size_t inner = conj_transpose_a ? a.rows() : a.cols();
    if (inner != b.rows())
        throw ShapeError("cgemm: inner dimensions disagree (" + std::to_string(inner) + " vs " +
                         std::to_string(b.rows()) + ")");
    CMatrix out(n, b.cols());
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t p = 0; p < inner; ++p) {
            const double ar = conj_transpose_a ? a.re(p, i) : a.re(i, p);
            const double ai = conj_transpose_a ? -a.im(p, i) : a.im(i, p);
            for (std::size_t j = 0; j < b.cols(); ++j) {
                const double br = b.re(p, j);
                const double bi = b.im(p, j);
                out.re(i, j) += ar * br - ai * bi;
                out.im(i, j) += ar * bi + ai * br;
            }
        }
    }
    return out;
}

namespace {

Eigen::MatrixXcd to_eigen(const CMatrix& a) {
    Eigen::MatrixXcd m(a.rows(), a.cols());
    for (std::size_t r = 0; r < a.rows(); ++r)
        for (std::size_t c = 0; c < a.cols(); ++c) m(r, c) = a(r, c);
    return m;
}

}  // namespace

std::vector<double> hermitian_eigenvalues(const CMatrix& a) {
    if (a.rows() != a.cols()) throw ShapeError("hermitian_eigenvalues: matrix is not square");
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXcd> solver(to_eigen(a), Eigen::EigenvaluesOnly);
    const auto& ev = solver.eigenvalues();
    return {ev.data(), ev.data() + ev.size()};
}

CMatrix solve_hermitian(const CMatrix& a, const CMatrix& b, double max_condition) {
    const std::size_t n = a.rows();
    if (a.cols() != n) throw ShapeError("solve_hermitian: matrix is not square");
    if (b.rows() != n) throw ShapeError("solve_hermitian: right-hand side has wrong row count");

    const auto ev = hermitian_eigenvalues(a);
    if (n > 0 && (ev.front() <= 0.0 || ev.back() > max_condition * ev.front()))
        throw SingularError("solve_hermitian: matrix is singular or ill-conditioned");

    // a = L L^H, L lower triangular with real positive diagonal.
    std::vector<cdouble> l(n * n, 0.0);
    for (std::size_t j = 0; j < n; ++j) {
        double d = a.re(j, j);
        for (std::size_t k = 0; k < j; ++k) d -= std::norm(l[j * n + k]);
        if (!(d > 0.0)) throw SingularError("solve_hermitian: matrix is not positive definite");
        const double ljj = std::sqrt(d);
        l[j * n + j] = ljj;
        for (std::size_t i = j + 1; i < n; ++i) {
            cdouble s = a(i, j);
            for (std::size_t k = 0; k < j; ++k) s -= l[i * n + k] * std::conj(l[j * n + k]);
            l[i * n + j] = s / ljj;
        }
    }

    CMatrix x(n, b.cols());
    std::vector<cdouble> w(n);
    for (std::size_t c = 0; c < b.cols(); ++c) {
        for (std::size_t i = 0; i < n; ++i) {
            cdouble s = b(i, c);
            for (std::size_t k = 0; k < i; ++k) s -= l[i * n + k] * w[k];
            w[i] = s / l[i * n + i];
        }
        for (std::size_t ii = n; ii-- > 0;) {
            cdouble s = w[ii];
            for (std::size_t k = ii + 1; k < n; ++k) s -= std::conj(l[k * n + ii]) * x(k, c);
            x.set(ii, c, s / l[ii * n + ii].real());
        }
    }
    return x;
}

std::string to_string(Purpose p) {
    switch (p) {
        case Purpose::channels: return "channels";
        case Purpose::noise: return "noise";
        case Purpose::init: return "init";
        case Purpose::validation: return "validation";
        case Purpose::test: return "test";
    }
    return "unknown";
}

double RandomStream::uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

double RandomStream::normal() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
}

cdouble RandomStream::complex_normal(double variance) {
    const double s = std::sqrt(variance / 2.0);
    const double r = normal();
    const double i = normal();
    return {s * r, s * i};
}

std::size_t RandomStream::uniform_index(std::size_t n) {
    if (n == 0) throw std::invalid_argument("uniform_index: empty range");
    return std::min(static_cast<std::size_t>(uniform() * static_cast<double>(n)), n - 1);
}

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

std::uint64_t SeedTree::leaf_seed(Purpose purpose, std::uint64_t index) const {
    std::uint64_t h = splitmix64(root_);
    h = splitmix64(h ^ static_cast<std::uint64_t>(purpose));
    return splitmix64(h ^ splitmix64(index));
}

SeedTree SeedTree::child(std::uint64_t tag) const {
    return SeedTree(splitmix64(splitmix64(root_) ^ splitmix64(~tag)));
}

std::vector<double> gaussian_stream(std::uint64_t seed, std::size_t n, double variance) {
    if (!(variance > 0.0)) throw std::invalid_argument("gaussian_stream: variance must be positive");
    RandomStream rng(seed);
    const double s = std::sqrt(variance);
    std::vector<double> out(n);
    for (auto& v : out) v = s * rng.normal();
    return out;
}

std::string sha256_hex(std::string_view data) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(data.data(), data.size(), digest, &len, EVP_sha256(), nullptr) != 1)
        throw std::runtime_error("sha256_hex: digest failed");
    static constexpr char hex[] = "0123456789abcdef";
    std::string out;
    out.reserve(2 * len);
    for (unsigned int i = 0; i < len; ++i) {
        out.push_back(hex[digest[i] >> 4]);
        out.push_back(hex[digest[i] & 0xf]);
    }
    return out;
}

}  // namespace fdd
