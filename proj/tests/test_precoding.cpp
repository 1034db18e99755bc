// SPDX-License-Identifier: Apache-2.0
#include "fdd/precoding.hpp"

#include <doctest.h>

#include <cmath>

using namespace fdd;

namespace {

CMatrix random_matrix(std::size_t r, std::size_t c, RandomStream& rng) {
    CMatrix m(r, c);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) m.set(i, j, rng.complex_normal(1.0));
    return m;
}

// h_k^H v_j with row k of h_all already holding h_k^H.
cdouble inner(const CMatrix& h_all, const CMatrix& v, std::size_t k, std::size_t j) {
    cdouble s = 0.0;
    for (std::size_t m = 0; m < h_all.cols(); ++m) s += h_all(k, m) * v(m, j);
    return s;
}

double oracle_rate(const CMatrix& h_all, const CMatrix& v, std::size_t k, double sigma2) {
    double interference = 0.0;
    for (std::size_t j = 0; j < v.cols(); ++j)
        if (j != k) interference += std::norm(inner(h_all, v, k, j));
    return std::log2(1.0 + std::norm(inner(h_all, v, k, k)) / (interference + sigma2));
}

}  // namespace

TEST_CASE("user_rate: zero precoder, matched single user, oracle") {
    RandomStream rng(1);
    const CMatrix h = random_matrix(2, 8, rng);
    CHECK(user_rate(h, {CMatrix(8, 2), 1.0}, 0, 1.0) == 0.0);

    const CMatrix h1 = random_matrix(1, 8, rng);
    const double p = 10.0;
    const CMatrix v = std::sqrt(p / h1.frobenius_norm_sq()) * h1.conj_transpose();
    CHECK(user_rate(h1, {v, p}, 0, 1.0) == doctest::Approx(std::log2(1.0 + p * h1.frobenius_norm_sq())).epsilon(1e-12));

    for (int t = 0; t < 100; ++t) {
        const CMatrix hh = random_matrix(3, 6, rng), vv = random_matrix(6, 3, rng);
        const double s2 = rng.uniform(0.1, 2.0);
        for (std::size_t k = 0; k < 3; ++k) {
            const double r = user_rate(hh, {vv, 1.0}, k, s2);
            REQUIRE(r >= 0.0);
            REQUIRE(std::abs(r - oracle_rate(hh, vv, k, s2)) < 1e-12);
        }
    }
    CHECK_THROWS(user_rate(h, {CMatrix(8, 2), 1.0}, 2, 1.0));
    CHECK_THROWS_AS(user_rate(h, {CMatrix(7, 2), 1.0}, 0, 1.0), ShapeError);
}

TEST_CASE("sum_rate: single user, permutation symmetry, hand-summed instance") {
    RandomStream rng(2);
    const CMatrix h1 = random_matrix(1, 4, rng), v1 = random_matrix(4, 1, rng);
    CHECK(sum_rate(h1, {v1, 1.0}, 1.0) == user_rate(h1, {v1, 1.0}, 0, 1.0));

    const CMatrix h = random_matrix(3, 5, rng), v = random_matrix(5, 3, rng);
    const std::size_t perm[3] = {2, 0, 1};
    CMatrix hp(3, 5), vp(5, 3);
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t m = 0; m < 5; ++m) {
            hp.set(i, m, h(perm[i], m));
            vp.set(m, i, v(m, perm[i]));
        }
    CHECK(sum_rate(hp, {vp, 1.0}, 0.7) == doctest::Approx(sum_rate(h, {v, 1.0}, 0.7)).epsilon(1e-13));

    // Hand-built 2-user instance: h1 = [1, 0], h2 = [0, 1]; v1 = [1, 1], v2 = [0, 2].
    CMatrix h2(2, 2), v2(2, 2);
    h2.set(0, 0, 1.0);
    h2.set(1, 1, 1.0);
    v2.set(0, 0, 1.0);
    v2.set(1, 0, 1.0);
    v2.set(1, 1, 2.0);
    // user 1: signal 1, interference 0. user 2: signal 4, interference 1.
    const double want = std::log2(1.0 + 1.0 / 1.0) + std::log2(1.0 + 4.0 / 2.0);
    CHECK(sum_rate(h2, {v2, 1.0}, 1.0) == doctest::Approx(want).epsilon(1e-14));
    const auto per = user_rates(h2, {v2, 1.0}, 1.0);
    CHECK(per[0] + per[1] == doctest::Approx(want).epsilon(1e-14));
}

TEST_CASE("mrt: power, direction, K = 1 and zero channel") {
    RandomStream rng(3);
    const double p = 10.0;
    const CMatrix h = random_matrix(3, 16, rng);
    const auto v = mrt(h, p);
    CHECK(std::abs(v.total_power() - p) < 1e-12);
    for (std::size_t k = 0; k < 3; ++k) {
        const CMatrix col = v.v.column(k), want = h.row(k).conj_transpose();
        const double cosine = std::abs(cgemm(col, want, true)(0, 0)) /
                              std::sqrt(col.frobenius_norm_sq() * want.frobenius_norm_sq());
        CHECK(cosine > 1.0 - 1e-12);
    }
    const CMatrix h1 = random_matrix(1, 8, rng);
    const CMatrix expect = std::sqrt(p / h1.frobenius_norm_sq()) * h1.conj_transpose();
    CHECK(std::sqrt((mrt(h1, p).v - expect).frobenius_norm_sq()) < 1e-12);
    CHECK_THROWS_AS(mrt(CMatrix(2, 4), p), DegenerateInputError);
}

TEST_CASE("zf: zero interference and interference-free rate on 1e3 instances") {
    RandomStream rng(4);
    const double p = 10.0, sigma2 = 1.0;
    for (int t = 0; t < 1000; ++t) {
        const CMatrix h = random_matrix(2, 16, rng);
        const auto v = zf(h, p);
        REQUIRE(std::abs(v.total_power() - p) < 1e-9);
        double closed = 0.0;
        for (std::size_t k = 0; k < 2; ++k) {
            for (std::size_t j = 0; j < 2; ++j)
                if (j != k) REQUIRE(std::abs(inner(h, v.v, k, j)) < 1e-9);
            closed += std::log2(1.0 + std::norm(inner(h, v.v, k, k)) / sigma2);
        }
        REQUIRE(std::abs(sum_rate(h, v, sigma2) - closed) < 1e-9);
    }
}

TEST_CASE("zf: orthogonal rows, K = 1 and rank deficiency") {
    const double p = 4.0;
    CMatrix h(2, 4);
    h.set(0, 0, 2.0);
    h.set(0, 1, {0.0, 1.0});
    h.set(1, 2, 1.0);
    h.set(1, 3, {1.0, -1.0});
    const auto z = zf(h, p), r = mrt(h, p);
    for (std::size_t k = 0; k < 2; ++k) {
        const CMatrix a = z.v.column(k), b = r.v.column(k);
        const double cosine = std::abs(cgemm(a, b, true)(0, 0)) / std::sqrt(a.frobenius_norm_sq() * b.frobenius_norm_sq());
        CHECK(cosine > 1.0 - 1e-12);
    }

    RandomStream rng(5);
    const CMatrix h1 = random_matrix(1, 8, rng);
    CHECK(std::sqrt((zf(h1, p).v - mrt(h1, p).v).frobenius_norm_sq()) < 1e-12);
    CHECK(sum_rate(h1, mrt(h1, p), 1.0) == doctest::Approx(sum_rate(h1, zf(h1, p), 1.0)).epsilon(1e-12));

    CMatrix dup(2, 4);
    for (std::size_t m = 0; m < 4; ++m) {
        dup.set(0, m, h1(0, m));
        dup.set(1, m, 2.0 * h1(0, m));
    }
    CHECK_THROWS_AS(zf(dup, p), SingularError);
}

TEST_CASE("normalize_total_power: unchanged, scale invariant, idempotent, zero") {
    RandomStream rng(6);
    const double p = 10.0;
    const CMatrix raw = random_matrix(8, 2, rng);
    const auto a = normalize_total_power(raw, p);
    CHECK(std::abs(std::sqrt(a.total_power()) - std::sqrt(p)) < 1e-12);
    CHECK(std::sqrt((normalize_total_power(7.0 * raw, p).v - a.v).frobenius_norm_sq()) < 1e-13);
    CHECK(std::sqrt((normalize_total_power(a.v, p).v - a.v).frobenius_norm_sq()) < 1e-13);
    CHECK_THROWS_AS(normalize_total_power(CMatrix(4, 2), p), DegenerateInputError);
}

TEST_CASE("SystemConfig validation and power") {
    SystemConfig s;
    s.snr_db = 10.0;
    s.sigma2 = 2.0;
    CHECK(s.power() == doctest::Approx(20.0).epsilon(1e-14));
    s.k_users = s.m;
    CHECK_THROWS(s.validate());
    s.k_users = 2;
    s.b_bits = 0;
    CHECK_THROWS(s.validate());
}
