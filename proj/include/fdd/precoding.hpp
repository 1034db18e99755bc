// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "fdd/numerics.hpp"

#include <vector>

namespace fdd {

/// Precoder V (M x K) under the total power constraint Tr(V V^H) <= P.
struct PrecodingMatrix {
    CMatrix v;
    double power = 1.0;

    double total_power() const { return v.frobenius_norm_sq(); }
};

struct SystemConfig {
    std::size_t m = 64;
    std::size_t k_users = 2;
    std::size_t l_pilots = 8;
    std::size_t b_bits = 30;
    double sigma2 = 1.0;
    double snr_db = 10.0;

    /// P = sigma2 * 10^(snr_db / 10).
    double power() const;
    void validate() const;
};

/// Rate of user k in bits/s/Hz; `h_all` is K x M with row k equal to h_k^H.
double user_rate(const CMatrix& h_all, const PrecodingMatrix& v, std::size_t k, double sigma2);
double sum_rate(const CMatrix& h_all, const PrecodingMatrix& v, double sigma2);
std::vector<double> user_rates(const CMatrix& h_all, const PrecodingMatrix& v, double sigma2);

PrecodingMatrix normalize_total_power(const CMatrix& v_raw, double power);
PrecodingMatrix mrt(const CMatrix& h_all, double power);
/// Throws SingularError when the smallest Gram eigenvalue is below 1e-12 times the largest.
PrecodingMatrix zf(const CMatrix& h_all, double power);

}  // namespace fdd
