// SPDX-License-Identifier: Apache-2.0
#include "fdd/precoding.hpp"

#include <cmath>

namespace fdd {

double SystemConfig::power() const { return sigma2 * std::pow(10.0, snr_db / 10.0); }

void SystemConfig::validate() const {
    if (m < 1) throw std::invalid_argument("SystemConfig: M must be >= 1");
    if (k_users < 1) throw std::invalid_argument("SystemConfig: K must be >= 1");
    if (k_users >= m) throw std::invalid_argument("SystemConfig: K must be smaller than M");
    if (l_pilots < 1) throw std::invalid_argument("SystemConfig: L must be >= 1");
    if (b_bits < 1) throw std::invalid_argument("SystemConfig: B must be >= 1");
    if (!(sigma2 > 0.0)) throw std::invalid_argument("SystemConfig: sigma2 must be positive");
}

namespace {

void check_shapes(const CMatrix& h_all, const PrecodingMatrix& v) {
    if (h_all.cols() != v.v.rows()) throw ShapeError("rate: channel columns must equal precoder rows (M)");
    if (h_all.rows() != v.v.cols()) throw ShapeError("rate: one precoding column per user is required");
}

}  // namespace

double user_rate(const CMatrix& h_all, const PrecodingMatrix& v, std::size_t k, double sigma2) {
    check_shapes(h_all, v);
    if (k >= h_all.rows()) throw std::out_of_range("user_rate: user index out of range");
    const CMatrix hk = h_all.row(k);
    const CMatrix gains = cgemm(hk, v.v);  // 1 x K, entry j = h_k^H v_j
    double signal = 0.0;
    double interference = 0.0;
    for (std::size_t j = 0; j < gains.cols(); ++j) {
        const double p = gains.re(0, j) * gains.re(0, j) + gains.im(0, j) * gains.im(0, j);
        (j == k ? signal : interference) += p;
    }
    return std::log2(1.0 + signal / (interference + sigma2));
}

std::vector<double> user_rates(const CMatrix& h_all, const PrecodingMatrix& v, double sigma2) {
    check_shapes(h_all, v);
    std::vector<double> out(h_all.rows());
    for (std::size_t k = 0; k < out.size(); ++k) out[k] = user_rate(h_all, v, k, sigma2);
    return out;
}

double sum_rate(const CMatrix& h_all, const PrecodingMatrix& v, double sigma2) {
    double total = 0.0;
    for (double r : user_rates(h_all, v, sigma2)) total += r;
    return total;
}

PrecodingMatrix normalize_total_power(const CMatrix& v_raw, double power) {
    const double n2 = v_raw.frobenius_norm_sq();
    if (!(n2 > 0.0)) throw DegenerateInputError("normalize_total_power: zero precoder");
    CMatrix v = v_raw;
    v *= std::sqrt(power / n2);
    return {std::move(v), power};
}

PrecodingMatrix mrt(const CMatrix& h_all, double power) {
    if (!(h_all.frobenius_norm_sq() > 0.0)) throw DegenerateInputError("mrt: zero channel matrix");
    return normalize_total_power(h_all.conj_transpose(), power);
}

PrecodingMatrix zf(const CMatrix& h_all, double power) {
    if (!(h_all.frobenius_norm_sq() > 0.0)) throw DegenerateInputError("zf: zero channel matrix");
    const CMatrix hh = h_all.conj_transpose();           // M x K
    const CMatrix gram = cgemm(h_all, hh);                // K x K
    const CMatrix coeff = solve_hermitian(gram, CMatrix::identity(gram.rows()), 1e12);
    return normalize_total_power(cgemm(hh, coeff), power);
}

}  // namespace fdd
