// SPDX-License-Identifier: Apache-2.0
#include "fdd/sparse.hpp"

#include <cmath>
#include <numbers>

namespace fdd {

CMatrix AngularDictionary::project(const PilotMatrix& pilots) const {
    if (pilots.x.rows() != atoms.rows()) throw ShapeError("AngularDictionary::project: pilot/array size mismatch");
    return cgemm(pilots.x, atoms, true);
}

AngularDictionary build_dictionary(const ArrayConfig& cfg, std::size_t grid_size, double low, double high) {
    if (grid_size < 2) throw std::invalid_argument("build_dictionary: grid_size must be >= 2");
    if (!(low < high)) throw std::invalid_argument("build_dictionary: empty angle range");
    const double s_lo = std::sin(low);
    const double s_hi = std::sin(high);
    const bool full_range = s_lo <= -1.0 + 1e-15 && s_hi >= 1.0 - 1e-15;
    const double steps = full_range ? static_cast<double>(grid_size) : static_cast<double>(grid_size - 1);

    AngularDictionary d;
    d.grid.resize(grid_size);
    d.atoms = CMatrix(cfg.m, grid_size);
    for (std::size_t g = 0; g < grid_size; ++g) {
        const double s = s_lo + (s_hi - s_lo) * static_cast<double>(g) / steps;
        d.grid[g] = std::asin(std::clamp(s, -1.0, 1.0));
        const CMatrix a = array_response(d.grid[g], cfg);
        for (std::size_t i = 0; i < cfg.m; ++i) {
            d.atoms.re(i, g) = a.re(i, 0);
            d.atoms.im(i, g) = a.im(i, 0);
        }
    }
    return d;
}

namespace {

double norm2(const std::vector<cdouble>& v) {
    double s = 0.0;
    for (const auto& x : v) s += std::norm(x);
    return std::sqrt(s);
}

cdouble dot_h(const std::vector<cdouble>& a, const std::vector<cdouble>& b) {
    cdouble s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += std::conj(a[i]) * b[i];
    return s;
}

}  // namespace

OmpResult omp(const CMatrix& y, const CMatrix& sensing, std::size_t sparsity) {
    if (y.cols() != 1) throw ShapeError("omp: observation must be a column vector");
    if (y.rows() != sensing.rows()) throw ShapeError("omp: observation/sensing row mismatch");
    const std::size_t n = y.rows();
    const std::size_t g_count = sensing.cols();
    if (sparsity > g_count || sparsity > n) throw std::invalid_argument("omp: sparsity exceeds problem dimensions");

    OmpResult out;
    out.residual = y;
    const double y_norm = std::sqrt(y.frobenius_norm_sq());
    out.residual_norms.push_back(y_norm);
    if (y_norm == 0.0) return out;

    std::vector<double> col_norm(g_count, 0.0);
    for (std::size_t g = 0; g < g_count; ++g) {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += sensing.re(i, g) * sensing.re(i, g) + sensing.im(i, g) * sensing.im(i, g);
        col_norm[g] = std::sqrt(s);
    }

    std::vector<cdouble> r(n);
    for (std::size_t i = 0; i < n; ++i) r[i] = y(i, 0);
    std::vector<cdouble> yv = r;

    // Incremental QR of the selected columns: S_sel = Q R.
    std::vector<std::vector<cdouble>> q;
    std::vector<std::vector<cdouble>> rmat;  // rmat[j] = column j of R (length j+1)
    std::vector<bool> selected(g_count, false);

    for (std::size_t it = 0; it < sparsity; ++it) {
        std::size_t best = g_count;
        double best_score = -1.0;
        std::vector<cdouble> best_orth;
        std::vector<cdouble> best_rcol;
        for (std::size_t g = 0; g < g_count; ++g) {
            if (selected[g] || col_norm[g] == 0.0) continue;
            cdouble c = 0.0;
            for (std::size_t i = 0; i < n; ++i) c += std::conj(cdouble(sensing.re(i, g), sensing.im(i, g))) * r[i];
            const double score = std::abs(c) / col_norm[g];
            if (score <= best_score) continue;
            // Reject columns numerically inside the span of the current selection.
            std::vector<cdouble> v(n);
            for (std::size_t i = 0; i < n; ++i) v[i] = {sensing.re(i, g), sensing.im(i, g)};
            std::vector<cdouble> rcol(q.size() + 1, 0.0);
            for (int pass = 0; pass < 2; ++pass)
                for (std::size_t j = 0; j < q.size(); ++j) {
                    const cdouble p = dot_h(q[j], v);
                    rcol[j] += p;
                    for (std::size_t i = 0; i < n; ++i) v[i] -= p * q[j][i];
                }
            const double vn = norm2(v);
            if (vn <= 1e-10 * col_norm[g]) continue;
            for (auto& x : v) x /= vn;
            rcol[q.size()] = vn;
            best = g;
            best_score = score;
            best_orth = std::move(v);
            best_rcol = std::move(rcol);
        }
        if (best == g_count) break;
        selected[best] = true;
        out.support.push_back(best);
        q.push_back(std::move(best_orth));
        rmat.push_back(std::move(best_rcol));

        // Residual = y - Q Q^H y.
        r = yv;
        for (const auto& qj : q) {
            const cdouble p = dot_h(qj, r);
            for (std::size_t i = 0; i < n; ++i) r[i] -= p * qj[i];
        }
        out.residual_norms.push_back(norm2(r));
    }

    // Coefficients: R c = Q^H y.
    const std::size_t s = q.size();
    std::vector<cdouble> rhs(s);
    for (std::size_t j = 0; j < s; ++j) rhs[j] = dot_h(q[j], yv);
    out.coefficients.assign(s, 0.0);
    for (std::size_t jj = s; jj-- > 0;) {
        cdouble acc = rhs[jj];
        for (std::size_t k = jj + 1; k < s; ++k) acc -= rmat[k][jj] * out.coefficients[k];
        out.coefficients[jj] = acc / rmat[jj][jj];
    }
    out.residual = CMatrix(n, 1);
    for (std::size_t i = 0; i < n; ++i) out.residual.set(i, 0, r[i]);
    return out;
}

OmpChannelEstimate estimate_channel_omp(const ReceivedPilots& rx, const PilotMatrix& pilots,
                                        const AngularDictionary& dict, std::size_t lp, const CMatrix* projected) {
    const std::size_t m = dict.atoms.rows();
    OmpChannelEstimate est;
    est.h = CMatrix(m, 1);
    if (rx.y_complex.cols() != pilots.x.cols()) throw ShapeError("estimate_channel_omp: pilot length mismatch");
    if (lp == 0) return est;

    CMatrix local;
    if (!projected) {
        local = dict.project(pilots);
        projected = &local;
    }
    const CMatrix obs = rx.y_complex.conj_transpose();  // y^H = X^H h + z^H
    const OmpResult res = omp(obs, *projected, std::min({lp, obs.rows(), dict.size()}));

    const double scale = std::sqrt(static_cast<double>(lp));
    for (std::size_t j = 0; j < res.support.size(); ++j) {
        const std::size_t g = res.support[j];
        const cdouble c = res.coefficients[j];
        for (std::size_t i = 0; i < m; ++i) {
            const cdouble a(dict.atoms.re(i, g), dict.atoms.im(i, g));
            est.h.set(i, 0, est.h(i, 0) + c * a);
        }
        est.gains.push_back(c * scale);
        est.aods.push_back(dict.grid[g]);
    }
    return est;
}

}  // namespace fdd
