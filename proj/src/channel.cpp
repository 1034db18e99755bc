// SPDX-License-Identifier: Apache-2.0
#include "fdd/channel.hpp"

#include <nlohmann/json.hpp>

#include <bit>
#include <cmath>
#include <fstream>
#include <numbers>

namespace fdd {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

void ArrayConfig::validate() const {
    if (m < 1) throw std::invalid_argument("ArrayConfig: antenna count must be >= 1");
    if (!(spacing_over_lambda > 0.0)) throw std::invalid_argument("ArrayConfig: spacing must be positive");
}

double deg_to_rad(double deg) { return deg * std::numbers::pi / 180.0; }
double rad_to_deg(double rad) { return rad * 180.0 / std::numbers::pi; }

ChannelDistribution ChannelDistribution::from_degrees(std::vector<std::size_t> lp_set, double low_deg,
                                                      double high_deg) {
    ChannelDistribution d;
    d.lp_set = std::move(lp_set);
    d.aod_low = deg_to_rad(low_deg);
    d.aod_high = deg_to_rad(high_deg);
    d.validate();
    return d;
}

std::size_t ChannelDistribution::max_lp() const {
    std::size_t best = 0;
    for (auto v : lp_set) best = std::max(best, v);
    return best;
}

void ChannelDistribution::validate() const {
    if (lp_set.empty()) throw std::invalid_argument("ChannelDistribution: empty path-count set");
    for (auto v : lp_set)
        if (v < 1) throw std::invalid_argument("ChannelDistribution: path count must be >= 1");
    if (!(aod_low < aod_high)) throw std::invalid_argument("ChannelDistribution: aod_low must be < aod_high");
    if (!(gain_variance > 0.0)) throw std::invalid_argument("ChannelDistribution: gain variance must be positive");
}

CMatrix array_response(double theta, const ArrayConfig& cfg) {
    CMatrix a(cfg.m, 1);
    const double phase = 2.0 * std::numbers::pi * cfg.spacing_over_lambda * std::sin(theta);
    for (std::size_t i = 0; i < cfg.m; ++i) {
        const double p = phase * static_cast<double>(i);
        a.re(i, 0) = std::cos(p);
        a.im(i, 0) = std::sin(p);
    }
    return a;
}

CMatrix compose_channel(std::span<const cdouble> gains, std::span<const double> aods, const ArrayConfig& cfg) {
    if (gains.size() != aods.size()) throw ShapeError("compose_channel: gains/aods length mismatch");
    CMatrix h(cfg.m, 1);
    if (gains.empty()) return h;
    const double scale = 1.0 / std::sqrt(static_cast<double>(gains.size()));
    for (std::size_t l = 0; l < gains.size(); ++l) {
        const CMatrix a = array_response(aods[l], cfg);
        const cdouble g = gains[l] * scale;
        for (std::size_t i = 0; i < cfg.m; ++i) {
            h.re(i, 0) += g.real() * a.re(i, 0) - g.imag() * a.im(i, 0);
            h.im(i, 0) += g.real() * a.im(i, 0) + g.imag() * a.re(i, 0);
        }
    }
    return h;
}

ChannelRealization sample_channel(const ChannelDistribution& dist, const ArrayConfig& cfg, RandomStream& rng) {
    const std::size_t lp = dist.lp_set.size() == 1 ? dist.lp_set.front() : dist.lp_set[rng.uniform_index(dist.lp_set.size())];
    ChannelRealization out;
    out.gains.resize(lp);
    out.aods.resize(lp);
    for (std::size_t l = 0; l < lp; ++l) {
        out.gains[l] = rng.complex_normal(dist.gain_variance);
        out.aods[l] = rng.uniform(dist.aod_low, dist.aod_high);
    }
    out.h = compose_channel(out.gains, out.aods, cfg);
    return out;
}

void PilotMatrix::project() {
    for (std::size_t c = 0; c < x.cols(); ++c) {
        double n2 = 0.0;
        for (std::size_t r = 0; r < x.rows(); ++r) n2 += x.re(r, c) * x.re(r, c) + x.im(r, c) * x.im(r, c);
        if (!(n2 > 0.0)) throw DegenerateInputError("PilotMatrix::project: zero pilot column");
        const double s = std::sqrt(power / n2);
        for (std::size_t r = 0; r < x.rows(); ++r) {
            x.re(r, c) *= s;
            x.im(r, c) *= s;
        }
    }
}

PilotMatrix PilotMatrix::random_gaussian(std::size_t m, std::size_t l, double power, RandomStream& rng) {
    PilotMatrix p{CMatrix(m, l), power};
    // Entry std sqrt(P/M) so that E||x_l||^2 = P before the projection.
    const double var = power / static_cast<double>(m);
    for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < l; ++c) p.x.set(r, c, rng.complex_normal(var));
    p.project();
    return p;
}

PilotMatrix PilotMatrix::orthogonal_dft(std::size_t m, double power) {
    PilotMatrix p{CMatrix(m, m), power};
    const double s = std::sqrt(power / static_cast<double>(m));
    for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < m; ++c) {
            const double ph = -2.0 * std::numbers::pi * static_cast<double>(r * c) / static_cast<double>(m);
            p.x.set(r, c, {s * std::cos(ph), s * std::sin(ph)});
        }
    return p;
}

ReceivedPilots ReceivedPilots::from_complex(CMatrix y) {
    ReceivedPilots out;
    const std::size_t l = y.cols();
    out.y_real.resize(2 * l);
    for (std::size_t i = 0; i < l; ++i) {
        out.y_real[i] = y.re(0, i);
        out.y_real[l + i] = y.im(0, i);
    }
    out.y_complex = std::move(y);
    return out;
}

CMatrix ReceivedPilots::to_complex(std::span<const double> y_real) {
    if (y_real.size() % 2 != 0) throw ShapeError("ReceivedPilots::to_complex: odd length");
    const std::size_t l = y_real.size() / 2;
    CMatrix y(1, l);
    for (std::size_t i = 0; i < l; ++i) {
        y.re(0, i) = y_real[i];
        y.im(0, i) = y_real[l + i];
    }
    return y;
}

ReceivedPilots receive_pilots(const CMatrix& h, const PilotMatrix& pilots, double sigma2, RandomStream& rng) {
    if (sigma2 < 0.0) throw std::invalid_argument("receive_pilots: negative noise variance");
    if (h.cols() != 1 || h.rows() != pilots.x.rows()) throw ShapeError("receive_pilots: channel/pilot mismatch");
    CMatrix y = cgemm(h, pilots.x, true);
    if (sigma2 > 0.0) {
        for (std::size_t i = 0; i < y.cols(); ++i) {
            const cdouble z = rng.complex_normal(sigma2);
            y.re(0, i) += z.real();
            y.im(0, i) += z.imag();
        }
    }
    return ReceivedPilots::from_complex(std::move(y));
}

ReceivedPilots receive_pilots(const ChannelRealization& h, const PilotMatrix& pilots, double sigma2,
                              RandomStream& rng) {
    return receive_pilots(h.h, pilots, sigma2, rng);
}

CMatrix ChannelBatch::h_matrix(std::size_t sample) const {
    CMatrix out(k, m);
    for (std::size_t u = 0; u < k; ++u) {
        const CMatrix& h = user(sample, u).h;
        for (std::size_t i = 0; i < m; ++i) {
            out.re(u, i) = h.re(i, 0);
            out.im(u, i) = -h.im(i, 0);
        }
    }
    return out;
}

ChannelBatch generate_batch(const ChannelDistribution& dist, const ArrayConfig& cfg, std::size_t k_users,
                            std::size_t n, RandomStream& rng) {
    if (n < 1) throw std::invalid_argument("generate_batch: n must be >= 1");
    ChannelBatch batch{n, k_users, cfg.m, {}};
    batch.users.reserve(n * k_users);
    for (std::size_t i = 0; i < n * k_users; ++i) batch.users.push_back(sample_channel(dist, cfg, rng));
    return batch;
}

void dump_dataset(const ChannelBatch& batch, const std::vector<std::size_t>& lp_set, std::uint64_t seed,
                  const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("dump_dataset: cannot open " + path.string());
    for (const auto& u : batch.users)
        for (std::size_t i = 0; i < batch.m; ++i) {
            const double v[2] = {u.h.re(i, 0), u.h.im(i, 0)};
            out.write(reinterpret_cast<const char*>(v), sizeof v);
        }
    nlohmann::json meta = {{"M", batch.m}, {"K", batch.k}, {"Lp", lp_set},
                           {"seed", seed}, {"count", batch.n}, {"dtype", "f64le"},
                           {"layout", "sample,user,antenna,(re,im)"}};
    std::ofstream side(path.string() + ".json");
    side << meta.dump(2) << '\n';
}

ChannelBatch load_dataset(const std::filesystem::path& path, DatasetInfo* info) {
    std::ifstream side(path.string() + ".json");
    if (!side) throw std::runtime_error("load_dataset: missing sidecar for " + path.string());
    const auto meta = nlohmann::json::parse(side);
    ChannelBatch batch;
    batch.m = meta.at("M").get<std::size_t>();
    batch.k = meta.at("K").get<std::size_t>();
    batch.n = meta.at("count").get<std::size_t>();
    if (info) {
        info->m = batch.m;
        info->k = batch.k;
        info->lp_set = meta.at("Lp").get<std::vector<std::size_t>>();
        info->seed = meta.at("seed").get<std::uint64_t>();
        info->count = batch.n;
    }
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_dataset: cannot open " + path.string());
    batch.users.resize(batch.n * batch.k);
    for (auto& u : batch.users) {
        u.h = CMatrix(batch.m, 1);
        for (std::size_t i = 0; i < batch.m; ++i) {
            double v[2];
            if (!in.read(reinterpret_cast<char*>(v), sizeof v))
                throw std::runtime_error("load_dataset: truncated file " + path.string());
            u.h.re(i, 0) = v[0];
            u.h.im(i, 0) = v[1];
        }
    }
    return batch;
}

}  // namespace fdd
