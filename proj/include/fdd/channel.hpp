// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "fdd/numerics.hpp"

#include <filesystem>
#include <vector>

namespace fdd {

struct ArrayConfig {
    std::size_t m = 64;
    double spacing_over_lambda = 0.5;

    void validate() const;
};

double deg_to_rad(double deg);
double rad_to_deg(double rad);

/// Path gains are CN(0, gain_variance) and AoDs are uniform on [aod_low, aod_high] (radians).
/// When `lp_set` holds more than one value each user channel draws its path count uniformly from it.
struct ChannelDistribution {
    std::vector<std::size_t> lp_set{2};
    double gain_variance = 1.0;
    double aod_low = deg_to_rad(-30.0);
    double aod_high = deg_to_rad(30.0);

    static ChannelDistribution from_degrees(std::vector<std::size_t> lp_set, double low_deg, double high_deg);
    std::size_t max_lp() const;
    void validate() const;
};

struct ChannelRealization {
    std::vector<cdouble> gains;
    std::vector<double> aods;
    CMatrix h;  // M x 1

    std::size_t lp() const { return gains.size(); }
};

/// a_t(theta): entry m is exp(j 2 pi (d/lambda) m sin(theta)).
CMatrix array_response(double theta, const ArrayConfig& cfg);

/// (1/sqrt(lp)) sum_l gains[l] a_t(aods[l]).
CMatrix compose_channel(std::span<const cdouble> gains, std::span<const double> aods, const ArrayConfig& cfg);

ChannelRealization sample_channel(const ChannelDistribution& dist, const ArrayConfig& cfg, RandomStream& rng);

/// Pilot matrix X (M x L) whose columns each carry power P.
struct PilotMatrix {
    CMatrix x;
    double power = 1.0;

    /// Rescales every column to squared norm `power`.
    void project();
    static PilotMatrix random_gaussian(std::size_t m, std::size_t l, double power, RandomStream& rng);
    /// sqrt(P) times the unitary DFT matrix (L == M).
    static PilotMatrix orthogonal_dft(std::size_t m, double power);
};

struct ReceivedPilots {
    CMatrix y_complex;            // 1 x L
    std::vector<double> y_real;   // [Re y; Im y], length 2L

    static ReceivedPilots from_complex(CMatrix y);
    static CMatrix to_complex(std::span<const double> y_real);
};

/// y = h^H X + z with z ~ CN(0, sigma2 I).
ReceivedPilots receive_pilots(const ChannelRealization& h, const PilotMatrix& pilots, double sigma2,
                              RandomStream& rng);
ReceivedPilots receive_pilots(const CMatrix& h, const PilotMatrix& pilots, double sigma2, RandomStream& rng);

/// n independent K-user draws, stored sample-major: users[s * k + u].
struct ChannelBatch {
    std::size_t n = 0;
    std::size_t k = 0;
    std::size_t m = 0;
    std::vector<ChannelRealization> users;

    const ChannelRealization& user(std::size_t sample, std::size_t u) const { return users[sample * k + u]; }
    /// K x M matrix whose row u is h_u^H.
    CMatrix h_matrix(std::size_t sample) const;
};

ChannelBatch generate_batch(const ChannelDistribution& dist, const ArrayConfig& cfg, std::size_t k_users,
                            std::size_t n, RandomStream& rng);

struct DatasetInfo {
    std::size_t m = 0;
    std::size_t k = 0;
    std::vector<std::size_t> lp_set;
    std::uint64_t seed = 0;
    std::size_t count = 0;
};

/// Writes channel vectors as little-endian f64 (re, im interleaved per antenna, sample-major then user)
/// to `path`, and a JSON sidecar `path + ".json"` with (M, K, L_p, seed, count).
void dump_dataset(const ChannelBatch& batch, const std::vector<std::size_t>& lp_set, std::uint64_t seed,
                  const std::filesystem::path& path);
/// Reads back the channel vectors (gains/AoDs are not stored; they come back empty).
ChannelBatch load_dataset(const std::filesystem::path& path, DatasetInfo* info = nullptr);

}  // namespace fdd
