// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "fdd/channel.hpp"

#include <nlohmann/json_fwd.hpp>

#include <cstdint>
#include <map>
#include <span>
#include <vector>

namespace fdd {

/// Fixed-rate scalar quantizer. Cell i is (boundaries[i-1], boundaries[i]]; a value lying exactly
/// on a boundary maps to the lower index.
struct ScalarQuantizer {
    std::vector<double> levels;
    std::vector<double> boundaries;

    std::size_t size() const { return levels.size(); }
    std::size_t quantize(double x) const;
    double dequantize(std::size_t index) const;
    double apply(double x) const { return levels[quantize(x)]; }
    /// Mean squared error on the given samples.
    double distortion(std::span<const double> samples) const;

    nlohmann::json to_json() const;
    static ScalarQuantizer from_json(const nlohmann::json& j);
};

struct LloydMaxOptions {
    double tolerance = 1e-6;
    std::size_t max_iterations = 500;
};

struct LloydMaxReport {
    std::size_t iterations = 0;
    /// Empirical distortion after each centroid update.
    std::vector<double> distortion;
};

/// Minimum-MSE quantizer with 2^q_bits levels fitted to the empirical distribution of `samples`.
ScalarQuantizer lloyd_max_fit(std::span<const double> samples, unsigned q_bits, const LloydMaxOptions& opts = {},
                              LloydMaxReport* report = nullptr);

/// Uniform quantizer with 2^q_bits cells spanning [lo, hi], levels at the cell centres.
ScalarQuantizer uniform_quantizer(double lo, double hi, unsigned q_bits);

enum class ParamClass { gain_re, gain_im, angle };

/// Bits per real channel parameter; slot 3l+0 / 3l+1 / 3l+2 hold Re(alpha_l) / Im(alpha_l) / theta_l
/// of the l-th path in ascending-AoD order.
struct ParamBitAllocation {
    std::vector<unsigned> bits_per_param;
    std::size_t total = 0;

    std::size_t lp() const { return bits_per_param.size() / 3; }
    static ParamClass slot_class(std::size_t slot) { return static_cast<ParamClass>(slot % 3); }

    /// floor(B / 3Lp) bits everywhere; the remainder goes to angles first, then Re gains, then Im gains.
    static ParamBitAllocation allocate(std::size_t b_bits, std::size_t lp);
};

class AllocationError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

/// Lloyd-Max quantizers for the sparse channel parameters plus the full-CSIR feedback codec.
/// Gains use one quantizer per bit count fitted on CN(0, gain_variance) real marginals; angles use one
/// quantizer per (order statistic, bit count) fitted on sorted uniform AoD draws.
class ChannelParamCodec {
  public:
    ChannelParamCodec(const ChannelDistribution& dist, const ArrayConfig& cfg, std::size_t b_bits, std::size_t lp,
                      std::uint64_t seed, std::size_t training_samples = 1'000'000);

    const ParamBitAllocation& allocation() const { return alloc_; }
    const ScalarQuantizer& quantizer(std::size_t slot) const;

    /// Canonical parameter vector (length 3 lp) of the `lp` strongest paths, sorted by ascending AoD.
    /// Missing paths (fewer than lp available) are filled with zero gain at angle 0.
    std::vector<double> canonical_params(std::span<const cdouble> gains, std::span<const double> aods) const;

    /// Bit string of length B (values 0/1, MSB first per parameter).
    std::vector<std::uint8_t> quantize_channel_params(std::span<const double> real_params) const;
    std::vector<double> dequantize_params(std::span<const std::uint8_t> bits) const;
    CMatrix reconstruct_channel(std::span<const std::uint8_t> bits) const;
    /// Convenience: canonicalize, quantize and reconstruct in one go.
    CMatrix feedback_roundtrip(std::span<const cdouble> gains, std::span<const double> aods) const;

    nlohmann::json to_json() const;

  private:
    ArrayConfig cfg_;
    std::size_t lp_;
    ParamBitAllocation alloc_;
    std::vector<ScalarQuantizer> slot_quantizers_;
};

}  // namespace fdd
