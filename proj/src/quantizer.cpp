// SPDX-License-Identifier: Apache-2.0
#include "fdd/quantizer.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>

namespace fdd {

std::size_t ScalarQuantizer::quantize(double x) const {
    return static_cast<std::size_t>(std::lower_bound(boundaries.begin(), boundaries.end(), x) - boundaries.begin());
}

double ScalarQuantizer::dequantize(std::size_t index) const {
    if (index >= levels.size()) throw std::out_of_range("ScalarQuantizer::dequantize: index out of range");
    return levels[index];
}

double ScalarQuantizer::distortion(std::span<const double> samples) const {
    if (samples.empty()) return 0.0;
    double s = 0.0;
    for (double x : samples) {
        const double e = x - apply(x);
        s += e * e;
    }
    return s / static_cast<double>(samples.size());
}

nlohmann::json ScalarQuantizer::to_json() const { return {{"levels", levels}, {"boundaries", boundaries}}; }

ScalarQuantizer ScalarQuantizer::from_json(const nlohmann::json& j) {
    ScalarQuantizer q;
    q.levels = j.at("levels").get<std::vector<double>>();
    q.boundaries = j.at("boundaries").get<std::vector<double>>();
    if (q.levels.empty() || q.boundaries.size() + 1 != q.levels.size())
        throw std::invalid_argument("ScalarQuantizer::from_json: inconsistent level/boundary counts");
    return q;
}

namespace {

// Weighted unique values with prefix sums, so any cell statistic is O(1) after a binary search.
struct EmpiricalDistribution {
    std::vector<double> values;
    std::vector<double> cum_w{0.0};
    std::vector<double> cum_wx{0.0};
    std::vector<double> cum_wxx{0.0};

    explicit EmpiricalDistribution(std::span<const double> samples) {
        std::vector<double> sorted(samples.begin(), samples.end());
        std::sort(sorted.begin(), sorted.end());
        for (std::size_t i = 0; i < sorted.size();) {
            std::size_t j = i;
            while (j < sorted.size() && sorted[j] == sorted[i]) ++j;
            const double w = static_cast<double>(j - i);
            const double x = sorted[i];
            values.push_back(x);
            cum_w.push_back(cum_w.back() + w);
            cum_wx.push_back(cum_wx.back() + w * x);
            cum_wxx.push_back(cum_wxx.back() + w * x * x);
            i = j;
        }
    }

    std::size_t distinct() const { return values.size(); }
    double total() const { return cum_w.back(); }
    // Index one past the last value <= b.
    std::size_t split(double b) const {
        return static_cast<std::size_t>(std::upper_bound(values.begin(), values.end(), b) - values.begin());
    }
    double weight(std::size_t lo, std::size_t hi) const { return cum_w[hi] - cum_w[lo]; }
    double mean(std::size_t lo, std::size_t hi) const { return (cum_wx[hi] - cum_wx[lo]) / weight(lo, hi); }
    double sq_error(std::size_t lo, std::size_t hi, double level) const {
        const double w = weight(lo, hi);
        const double sx = cum_wx[hi] - cum_wx[lo];
        const double sxx = cum_wxx[hi] - cum_wxx[lo];
        return std::max(0.0, sxx - 2.0 * level * sx + level * level * w);
    }
};

std::vector<double> midpoints(const std::vector<double>& levels) {
    std::vector<double> b(levels.size() - 1);
    for (std::size_t i = 0; i + 1 < levels.size(); ++i) b[i] = 0.5 * (levels[i] + levels[i + 1]);
    return b;
}

}  // namespace

ScalarQuantizer lloyd_max_fit(std::span<const double> samples, unsigned q_bits, const LloydMaxOptions& opts,
                              LloydMaxReport* report) {
    if (q_bits < 1 || q_bits > 24) throw std::invalid_argument("lloyd_max_fit: q_bits must be in [1, 24]");
    for (double x : samples)
        if (!std::isfinite(x)) throw std::invalid_argument("lloyd_max_fit: non-finite sample");
    const std::size_t n_levels = std::size_t{1} << q_bits;
    const EmpiricalDistribution dist(samples);
    if (dist.distinct() < n_levels)
        throw DegenerateInputError("lloyd_max_fit: need at least " + std::to_string(n_levels) +
                                   " distinct samples, got " + std::to_string(dist.distinct()));

    // Equal-mass initial cells, each holding at least one distinct value.
    std::vector<std::size_t> starts(n_levels + 1);
    starts[0] = 0;
    starts[n_levels] = dist.distinct();
    for (std::size_t i = 1; i < n_levels; ++i) {
        const double target = dist.total() * static_cast<double>(i) / static_cast<double>(n_levels);
        auto idx = static_cast<std::size_t>(std::lower_bound(dist.cum_w.begin() + 1, dist.cum_w.end(), target) -
                                            dist.cum_w.begin());
        idx = std::max(idx, starts[i - 1] + 1);
        idx = std::min(idx, dist.distinct() - (n_levels - i));
        starts[i] = idx;
    }
    ScalarQuantizer q;
    q.levels.resize(n_levels);
    for (std::size_t i = 0; i < n_levels; ++i) q.levels[i] = dist.mean(starts[i], starts[i + 1]);

    LloydMaxReport local;
    for (std::size_t it = 0; it < opts.max_iterations; ++it) {
        q.boundaries = midpoints(q.levels);
        double moved = 0.0;
        double err = 0.0;
        std::size_t lo = 0;
        for (std::size_t i = 0; i < n_levels; ++i) {
            const std::size_t hi = i + 1 < n_levels ? dist.split(q.boundaries[i]) : dist.distinct();
            if (hi > lo) {
                const double c = dist.mean(lo, hi);
                moved = std::max(moved, std::abs(c - q.levels[i]));
                q.levels[i] = c;
                err += dist.sq_error(lo, hi, c);
            }
            lo = hi;
        }
        local.distortion.push_back(err / dist.total());
        local.iterations = it + 1;
        if (moved < opts.tolerance) break;
    }
    q.boundaries = midpoints(q.levels);
    if (report) *report = std::move(local);
    return q;
}

ScalarQuantizer uniform_quantizer(double lo, double hi, unsigned q_bits) {
    if (!(lo < hi)) throw std::invalid_argument("uniform_quantizer: empty range");
    const std::size_t n = std::size_t{1} << q_bits;
    ScalarQuantizer q;
    const double step = (hi - lo) / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) q.levels.push_back(lo + (static_cast<double>(i) + 0.5) * step);
    q.boundaries = midpoints(q.levels);
    return q;
}

ParamBitAllocation ParamBitAllocation::allocate(std::size_t b_bits, std::size_t lp) {
    if (lp < 1) throw AllocationError("ParamBitAllocation: need at least one path");
    const std::size_t params = 3 * lp;
    if (b_bits < params)
        throw AllocationError("ParamBitAllocation: B=" + std::to_string(b_bits) + " cannot give each of the " +
                              std::to_string(params) + " parameters one bit");
    ParamBitAllocation a;
    a.total = b_bits;
    a.bits_per_param.assign(params, static_cast<unsigned>(b_bits / params));
    std::size_t remainder = b_bits % params;
    for (std::size_t cls : {2u, 0u, 1u})
        for (std::size_t l = 0; l < lp && remainder > 0; ++l, --remainder) a.bits_per_param[3 * l + cls] += 1;
    return a;
}

ChannelParamCodec::ChannelParamCodec(const ChannelDistribution& dist, const ArrayConfig& cfg, std::size_t b_bits,
                                     std::size_t lp, std::uint64_t seed, std::size_t training_samples)
    : cfg_(cfg), lp_(lp), alloc_(ParamBitAllocation::allocate(b_bits, lp)) {
    SeedTree seeds(seed);

    std::vector<double> gain_samples = gaussian_stream(seeds.leaf_seed(Purpose::init, 101), training_samples,
                                                       dist.gain_variance / 2.0);

    std::vector<std::vector<double>> angle_samples(lp, std::vector<double>(training_samples));
    {
        RandomStream rng = seeds.stream(Purpose::init, 102);
        std::vector<double> draw(lp);
        for (std::size_t s = 0; s < training_samples; ++s) {
            for (auto& a : draw) a = rng.uniform(dist.aod_low, dist.aod_high);
            std::sort(draw.begin(), draw.end());
            for (std::size_t l = 0; l < lp; ++l) angle_samples[l][s] = draw[l];
        }
    }

    std::map<unsigned, ScalarQuantizer> gain_q;
    std::map<std::pair<std::size_t, unsigned>, ScalarQuantizer> angle_q;
    slot_quantizers_.resize(3 * lp);
    for (std::size_t slot = 0; slot < 3 * lp; ++slot) {
        const unsigned bits = alloc_.bits_per_param[slot];
        if (ParamBitAllocation::slot_class(slot) == ParamClass::angle) {
            const auto key = std::make_pair(slot / 3, bits);
            if (!angle_q.contains(key)) angle_q[key] = lloyd_max_fit(angle_samples[slot / 3], bits);
            slot_quantizers_[slot] = angle_q[key];
        } else {
            if (!gain_q.contains(bits)) gain_q[bits] = lloyd_max_fit(gain_samples, bits);
            slot_quantizers_[slot] = gain_q[bits];
        }
    }
}

const ScalarQuantizer& ChannelParamCodec::quantizer(std::size_t slot) const { return slot_quantizers_.at(slot); }

std::vector<double> ChannelParamCodec::canonical_params(std::span<const cdouble> gains,
                                                        std::span<const double> aods) const {
    if (gains.size() != aods.size()) throw ShapeError("canonical_params: gains/aods length mismatch");
    std::vector<std::size_t> order(gains.size());
    std::iota(order.begin(), order.end(), 0);
    // Strongest lp paths, then ascending AoD.
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return std::norm(gains[a]) > std::norm(gains[b]); });
    if (order.size() > lp_) order.resize(lp_);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return aods[a] < aods[b]; });
    std::vector<double> out(3 * lp_, 0.0);
    for (std::size_t l = 0; l < order.size(); ++l) {
        out[3 * l] = gains[order[l]].real();
        out[3 * l + 1] = gains[order[l]].imag();
        out[3 * l + 2] = aods[order[l]];
    }
    return out;
}

std::vector<std::uint8_t> ChannelParamCodec::quantize_channel_params(std::span<const double> real_params) const {
    if (real_params.size() != 3 * lp_) throw ShapeError("quantize_channel_params: expected 3*Lp parameters");
    std::vector<std::uint8_t> bits;
    bits.reserve(alloc_.total);
    for (std::size_t slot = 0; slot < real_params.size(); ++slot) {
        const std::size_t idx = slot_quantizers_[slot].quantize(real_params[slot]);
        for (unsigned b = alloc_.bits_per_param[slot]; b-- > 0;) bits.push_back(static_cast<std::uint8_t>((idx >> b) & 1u));
    }
    return bits;
}

std::vector<double> ChannelParamCodec::dequantize_params(std::span<const std::uint8_t> bits) const {
    if (bits.size() != alloc_.total) throw ShapeError("dequantize_params: expected B bits");
    std::vector<double> params(3 * lp_);
    std::size_t pos = 0;
    for (std::size_t slot = 0; slot < params.size(); ++slot) {
        std::size_t idx = 0;
        for (unsigned b = 0; b < alloc_.bits_per_param[slot]; ++b) idx = (idx << 1) | (bits[pos++] & 1u);
        params[slot] = slot_quantizers_[slot].dequantize(idx);
    }
    return params;
}

CMatrix ChannelParamCodec::reconstruct_channel(std::span<const std::uint8_t> bits) const {
    const auto params = dequantize_params(bits);
    std::vector<cdouble> gains(lp_);
    std::vector<double> aods(lp_);
    for (std::size_t l = 0; l < lp_; ++l) {
        gains[l] = {params[3 * l], params[3 * l + 1]};
        aods[l] = params[3 * l + 2];
    }
    return compose_channel(gains, aods, cfg_);
}

CMatrix ChannelParamCodec::feedback_roundtrip(std::span<const cdouble> gains, std::span<const double> aods) const {
    return reconstruct_channel(quantize_channel_params(canonical_params(gains, aods)));
}

nlohmann::json ChannelParamCodec::to_json() const {
    nlohmann::json slots = nlohmann::json::array();
    for (std::size_t s = 0; s < slot_quantizers_.size(); ++s) {
        static constexpr const char* names[] = {"gain_re", "gain_im", "angle"};
        slots.push_back({{"slot", s},
                         {"path", s / 3},
                         {"class", names[s % 3]},
                         {"bits", alloc_.bits_per_param[s]},
                         {"quantizer", slot_quantizers_[s].to_json()}});
    }
    return {{"B", alloc_.total}, {"Lp", lp_}, {"slots", slots}};
}

}  // namespace fdd
