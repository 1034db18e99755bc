// SPDX-License-Identifier: Apache-2.0
#pragma once

// Two-step procedures: a soft-output encoder trained once and reused across feedback budgets
// (quantizer fitted on its outputs, BS network retrained per resolution), and a single-user
// encoder trained once and reused across user counts.

#include "fdd/dsc.hpp"

namespace fdd {

/// Everything a generalization step needs to train without touching the caller's streams.
struct TrainingContext {
    TrainingSchedule schedule;
    ChannelDistribution dist;
    ArrayConfig array;
    std::uint64_t seed = 0;
    EpochCallback on_epoch;
};

struct SoftEncoderSpec {
    std::size_t s = 10;
    unsigned q_bits = 0;  // 0 before a quantizer is attached
    std::optional<ScalarQuantizer> quantizer;

    /// B = S * Q.
    std::size_t feedback_bits() const { return s * q_bits; }
};

/// Reported per-user feedback budget: S*Q on the soft path with a quantizer, B on the hard path.
/// A soft model without a quantizer sends unquantized reals and has no finite budget (returns 0).
std::size_t feedback_bits(const E2EModel<float>& model);

/// Joint training with the sign layer replaced by S tanh outputs. `cfg.encoder.outputs` is overwritten by S.
E2EModel<float> train_soft_encoder(ModelConfig cfg, std::size_t s, const TrainingContext& ctx,
                                   TrainingHistory* history = nullptr);

/// Lloyd-Max quantizer fitted on the pooled tanh outputs of every neuron and user over `samples`.
ScalarQuantizer fit_output_quantizer(E2EModel<float>& model, const SampleSet& samples, unsigned q_bits,
                                     std::size_t min_values = 100'000, LloydMaxReport* report = nullptr);

/// Copy of `soft` with pilots and encoders frozen, the quantizer in the forward path (none = unquantized
/// proxy), and a freshly initialized BS network trained on the resulting messages.
E2EModel<float> retrain_bs_decoder(const E2EModel<float>& soft, std::optional<ScalarQuantizer> quantizer,
                                   const DecoderSpec& decoder, const TrainingContext& ctx,
                                   TrainingHistory* history = nullptr);

/// Joint training of a K = 1 system; its encoder and pilots are reused verbatim for any K.
E2EModel<float> train_shared_encoder_single_user(ModelConfig cfg, const TrainingContext& ctx,
                                                 TrainingHistory* history = nullptr);

/// Hidden widths of the BS network for K users: `base` for K <= 2, `large` beyond.
DecoderSpec decoder_for_k(std::size_t k_users, const DecoderSpec& base, const DecoderSpec& large);

/// K-user system around the frozen single-user encoder; only the BS network trains.
E2EModel<float> train_bs_for_k(const E2EModel<float>& single, std::size_t k_users, const DecoderSpec& decoder,
                               const TrainingContext& ctx, TrainingHistory* history = nullptr);

/// Frozen-encoder bundle: `<dir>/encoder.{json,bin}`, optional `<dir>/quantizer.json`, and
/// `<dir>/bundle.json` holding the hash that retrained decoders reference.
struct FrozenBundle {
    std::filesystem::path dir;
    std::string hash;
};

FrozenBundle save_frozen_bundle(const std::filesystem::path& dir, const E2EModel<float>& model,
                                const std::optional<ScalarQuantizer>& quantizer = std::nullopt);
/// Loads the user side of a bundle into `model` (shapes must agree) and returns the stored quantizer.
std::optional<ScalarQuantizer> load_frozen_bundle(const std::filesystem::path& dir, E2EModel<float>& model,
                                                  std::string* hash = nullptr);

/// Byte image of the user-side state (pilots and encoders), for freezing checks.
nn::TensorSet user_side_tensors(const E2EModel<float>& model);

}  // namespace fdd
