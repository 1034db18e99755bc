// SPDX-License-Identifier: Apache-2.0
#include "fdd/generalize.hpp"

#include <nlohmann/json.hpp>

#include <fstream>

namespace fdd {

using nlohmann::json;

namespace {

TrainingHistory run(Trainable& model, const TrainingContext& ctx) {
    return train(model, ctx.schedule, ctx.dist, ctx.array, SeedTree(ctx.seed), ctx.on_epoch);
}

std::uint64_t init_seed(const TrainingContext& ctx) { return SeedTree(ctx.seed).leaf_seed(Purpose::init); }

}  // namespace

std::size_t feedback_bits(const E2EModel<float>& model) {
    const auto& cfg = model.config();
    if (cfg.encoder.kind == FeedbackKind::hard_sign) return cfg.encoder.outputs;
    if (!model.feedback_quantizer) return 0;
    std::size_t q = 0;
    while ((std::size_t{1} << q) < model.feedback_quantizer->size()) ++q;
    return cfg.encoder.outputs * q;
}

E2EModel<float> train_soft_encoder(ModelConfig cfg, std::size_t s, const TrainingContext& ctx,
                                   TrainingHistory* history) {
    if (s < 1) throw std::invalid_argument("train_soft_encoder: S must be >= 1");
    cfg.encoder.kind = FeedbackKind::soft_tanh;
    cfg.encoder.outputs = s;
    E2EModel<float> model(cfg, init_seed(ctx));
    auto h = run(model, ctx);
    if (history) *history = std::move(h);
    return model;
}

ScalarQuantizer fit_output_quantizer(E2EModel<float>& model, const SampleSet& samples, unsigned q_bits,
                                     std::size_t min_values, LloydMaxReport* report) {
    if (model.config().encoder.kind != FeedbackKind::soft_tanh)
        throw std::invalid_argument("fit_output_quantizer: model does not have a soft (tanh) output");
    const auto values = model.pooled_feedback(samples);
    if (values.size() < min_values)
        throw std::invalid_argument("fit_output_quantizer: need at least " + std::to_string(min_values) +
                                    " pooled outputs, got " + std::to_string(values.size()));
    return lloyd_max_fit(values, q_bits, {}, report);
}

E2EModel<float> retrain_bs_decoder(const E2EModel<float>& soft, std::optional<ScalarQuantizer> quantizer,
                                   const DecoderSpec& decoder, const TrainingContext& ctx,
                                   TrainingHistory* history) {
    if (quantizer && soft.config().encoder.kind != FeedbackKind::soft_tanh)
        throw std::invalid_argument("retrain_bs_decoder: quantizers apply to soft-output encoders only");
    E2EModel<float> model = soft;
    model.feedback_quantizer = std::move(quantizer);
    model.freeze_users = true;
    model.reset_decoder(decoder, init_seed(ctx));
    auto h = run(model, ctx);
    if (history) *history = std::move(h);
    return model;
}

E2EModel<float> train_shared_encoder_single_user(ModelConfig cfg, const TrainingContext& ctx,
                                                 TrainingHistory* history) {
    cfg.k = 1;
    cfg.shared_encoder = true;
    E2EModel<float> model(cfg, init_seed(ctx));
    auto h = run(model, ctx);
    if (history) *history = std::move(h);
    return model;
}

DecoderSpec decoder_for_k(std::size_t k_users, const DecoderSpec& base, const DecoderSpec& large) {
    return k_users > 2 ? large : base;
}

E2EModel<float> train_bs_for_k(const E2EModel<float>& single, std::size_t k_users, const DecoderSpec& decoder,
                               const TrainingContext& ctx, TrainingHistory* history) {
    if (single.config().k != 1) throw std::invalid_argument("train_bs_for_k: source model must be single-user");
    if (k_users < 1) throw std::invalid_argument("train_bs_for_k: K must be >= 1");
    E2EModel<float> model = E2EModel<float>::with_shared_encoder(single, k_users, decoder, init_seed(ctx));
    auto h = run(model, ctx);
    if (history) *history = std::move(h);
    return model;
}

nn::TensorSet user_side_tensors(const E2EModel<float>& model) {
    nn::TensorSet all = model.snapshot(), out;
    for (auto& t : all.tensors)
        if (t.name.rfind("decoder", 0) != 0) out.add(std::move(t));
    return out;
}

FrozenBundle save_frozen_bundle(const std::filesystem::path& dir, const E2EModel<float>& model,
                                const std::optional<ScalarQuantizer>& quantizer) {
    std::filesystem::create_directories(dir);
    const nn::TensorSet user = user_side_tensors(model);
    json cfg = model.config().to_json();
    cfg.erase("decoder");
    cfg.erase("K");
    nn::save_checkpoint(dir / "encoder", user, sha256_hex(cfg.dump()), json({{"user_config", cfg}}).dump());

    std::string digest_input = cfg.dump();
    for (const auto& t : user.tensors) digest_input.append(reinterpret_cast<const char*>(t.bytes.data()), t.bytes.size());
    if (quantizer) {
        const std::string qtext = quantizer->to_json().dump();
        std::ofstream(dir / "quantizer.json") << qtext << '\n';
        digest_input += qtext;
    } else {
        std::filesystem::remove(dir / "quantizer.json");
    }
    FrozenBundle b{dir, sha256_hex(digest_input)};
    std::ofstream(dir / "bundle.json") << json({{"format", "fdd-frozen-encoder/1"},
                                                {"hash", b.hash},
                                                {"checkpoint", "encoder"},
                                                {"quantizer", quantizer ? json("quantizer.json") : json(nullptr)}})
                                              .dump(2)
                                       << '\n';
    return b;
}

std::optional<ScalarQuantizer> load_frozen_bundle(const std::filesystem::path& dir, E2EModel<float>& model,
                                                  std::string* hash) {
    std::ifstream in(dir / "bundle.json");
    if (!in) throw std::runtime_error("load_frozen_bundle: missing " + (dir / "bundle.json").string());
    const json manifest = json::parse(in);
    const nn::TensorSet user = nn::load_checkpoint(dir / manifest.at("checkpoint").get<std::string>());
    // Splice the stored user side into the model's own snapshot, keeping its decoder.
    nn::TensorSet merged;
    for (auto& t : model.snapshot().tensors) merged.add(user.contains(t.name) ? user.at(t.name) : std::move(t));
    model.restore(merged);
    if (hash) *hash = manifest.at("hash").get<std::string>();
    if (manifest.at("quantizer").is_null()) return std::nullopt;
    std::ifstream qin(dir / manifest.at("quantizer").get<std::string>());
    if (!qin) throw std::runtime_error("load_frozen_bundle: missing quantizer file");
    return ScalarQuantizer::from_json(json::parse(qin));
}

}  // namespace fdd
