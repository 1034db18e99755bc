// SPDX-License-Identifier: Apache-2.0
#include "fdd/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#ifndef FDD_GIT_DESCRIBE
#define FDD_GIT_DESCRIBE "unknown"
#endif

namespace fdd {

using nlohmann::json;

std::string git_describe() { return FDD_GIT_DESCRIBE; }

// ---------------------------------------------------------------------------
// Presets and methods

PresetWidths preset_widths(Preset p) {
    PresetWidths w;
    if (p == Preset::paper) {
        w.encoder.hidden = {1024, 512, 256};
        w.decoder.hidden = {1024, 512, 512};
        w.decoder_large_k = DecoderSpec::large_k();
        w.schedule = TrainingSchedule::paper();
    } else {
        w.encoder.hidden = {256, 128, 64};
        w.decoder.hidden = {256, 128, 128};
        w.decoder_large_k.hidden = {512, 256, 128};
        w.schedule = TrainingSchedule::desk();
    }
    return w;
}

Preset parse_preset(const std::string& s) {
    if (s == "desk") return Preset::desk;
    if (s == "paper") return Preset::paper;
    throw std::invalid_argument("unknown preset '" + s + "' (expected desk or paper)");
}

std::string to_string(Preset p) { return p == Preset::desk ? "desk" : "paper"; }

const std::vector<std::string>& known_methods() {
    static const std::vector<std::string> methods{
        "proposed",           "proposed-two-step-B", "proposed-two-step-K", "mrt-csit",
        "zf-csit",            "mrt-csir-quantized",  "zf-csir-quantized",   "mrt-omp-infinite",
        "zf-omp-infinite",    "mrt-omp-quantized",   "zf-omp-quantized",    "mrt-dnn-mse",
        "zf-dnn-mse"};
    return methods;
}

bool is_training_free(const std::string& method) {
    return method.find("csit") != std::string::npos || method.find("csir") != std::string::npos ||
           method.find("omp") != std::string::npos;
}

namespace {

bool uses_param_codec(const std::string& method) {
    return method.find("csir-quantized") != std::string::npos || method.find("omp-quantized") != std::string::npos;
}
bool uses_omp(const std::string& method) { return method.find("-omp-") != std::string::npos; }
bool is_zf(const std::string& method) { return method.rfind("zf-", 0) == 0; }

std::string join(const std::vector<std::size_t>& v, char sep) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) s += sep;
        s += std::to_string(v[i]);
    }
    return s;
}

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

template <typename V>
std::vector<V> scalar_or_list(const json& j) {
    if (j.is_array()) return j.get<std::vector<V>>();
    return {j.get<V>()};
}

}  // namespace

// ---------------------------------------------------------------------------
// ExperimentConfig

ExperimentConfig ExperimentConfig::from_json(const json& j) {
    static const std::set<std::string> known{"M",       "K",           "L",        "B",          "snr_db",
                                             "sigma2",  "Lp",          "Lp_test",  "aod_deg",    "spacing",
                                             "methods", "preset",      "schedule", "seed",       "test_size",
                                             "soft_S",  "omp_grid",    "baseline_lp", "quantizer_samples", "out"};
    ExperimentConfig c;
    std::vector<std::string> bad;
    std::string messages;
    if (!j.is_object()) throw ConfigError("experiment config must be a JSON object", {"<root>"});
    for (const auto& [key, _] : j.items())
        if (!known.contains(key)) {
            bad.push_back(key);
            messages += "unknown field '" + key + "'; ";
        }
    auto take = [&](const char* key, auto&& assign) {
        if (!j.contains(key)) return;
        try {
            assign(j.at(key));
        } catch (const std::exception& e) {
            bad.push_back(key);
            messages += std::string(key) + ": " + e.what() + "; ";
        }
    };
    take("M", [&](const json& v) { c.m = v.get<std::size_t>(); });
    take("K", [&](const json& v) { c.k_list = scalar_or_list<std::size_t>(v); });
    take("L", [&](const json& v) { c.l = v.get<std::size_t>(); });
    take("B", [&](const json& v) { c.b_list = scalar_or_list<std::size_t>(v); });
    take("snr_db", [&](const json& v) { c.snr_db = v.get<double>(); });
    take("sigma2", [&](const json& v) { c.sigma2 = v.get<double>(); });
    take("Lp", [&](const json& v) { c.lp_train = scalar_or_list<std::size_t>(v); });
    take("Lp_test", [&](const json& v) { c.lp_test = scalar_or_list<std::size_t>(v); });
    take("aod_deg", [&](const json& v) {
        const auto r = v.get<std::vector<double>>();
        if (r.size() != 2) throw std::invalid_argument("expected [low, high]");
        c.aod_low_deg = r[0];
        c.aod_high_deg = r[1];
    });
    take("spacing", [&](const json& v) { c.spacing_over_lambda = v.get<double>(); });
    take("methods", [&](const json& v) { c.methods = scalar_or_list<std::string>(v); });
    take("preset", [&](const json& v) { c.preset = parse_preset(v.get<std::string>()); });
    take("schedule", [&](const json& v) {
        if (!v.is_object()) throw std::invalid_argument("expected an object");
        c.schedule_overrides = v;
    });
    take("seed", [&](const json& v) { c.seed = v.get<std::uint64_t>(); });
    take("test_size", [&](const json& v) { c.test_size = v.get<std::size_t>(); });
    take("soft_S", [&](const json& v) { c.soft_s = v.get<std::size_t>(); });
    take("omp_grid", [&](const json& v) { c.omp_grid = v.get<std::size_t>(); });
    take("baseline_lp", [&](const json& v) { c.baseline_lp = v.get<std::size_t>(); });
    take("quantizer_samples", [&](const json& v) { c.quantizer_training_samples = v.get<std::size_t>(); });
    take("out", [&](const json& v) { c.out_dir = v.get<std::string>(); });
    try {
        c.validate();
    } catch (const ConfigError& e) {
        for (const auto& f : e.fields)
            if (std::find(bad.begin(), bad.end(), f) == bad.end()) bad.push_back(f);
        const std::string_view what = e.what();
        const std::string_view prefix = "invalid experiment config: ";
        messages += what.starts_with(prefix) ? what.substr(prefix.size()) : what;
    }
    if (!bad.empty()) throw ConfigError("invalid experiment config: " + messages, bad);
    return c;
}

json ExperimentConfig::to_json() const {
    return {{"M", m},
            {"K", k_list},
            {"L", l},
            {"B", b_list},
            {"snr_db", snr_db},
            {"sigma2", sigma2},
            {"Lp", lp_train},
            {"Lp_test", lp_test},
            {"aod_deg", {aod_low_deg, aod_high_deg}},
            {"spacing", spacing_over_lambda},
            {"methods", methods},
            {"preset", to_string(preset)},
            {"schedule", schedule_overrides},
            {"seed", seed},
            {"test_size", test_size},
            {"soft_S", soft_s},
            {"omp_grid", omp_grid},
            {"baseline_lp", baseline_lp},
            {"quantizer_samples", quantizer_training_samples},
            {"out", out_dir}};
}

std::string ExperimentConfig::hash() const {
    json j = to_json();
    j.erase("out");
    return sha256_hex(j.dump());
}

TrainingSchedule ExperimentConfig::schedule() const {
    return TrainingSchedule::from_json(schedule_overrides, preset_widths(preset).schedule);
}

ChannelDistribution ExperimentConfig::train_distribution() const {
    return ChannelDistribution::from_degrees(lp_train, aod_low_deg, aod_high_deg);
}

ChannelDistribution ExperimentConfig::test_distribution(std::size_t lp) const {
    if (lp == 0) return train_distribution();
    return ChannelDistribution::from_degrees({lp}, aod_low_deg, aod_high_deg);
}

std::vector<std::size_t> ExperimentConfig::test_points() const {
    if (lp_test.empty()) return {0};
    return lp_test;
}

std::size_t ExperimentConfig::effective_baseline_lp(std::size_t test_lp) const {
    if (baseline_lp != 0) return baseline_lp;
    if (test_lp != 0) return test_lp;
    return *std::max_element(lp_train.begin(), lp_train.end());
}

void ExperimentConfig::validate() const {
    std::vector<std::string> bad;
    std::string messages;
    auto fail = [&](const std::string& field, const std::string& msg) {
        if (std::find(bad.begin(), bad.end(), field) == bad.end()) bad.push_back(field);
        messages += field + ": " + msg + "; ";
    };
    if (m < 2) fail("M", "must be >= 2");
    if (k_list.empty()) fail("K", "needs at least one value");
    for (auto k : k_list)
        if (k < 1 || k >= m) fail("K", "every K must satisfy 1 <= K < M");
    if (l < 1) fail("L", "must be >= 1");
    if (b_list.empty()) fail("B", "needs at least one value");
    for (auto b : b_list)
        if (b < 1) fail("B", "every B must be >= 1");
    if (!std::isfinite(snr_db)) fail("snr_db", "must be finite");
    if (!(sigma2 > 0.0) || !std::isfinite(sigma2)) fail("sigma2", "must be positive");
    if (lp_train.empty()) fail("Lp", "needs at least one value");
    for (auto lp : lp_train)
        if (lp < 1) fail("Lp", "every L_p must be >= 1");
    for (auto lp : lp_test)
        if (lp < 1) fail("Lp_test", "every L_p must be >= 1");
    if (!(aod_low_deg < aod_high_deg) || aod_low_deg < -90.0 || aod_high_deg > 90.0)
        fail("aod_deg", "need -90 <= low < high <= 90");
    if (!(spacing_over_lambda > 0.0)) fail("spacing", "must be positive");
    if (methods.empty()) fail("methods", "needs at least one method");
    std::set<std::string> seen;
    for (const auto& meth : methods) {
        const auto& all = known_methods();
        if (std::find(all.begin(), all.end(), meth) == all.end()) fail("methods", "unknown method '" + meth + "'");
        if (!seen.insert(meth).second) fail("methods", "duplicate method '" + meth + "'");
    }
    if (test_size < 1) fail("test_size", "must be >= 1");
    if (soft_s < 1) fail("soft_S", "must be >= 1");
    if (omp_grid < 2) fail("omp_grid", "must be >= 2");
    try {
        schedule().validate();
    } catch (const std::exception& e) {
        fail("schedule", e.what());
    }
    auto uses = [&](auto pred) { return std::any_of(methods.begin(), methods.end(), pred); };
    if (uses([](const std::string& s) { return s == "proposed-two-step-B"; }))
        for (auto b : b_list)
            if (b % soft_s != 0 || b / soft_s < 1 || b / soft_s > 16)
                fail("B", "proposed-two-step-B needs every B to be S*Q with 1 <= Q <= 16 (S = " +
                              std::to_string(soft_s) + ", B = " + std::to_string(b) + ")");
    if (!lp_train.empty()) {
        for (auto tp : test_points()) {
            const std::size_t blp = effective_baseline_lp(tp);
            if (uses(uses_param_codec))
                for (auto b : b_list)
                    if (b < 3 * blp)
                        fail("B", "quantized parametric feedback needs B >= 3*L_p (B = " + std::to_string(b) +
                                      ", L_p = " + std::to_string(blp) + ")");
            if (uses(uses_omp) && blp > l) fail("baseline_lp", "OMP cannot recover more paths than pilots (L)");
            if (uses(uses_param_codec) && quantizer_training_samples < 10'000)
                fail("quantizer_samples", "too few samples to fit the parameter quantizers");
        }
    }
    if (!bad.empty()) throw ConfigError("invalid experiment config: " + messages, bad);
}

// ---------------------------------------------------------------------------
// CSV

const std::string& csv_header() {
    static const std::string h = "method,M,K,L,B,Lp,snr_db,seed,sum_rate,sum_rate_se,user_rates,test_size";
    return h;
}

std::string to_csv(const std::vector<ResultRow>& rows) {
    std::ostringstream out;
    out << csv_header() << '\n';
    for (const auto& r : rows) {
        std::string ur;
        for (std::size_t i = 0; i < r.user_rates.size(); ++i) {
            if (i) ur += ';';
            ur += fmt(r.user_rates[i]);
        }
        out << r.method << ',' << r.m << ',' << r.k << ',' << r.l << ',' << r.b << ',' << r.lp << ',' << fmt(r.snr_db)
            << ',' << r.seed << ',' << fmt(r.sum_rate) << ',' << fmt(r.sum_rate_se) << ',' << ur << ',' << r.test_size
            << '\n';
    }
    return out.str();
}

std::vector<ResultRow> parse_csv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) || line != csv_header()) throw std::invalid_argument("parse_csv: unexpected header");
    std::vector<ResultRow> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::string cell;
        std::istringstream ls(line);
        while (std::getline(ls, cell, ',')) f.push_back(cell);
        if (!line.empty() && line.back() == ',') f.emplace_back();
        if (f.size() != 12) throw std::invalid_argument("parse_csv: expected 12 fields in '" + line + "'");
        ResultRow r;
        r.method = f[0];
        r.m = std::stoull(f[1]);
        r.k = std::stoull(f[2]);
        r.l = std::stoull(f[3]);
        r.b = std::stoull(f[4]);
        r.lp = f[5];
        r.snr_db = std::stod(f[6]);
        r.seed = std::stoull(f[7]);
        r.sum_rate = std::stod(f[8]);
        r.sum_rate_se = std::stod(f[9]);
        std::istringstream us(f[10]);
        while (std::getline(us, cell, ';'))
            if (!cell.empty()) r.user_rates.push_back(std::stod(cell));
        r.test_size = std::stoull(f[11]);
        rows.push_back(std::move(r));
    }
    return rows;
}

// ---------------------------------------------------------------------------
// Baseline precoding helpers

PrecodingMatrix precode_from_estimate(const CMatrix& h_hat, bool zero_forcing, double power) {
    if (!(h_hat.frobenius_norm_sq() > 0.0)) return {CMatrix(h_hat.cols(), h_hat.rows()), power};
    if (zero_forcing) {
        try {
            return zf(h_hat, power);
        } catch (const SingularError&) {
        }
    }
    return mrt(h_hat, power);
}

namespace {

CMatrix stack_estimates(const std::vector<CMatrix>& h, std::size_t first, std::size_t k, std::size_t m) {
    CMatrix out(k, m);
    for (std::size_t u = 0; u < k; ++u)
        for (std::size_t i = 0; i < m; ++i) {
            out.re(u, i) = h[first + u].re(i, 0);
            out.im(u, i) = -h[first + u].im(i, 0);
        }
    return out;
}

std::uint64_t tag_of(const std::string& hex) { return std::stoull(hex.substr(0, 16), nullptr, 16); }

// ---------------------------------------------------------------------------
// Runner

class Runner {
  public:
    Runner(const ExperimentConfig& cfg, RunMode mode, ProgressSink progress)
        : cfg_(cfg), mode_(mode), progress_(std::move(progress)), root_(cfg.seed), widths_(preset_widths(cfg.preset)),
          schedule_(cfg.schedule()), out_(cfg.out_dir), ckdir_(out_ / "checkpoints") {}

    RunSummary run();
    std::vector<std::string> quantfit();

  private:
    struct GridPoint {
        std::size_t k;
        std::size_t lp;  // 0: training distribution
    };

    void note(const std::string& s) const {
        if (progress_) progress_(s);
    }

    ModelConfig model_config(std::size_t k, std::size_t outputs) const {
        ModelConfig mc;
        mc.m = cfg_.m;
        mc.k = k;
        mc.l = cfg_.l;
        mc.power = cfg_.power();
        mc.sigma2 = cfg_.sigma2;
        mc.encoder = widths_.encoder;
        mc.encoder.outputs = outputs;
        mc.encoder.kind = FeedbackKind::hard_sign;
        mc.decoder = decoder_for_k(k, widths_.decoder, widths_.decoder_large_k);
        mc.shared_encoder = false;
        return mc;
    }

    json training_key(const std::string& family, const ModelConfig& mc) const {
        const auto d = cfg_.train_distribution();
        return {{"family", family},
                {"model", mc.to_json()},
                {"schedule", schedule_.to_json()},
                {"train_dist", {{"Lp", d.lp_set}, {"aod_rad", {d.aod_low, d.aod_high}}, {"spacing", cfg_.spacing_over_lambda}}},
                {"seed", cfg_.seed}};
    }

    TrainingContext context(const std::string& hash) const {
        TrainingContext ctx;
        ctx.schedule = schedule_;
        ctx.dist = cfg_.train_distribution();
        ctx.array = cfg_.array();
        ctx.seed = root_.child(tag_of(hash)).root_seed();
        ctx.on_epoch = [this, hash](const EpochRecord& e) {
            if (e.epoch % 10 == 0 || e.best)
                note("  [" + hash.substr(0, 8) + "] epoch " + std::to_string(e.epoch) + " val " + fmt(e.validation) +
                     (e.best ? " *" : ""));
        };
        return ctx;
    }

    std::filesystem::path ckpt(const std::string& hash) const { return ckdir_ / hash; }
    bool cached(const std::string& hash) const {
        return std::filesystem::exists(ckpt(hash).string() + ".json") && std::filesystem::exists(ckpt(hash).string() + ".bin");
    }
    void require_trainable(const std::string& hash, const std::string& what) const {
        if (mode_ == RunMode::eval_only)
            throw MissingCheckpointError("eval: missing checkpoint for " + what + " (" + ckpt(hash).string() +
                                         "); run `train` first");
    }
    void record_checkpoint(const std::string& hash) {
        const std::string p = ckpt(hash).string();
        if (std::find(checkpoints_.begin(), checkpoints_.end(), p) == checkpoints_.end()) checkpoints_.push_back(p);
    }

    template <typename Build>
    E2EModel<float>& e2e(const json& key, const std::string& what, Build build) {
        const std::string hash = sha256_hex(key.dump());
        if (auto it = e2e_cache_.find(hash); it != e2e_cache_.end()) return it->second;
        record_checkpoint(hash);
        if (cached(hash)) {
            note("load " + what + " <- " + ckpt(hash).string());
            return e2e_cache_.emplace(hash, load_e2e_model<float>(ckpt(hash))).first->second;
        }
        require_trainable(hash, what);
        note("train " + what + " [" + hash.substr(0, 8) + "]");
        TrainingHistory hist;
        json extra = {{"key", key}};
        E2EModel<float> model = build(context(hash), hist, extra);
        extra["history"] = hist.to_json();
        save_model(ckpt(hash), model, extra);
        return e2e_cache_.emplace(hash, std::move(model)).first->second;
    }

    ChannelEstimatorModel<float>& estimator(std::size_t b) {
        ModelConfig mc = model_config(1, b);
        mc.shared_encoder = true;
        const json key = training_key("channel-mse", mc);
        const std::string hash = sha256_hex(key.dump());
        if (auto it = est_cache_.find(hash); it != est_cache_.end()) return it->second;
        record_checkpoint(hash);
        if (cached(hash)) {
            note("load dnn-mse B=" + std::to_string(b));
            return est_cache_.emplace(hash, load_estimator_model<float>(ckpt(hash))).first->second;
        }
        require_trainable(hash, "dnn-mse estimator B=" + std::to_string(b));
        note("train dnn-mse estimator B=" + std::to_string(b) + " [" + hash.substr(0, 8) + "]");
        ChannelEstimatorModel<float> model(mc, SeedTree(context(hash).seed).leaf_seed(Purpose::init));
        const TrainingContext ctx = context(hash);
        const auto hist = train(model, ctx.schedule, ctx.dist, ctx.array, SeedTree(ctx.seed), ctx.on_epoch);
        save_model(ckpt(hash), model, {{"key", key}, {"history", hist.to_json()}});
        return est_cache_.emplace(hash, std::move(model)).first->second;
    }

    E2EModel<float>& proposed(std::size_t k, std::size_t b) {
        const ModelConfig mc = model_config(k, b);
        return e2e(training_key("proposed", mc), "proposed K=" + std::to_string(k) + " B=" + std::to_string(b),
                   [&](const TrainingContext& ctx, TrainingHistory& hist, json&) {
                       E2EModel<float> model(mc, SeedTree(ctx.seed).leaf_seed(Purpose::init));
                       hist = train(model, ctx.schedule, ctx.dist, ctx.array, SeedTree(ctx.seed), ctx.on_epoch);
                       return model;
                   });
    }

    std::pair<json, ModelConfig> soft_key(std::size_t k) const {
        ModelConfig mc = model_config(k, cfg_.soft_s);
        mc.encoder.kind = FeedbackKind::soft_tanh;
        return {training_key("soft-encoder", mc), mc};
    }

    E2EModel<float>& soft_model(std::size_t k) {
        auto [key, mc] = soft_key(k);
        return e2e(key, "soft encoder K=" + std::to_string(k) + " S=" + std::to_string(cfg_.soft_s),
                   [&, mc = mc](const TrainingContext& ctx, TrainingHistory& hist, json&) {
                       return train_soft_encoder(mc, cfg_.soft_s, ctx, &hist);
                   });
    }

    ScalarQuantizer soft_quantizer(E2EModel<float>& soft, const std::string& soft_hash, unsigned q) {
        const SeedTree fit_tree = root_.child(tag_of(soft_hash)).child(0x9f17);
        RandomStream ch = fit_tree.stream(Purpose::channels), nz = fit_tree.stream(Purpose::noise);
        const std::size_t k = soft.config().k;
        const std::size_t n = std::max<std::size_t>(10'000, (100'000 + k * cfg_.soft_s - 1) / (k * cfg_.soft_s));
        const SampleSet fit_set = make_sample_set(cfg_.train_distribution(), cfg_.array(), k, cfg_.l, n, cfg_.sigma2, ch, nz);
        return fit_output_quantizer(soft, fit_set, q);
    }

    E2EModel<float>& two_step_b(std::size_t k, std::size_t b) {
        E2EModel<float>& soft = soft_model(k);
        const std::string soft_hash = sha256_hex(soft_key(k).first.dump());
        const auto q = static_cast<unsigned>(b / cfg_.soft_s);
        const DecoderSpec dec = decoder_for_k(k, widths_.decoder, widths_.decoder_large_k);
        const json key = {{"family", "two-step-B-decoder"},
                          {"soft", soft_hash},
                          {"q_bits", q},
                          {"decoder", dec.hidden},
                          {"schedule", schedule_.to_json()},
                          {"seed", cfg_.seed}};
        return e2e(key, "two-step-B decoder K=" + std::to_string(k) + " Q=" + std::to_string(q),
                   [&](const TrainingContext& ctx, TrainingHistory& hist, json& extra) {
                       const ScalarQuantizer quant = soft_quantizer(soft, soft_hash, q);
                       const auto bundle = save_frozen_bundle(
                           ckdir_ / ("bundle_" + soft_hash.substr(0, 16) + "_q" + std::to_string(q)), soft, quant);
                       extra["frozen_bundle"] = {{"dir", bundle.dir.string()}, {"hash", bundle.hash}};
                       return retrain_bs_decoder(soft, quant, dec, ctx, &hist);
                   });
    }

    E2EModel<float>& two_step_k(std::size_t k, std::size_t b) {
        ModelConfig mc = model_config(1, b);
        mc.shared_encoder = true;
        const json single_key = training_key("single-user-encoder", mc);
        const std::string single_hash = sha256_hex(single_key.dump());
        E2EModel<float>& single = e2e(single_key, "single-user encoder B=" + std::to_string(b),
                                      [&](const TrainingContext& ctx, TrainingHistory& hist, json&) {
                                          return train_shared_encoder_single_user(mc, ctx, &hist);
                                      });
        const DecoderSpec dec = decoder_for_k(k, widths_.decoder, widths_.decoder_large_k);
        const json key = {{"family", "two-step-K-decoder"},
                          {"single", single_hash},
                          {"K", k},
                          {"decoder", dec.hidden},
                          {"schedule", schedule_.to_json()},
                          {"seed", cfg_.seed}};
        return e2e(key, "two-step-K decoder K=" + std::to_string(k) + " B=" + std::to_string(b),
                   [&](const TrainingContext& ctx, TrainingHistory& hist, json& extra) {
                       const auto bundle = save_frozen_bundle(ckdir_ / ("bundle_" + single_hash.substr(0, 16)), single);
                       extra["frozen_bundle"] = {{"dir", bundle.dir.string()}, {"hash", bundle.hash}};
                       return train_bs_for_k(single, k, dec, ctx, &hist);
                   });
    }

    const SampleSet& test_set(const GridPoint& g) {
        const auto key = std::make_pair(g.k, g.lp);
        if (auto it = test_cache_.find(key); it != test_cache_.end()) return it->second;
        const SeedTree tree = root_.child(0x7e57);
        const std::uint64_t index = 2 * (static_cast<std::uint64_t>(g.k) * 4096 + g.lp);
        RandomStream ch = tree.stream(Purpose::test, index), nz = tree.stream(Purpose::test, index + 1);
        return test_cache_
            .emplace(key, make_sample_set(cfg_.test_distribution(g.lp), cfg_.array(), g.k, cfg_.l, cfg_.test_size,
                                          cfg_.sigma2, ch, nz))
            .first->second;
    }

    const PilotMatrix& baseline_pilots() {
        if (!pilots_) {
            RandomStream rng = root_.child(0xb1).stream(Purpose::init);
            pilots_ = PilotMatrix::random_gaussian(cfg_.m, cfg_.l, cfg_.power(), rng);
        }
        return *pilots_;
    }

    const std::vector<OmpChannelEstimate>& omp_estimates(const GridPoint& g) {
        const auto key = std::make_pair(g.k, g.lp);
        if (auto it = omp_cache_.find(key); it != omp_cache_.end()) return it->second;
        if (!dict_) dict_ = build_dictionary(cfg_.array(), cfg_.omp_grid);
        const PilotMatrix& pilots = baseline_pilots();
        const CMatrix projected = dict_->project(pilots);
        const SampleSet& set = test_set(g);
        const std::size_t lp = cfg_.effective_baseline_lp(g.lp);
        std::vector<OmpChannelEstimate> est;
        est.reserve(set.size() * set.users());
        for (std::size_t s = 0; s < set.size(); ++s)
            for (std::size_t u = 0; u < set.users(); ++u)
                est.push_back(estimate_channel_omp(set.received(s, u, pilots), pilots, *dict_, lp, &projected));
        return omp_cache_.emplace(key, std::move(est)).first->second;
    }

    const ChannelParamCodec& codec(std::size_t b, std::size_t test_lp) {
        const std::size_t lp = cfg_.effective_baseline_lp(test_lp);
        const auto key = std::make_pair(b, std::make_pair(lp, test_lp));
        if (auto it = codec_cache_.find(key); it != codec_cache_.end()) return it->second;
        note("fit parameter quantizers B=" + std::to_string(b) + " Lp=" + std::to_string(lp));
        const std::uint64_t seed = root_.child(0xc0de).leaf_seed(Purpose::init, b * 64 + lp);
        return codec_cache_
            .emplace(key, ChannelParamCodec(cfg_.test_distribution(test_lp), cfg_.array(), b, lp, seed,
                                            cfg_.quantizer_training_samples))
            .first->second;
    }

    PrecoderPipeline pipeline(const std::string& method, const GridPoint& g, std::size_t b);
    void train_models(const std::string& method, std::size_t k, std::size_t b);

    const ExperimentConfig& cfg_;
    RunMode mode_;
    ProgressSink progress_;
    SeedTree root_;
    PresetWidths widths_;
    TrainingSchedule schedule_;
    std::filesystem::path out_, ckdir_;
    std::vector<std::string> checkpoints_;
    std::map<std::string, E2EModel<float>> e2e_cache_;
    std::map<std::string, ChannelEstimatorModel<float>> est_cache_;
    std::map<std::pair<std::size_t, std::size_t>, SampleSet> test_cache_;
    std::map<std::pair<std::size_t, std::size_t>, std::vector<OmpChannelEstimate>> omp_cache_;
    std::map<std::pair<std::size_t, std::pair<std::size_t, std::size_t>>, ChannelParamCodec> codec_cache_;
    std::optional<PilotMatrix> pilots_;
    std::optional<AngularDictionary> dict_;
};

void Runner::train_models(const std::string& method, std::size_t k, std::size_t b) {
    if (method == "proposed")
        proposed(k, b);
    else if (method == "proposed-two-step-B")
        two_step_b(k, b);
    else if (method == "proposed-two-step-K")
        two_step_k(k, b);
    else if (method.ends_with("dnn-mse"))
        estimator(b);
}

PrecoderPipeline Runner::pipeline(const std::string& method, const GridPoint& g, std::size_t b) {
    const double power = cfg_.power();
    const bool zero_forcing = is_zf(method);
    const std::size_t k = g.k, m = cfg_.m;
    if (method == "proposed" || method == "proposed-two-step-B" || method == "proposed-two-step-K") {
        E2EModel<float>* model = method == "proposed"              ? &proposed(k, b)
                                 : method == "proposed-two-step-B" ? &two_step_b(k, b)
                                                                   : &two_step_k(k, b);
        return [model](const SampleSet& set, std::size_t begin, std::size_t count) {
            return model->precode(set, begin, count);
        };
    }
    if (method.ends_with("-csit")) {
        return [=](const SampleSet& set, std::size_t begin, std::size_t count) {
            std::vector<PrecodingMatrix> out;
            for (std::size_t s = begin; s < begin + count; ++s)
                out.push_back(zero_forcing ? zf(set.channels.h_matrix(s), power) : mrt(set.channels.h_matrix(s), power));
            return out;
        };
    }
    if (method.ends_with("-csir-quantized")) {
        const ChannelParamCodec* c = &codec(b, g.lp);
        return [=](const SampleSet& set, std::size_t begin, std::size_t count) {
            std::vector<PrecodingMatrix> out;
            std::vector<CMatrix> h(k);
            for (std::size_t s = begin; s < begin + count; ++s) {
                for (std::size_t u = 0; u < k; ++u) {
                    const auto& real = set.channels.user(s, u);
                    h[u] = c->feedback_roundtrip(real.gains, real.aods);
                }
                out.push_back(precode_from_estimate(stack_estimates(h, 0, k, m), zero_forcing, power));
            }
            return out;
        };
    }
    if (uses_omp(method)) {
        const auto* est = &omp_estimates(g);
        const ChannelParamCodec* c = uses_param_codec(method) ? &codec(b, g.lp) : nullptr;
        return [=](const SampleSet&, std::size_t begin, std::size_t count) {
            std::vector<PrecodingMatrix> out;
            std::vector<CMatrix> h(k);
            for (std::size_t s = begin; s < begin + count; ++s) {
                for (std::size_t u = 0; u < k; ++u) {
                    const auto& e = (*est)[s * k + u];
                    if (c)
                        h[u] = c->reconstruct_channel(c->quantize_channel_params(c->canonical_params(e.gains, e.aods)));
                    else
                        h[u] = e.h;
                }
                out.push_back(precode_from_estimate(stack_estimates(h, 0, k, m), zero_forcing, power));
            }
            return out;
        };
    }
    if (method.ends_with("-dnn-mse")) {
        ChannelEstimatorModel<float>* model = &estimator(b);
        return [=](const SampleSet& set, std::size_t begin, std::size_t count) {
            const auto h = model->estimate(set, begin, count);
            std::vector<PrecodingMatrix> out;
            for (std::size_t s = 0; s < count; ++s)
                out.push_back(precode_from_estimate(stack_estimates(h, s * k, k, m), zero_forcing, power));
            return out;
        };
    }
    throw std::invalid_argument("unknown method '" + method + "'");
}

RunSummary Runner::run() {
    using clock = std::chrono::steady_clock;
    const auto t_start = clock::now();
    std::vector<std::string> methods = cfg_.methods;
    if (mode_ == RunMode::baseline) {
        methods.erase(std::remove_if(methods.begin(), methods.end(), [](const auto& s) { return !is_training_free(s); }),
                      methods.end());
        if (methods.empty()) throw ConfigError("baseline: config lists no training-free methods", {"methods"});
    }
    if (mode_ == RunMode::train_only) {
        methods.erase(std::remove_if(methods.begin(), methods.end(), [](const auto& s) { return is_training_free(s); }),
                      methods.end());
    }

    std::filesystem::create_directories(out_);
    RunSummary summary;
    json row_meta = json::array();
    for (std::size_t k : cfg_.k_list) {
        for (std::size_t lp : cfg_.test_points()) {
            const GridPoint g{k, lp};
            for (const auto& method : methods) {
                for (std::size_t b : cfg_.b_list) {
                    const auto t0 = clock::now();
                    if (mode_ == RunMode::train_only) {
                        train_models(method, k, b);
                        continue;
                    }
                    const PrecoderPipeline pipe = pipeline(method, g, b);
                    const EvaluationResult r = evaluate(pipe, test_set(g));
                    ResultRow row;
                    row.method = method;
                    row.m = cfg_.m;
                    row.k = k;
                    row.l = cfg_.l;
                    row.b = b;
                    row.lp = lp == 0 ? join(cfg_.lp_train, ';') : std::to_string(lp);
                    row.snr_db = cfg_.snr_db;
                    row.seed = cfg_.seed;
                    row.sum_rate = r.mean_sum_rate;
                    row.sum_rate_se = r.std_error;
                    row.user_rates = r.per_user_mean;
                    row.test_size = r.samples;
                    const double secs = std::chrono::duration<double>(clock::now() - t0).count();
                    note(method + " K=" + std::to_string(k) + " B=" + std::to_string(b) + " Lp=" + row.lp + ": " +
                         fmt(r.mean_sum_rate) + " bits/s/Hz");
                    row_meta.push_back({{"method", method}, {"K", k}, {"B", b}, {"Lp", row.lp}, {"wall_time_s", secs}});
                    summary.rows.push_back(std::move(row));
                }
            }
        }
    }
    if (mode_ != RunMode::train_only) {
        std::ofstream(out_ / "results.csv", std::ios::binary) << to_csv(summary.rows);
    }
    summary.checkpoints = checkpoints_;
    summary.manifest = {{"git_describe", git_describe()},
                        {"config_hash", cfg_.hash()},
                        {"config", cfg_.to_json()},
                        {"schedule", schedule_.to_json()},
                        {"mode", mode_ == RunMode::full         ? "sweep"
                                 : mode_ == RunMode::train_only ? "train"
                                 : mode_ == RunMode::eval_only  ? "eval"
                                                                : "baseline"},
                        {"checkpoints", checkpoints_},
                        {"results", mode_ == RunMode::train_only ? json(nullptr) : json("results.csv")},
                        {"rows", row_meta},
                        {"wall_time_s", std::chrono::duration<double>(clock::now() - t_start).count()}};
    std::ofstream(out_ / "manifest.json") << summary.manifest.dump(2) << '\n';
    return summary;
}

std::vector<std::string> Runner::quantfit() {
    std::vector<std::string> written;
    const auto qdir = out_ / "quantizers";
    std::filesystem::create_directories(qdir);
    for (std::size_t lp : cfg_.test_points()) {
        const std::size_t blp = cfg_.effective_baseline_lp(lp);
        for (std::size_t b : cfg_.b_list) {
            if (b < 3 * blp) {
                note("skip B=" + std::to_string(b) + ": fewer bits than parameters at L_p=" + std::to_string(blp));
                continue;
            }
            const auto path = qdir / ("param_B" + std::to_string(b) + "_Lp" + std::to_string(blp) + "_test" +
                                      (lp == 0 ? std::string("train") : std::to_string(lp)) + ".json");
            std::ofstream(path) << codec(b, lp).to_json().dump(2) << '\n';
            written.push_back(path.string());
        }
    }
    if (std::find(cfg_.methods.begin(), cfg_.methods.end(), "proposed-two-step-B") != cfg_.methods.end()) {
        for (std::size_t k : cfg_.k_list) {
            const std::string soft_hash = sha256_hex(soft_key(k).first.dump());
            if (!cached(soft_hash))
                throw MissingCheckpointError("quantfit: soft encoder for K=" + std::to_string(k) +
                                             " is not trained; run `train` first");
            E2EModel<float>& soft = soft_model(k);
            std::set<unsigned> qs;
            for (std::size_t b : cfg_.b_list) qs.insert(static_cast<unsigned>(b / cfg_.soft_s));
            for (unsigned q : qs) {
                const auto path = qdir / ("soft_K" + std::to_string(k) + "_S" + std::to_string(cfg_.soft_s) + "_Q" +
                                          std::to_string(q) + ".json");
                std::ofstream(path) << soft_quantizer(soft, soft_hash, q).to_json().dump(2) << '\n';
                written.push_back(path.string());
            }
        }
    }
    return written;
}

}  // namespace

RunSummary run_experiment(const ExperimentConfig& cfg, RunMode mode, const ProgressSink& progress) {
    cfg.validate();
    Runner r(cfg, mode, progress);
    return r.run();
}

std::vector<std::string> fit_quantizers(const ExperimentConfig& cfg, const ProgressSink& progress) {
    cfg.validate();
    Runner r(cfg, RunMode::eval_only, progress);
    return r.quantfit();
}

}  // namespace fdd
