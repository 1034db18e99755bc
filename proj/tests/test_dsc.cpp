// SPDX-License-Identifier: Apache-2.0
#include "fdd/dsc.hpp"

#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>

using namespace fdd;

namespace {

ModelConfig tiny_config(std::size_t k = 2, std::size_t b = 4) {
    ModelConfig c;
    c.m = 6;
    c.k = k;
    c.l = 3;
    c.power = 10.0;
    c.sigma2 = 1.0;
    c.encoder.hidden = {8, 6};
    c.encoder.outputs = b;
    c.decoder.hidden = {8, 8};
    return c;
}

SampleSet tiny_set(const ModelConfig& c, std::size_t n, std::uint64_t seed) {
    RandomStream ch(seed), nz(seed + 1000);
    return make_sample_set(ChannelDistribution{}, {c.m, 0.5}, c.k, c.l, n, c.sigma2, ch, nz);
}

// Precoder of one column of a 2MK x N output, through the public unpack helper.
template <typename T>
PrecodingMatrix column_precoder(const nn::Mat<T>& v, Eigen::Index col, std::size_t m, std::size_t k, double p) {
    std::vector<double> buf(static_cast<std::size_t>(v.rows()));
    for (Eigen::Index i = 0; i < v.rows(); ++i) buf[static_cast<std::size_t>(i)] = static_cast<double>(v(i, col));
    return unpack_precoder(buf, m, k, p);
}

double min_margin(const E2EModel<double>& model) {
    double m = model.decoder.min_relu_margin();
    for (const auto& e : model.encoders) m = std::min(m, e.min_relu_margin());
    return m;
}

}  // namespace

TEST_CASE("schedule and config validation") {
    const auto p = TrainingSchedule::paper();
    CHECK(p.batch_size == 1024);
    CHECK(p.batches_per_epoch == 200);
    CHECK(p.patience == 300);
    CHECK(p.validation_size == 10'000);
    CHECK(p.alpha_start == 0.5);
    CHECK(p.alpha_growth == 1.001);
    CHECK(p.alpha_cap == 10.0);
    const auto j = p.to_json();
    CHECK(TrainingSchedule::from_json(j, TrainingSchedule::desk()).to_json() == j);
    CHECK_THROWS(TrainingSchedule::from_json({{"batch_sise", 3}}, p));
    auto bad = p;
    bad.lr_floor = 1.0;
    CHECK_THROWS(bad.validate());

    auto c = tiny_config();
    CHECK(ModelConfig::from_json(c.to_json()).to_json() == c.to_json());
    c.k = c.m;
    CHECK_THROWS(c.validate());
}

TEST_CASE("forward: power, binary feedback, shapes") {
    const auto cfg = tiny_config(3, 5);
    E2EModel<double> model(cfg, 7);
    const auto set = tiny_set(cfg, 40, 1);
    const auto batch = to_tensors(set, 0, 40);
    for (auto mode : {nn::Mode::train, nn::Mode::infer}) {
        const auto out = model.forward(batch, mode);
        REQUIRE(out.v.rows() == 2 * 6 * 3);
        REQUIRE(out.feedback.size() == 3);
        for (const auto& q : out.feedback) {
            REQUIRE(q.rows() == 5);
            for (Eigen::Index i = 0; i < q.size(); ++i) REQUIRE(std::abs(q.data()[i]) == 1.0);
        }
        for (Eigen::Index s = 0; s < 40; ++s)
            REQUIRE(std::abs(column_precoder(out.v, s, 6, 3, 10.0).total_power() - 10.0) < 1e-9);
    }
    CHECK(model.decoder.input_size() == 3 * 5);
    for (const auto& p : model.precode(set, 0, 40)) CHECK(std::abs(p.total_power() - 10.0) < 1e-9);
}

TEST_CASE("pilot initialization and projection after every step") {
    const auto cfg = tiny_config();
    E2EModel<double> model(cfg, 3);
    auto check_cols = [&] {
        const auto p = model.pilot();
        for (std::size_t c = 0; c < cfg.l; ++c) REQUIRE(std::abs(p.x.column(c).frobenius_norm_sq() - cfg.power) < 1e-12);
    };
    check_cols();
    for (int s = 0; s < 10; ++s) {
        model.train_step(tiny_set(cfg, 32, 100 + s), 1e-2);
        check_cols();
    }
}

TEST_CASE("loss: single sample equals the rate oracle; zero decoder weights") {
    const auto cfg = tiny_config();
    E2EModel<double> model(cfg, 11);
    const auto set = tiny_set(cfg, 16, 2);
    const auto batch = to_tensors(set, 0, 16);
    const auto out = model.forward(batch, nn::Mode::infer);

    std::vector<double> per;
    const double mean = batch_sum_rate<double>(out.v, batch, cfg.m, cfg.k, cfg.sigma2, nullptr, &per);
    double acc = 0.0;
    for (std::size_t s = 0; s < 16; ++s) {
        const double want = sum_rate(set.channels.h_matrix(s), column_precoder(out.v, s, cfg.m, cfg.k, cfg.power), cfg.sigma2);
        REQUIRE(std::abs(per[s] - want) < 1e-12);
        acc += want;
    }
    CHECK(std::abs(mean - acc / 16.0) < 1e-12);
    const auto one = to_tensors(set, 3, 1);
    CHECK(std::abs(batch_sum_rate<double>(model.forward(one, nn::Mode::infer).v, one, cfg.m, cfg.k, cfg.sigma2) - per[3]) <
          1e-12);

    // Zero last-layer weights: every sample gets the same direction, sqrt(P) b / ||b||.
    auto& last = model.decoder.layers.back();
    last.w.setZero();
    RandomStream rng(5);
    for (Eigen::Index i = 0; i < last.b.size(); ++i) last.b(i) = rng.normal();
    const auto o2 = model.forward(batch, nn::Mode::infer);
    std::vector<double> bvec(last.b.data(), last.b.data() + last.b.size());
    const auto fixed = normalize_total_power(unpack_precoder(bvec, cfg.m, cfg.k, cfg.power).v, cfg.power);
    double oracle = 0.0;
    for (std::size_t s = 0; s < 16; ++s) oracle += sum_rate(set.channels.h_matrix(s), fixed, cfg.sigma2);
    const double got = batch_sum_rate<double>(o2.v, batch, cfg.m, cfg.k, cfg.sigma2);
    CHECK(std::isfinite(got));
    CHECK(std::abs(got - oracle / 16.0) < 1e-12);
}

TEST_CASE("end-to-end gradient: surrogate-smoothed pipeline matches finite differences") {
    RandomStream rng(13);
    double worst = 0.0;
    int instances = 0;
    for (int t = 0; instances < 100 && t < 400; ++t) {
        auto cfg = tiny_config(2, 3);
        cfg.m = 4;
        cfg.l = 2;
        cfg.encoder.hidden = {6, 5};
        cfg.decoder.hidden = {6, 6};
        E2EModel<double> model(cfg, 1000 + static_cast<std::uint64_t>(t));
        model.smooth_sign = true;
        model.alpha = rng.uniform(0.5, 3.0);
        const auto set = tiny_set(cfg, 8, 500 + static_cast<std::uint64_t>(t));
        const auto batch = to_tensors(set, 0, 8);

        model.zero_grad();
        const auto out = model.forward(batch, nn::Mode::train);
        if (min_margin(model) < 1e-3) continue;  // too close to a ReLU kink for central differences
        model.backward(batch, out);

        std::vector<nn::ParamRef<double>> params = model.network_params();
        for (const auto& p : model.pilot_params()) params.push_back(p);
        const auto loss = [&] {
            const auto o = model.forward(batch, nn::Mode::train);
            return -batch_sum_rate<double>(o.v, batch, cfg.m, cfg.k, cfg.sigma2);
        };
        const auto rep = nn::grad_check(loss, params);
        worst = std::max(worst, rep.max_rel_error);
        ++instances;
    }
    CHECK(instances == 100);
    CHECK(worst < 1e-4);
}

TEST_CASE("distributedness: a user's bits ignore every other user's channel") {
    const auto cfg = tiny_config(3, 6);
    E2EModel<double> model(cfg, 17);
    for (int s = 0; s < 3; ++s) model.train_step(tiny_set(cfg, 32, 200 + s), 1e-2);
    const auto set = tiny_set(cfg, 64, 3);
    const auto batch = to_tensors(set, 0, 64);
    const auto base = model.forward(batch, nn::Mode::infer);
    RandomStream rng(4);
    for (int trial = 0; trial < 50; ++trial) {
        auto perturbed = batch;
        const std::size_t k = rng.uniform_index(3);
        for (std::size_t j = 0; j < 3; ++j) {
            if (j == k) continue;
            for (Eigen::Index i = 0; i < perturbed.hr[j].size(); ++i) {
                perturbed.hr[j].data()[i] = rng.normal();
                perturbed.hi[j].data()[i] = rng.normal();
            }
            for (Eigen::Index i = 0; i < perturbed.z[j].size(); ++i) perturbed.z[j].data()[i] = rng.normal();
        }
        const auto out = model.forward(perturbed, nn::Mode::infer);
        const auto& a = base.feedback[k];
        const auto& b = out.feedback[k];
        REQUIRE(std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<std::size_t>(a.size())) == 0);
        const auto own = model.encode_user(k, batch.hr[k], batch.hi[k], batch.z[k], nn::Mode::infer);
        REQUIRE(std::memcmp(a.data(), own.data(), sizeof(double) * static_cast<std::size_t>(a.size())) == 0);
    }
}

namespace {

// Scripted model: validation scores come from a list; snapshots record the epoch they were taken at.
class ScriptedModel : public Trainable {
  public:
    explicit ScriptedModel(std::vector<double> scores, double loss = -1.0) : scores_(std::move(scores)), loss_(loss) {}
    std::size_t batch_users() const override { return 1; }
    std::size_t pilot_length() const override { return 2; }
    double noise_variance() const override { return 1.0; }
    void set_annealing(double a) override { alphas.push_back(a); }
    double train_step(const SampleSet&, double lr) override {
        lrs.push_back(lr);
        return loss_;
    }
    double validate(const SampleSet&) override {
        const double s = calls_ < scores_.size() ? scores_[calls_] : scores_.back();
        state_ = static_cast<double>(calls_++);
        return s;
    }
    nn::TensorSet snapshot() const override {
        nn::TensorSet t;
        t.add(nn::Tensor::from<double>("state", {1}, &state_, 1));
        return t;
    }
    void restore(const nn::TensorSet& set) override { set.at("state").to<double>(&restored, 1); }

    std::vector<double> alphas, lrs;
    double restored = -1.0;

  private:
    std::vector<double> scores_;
    double loss_;
    std::size_t calls_ = 0;
    double state_ = 0.0;
};

TrainingSchedule quick_schedule() {
    TrainingSchedule s;
    s.batch_size = 2;
    s.batches_per_epoch = 1;
    s.validation_size = 2;
    s.patience = 4;
    s.lr_decay_patience = 2;
    s.lr_decay = 0.5;
    s.lr_start = 1e-3;
    s.lr_floor = 3e-4;
    s.alpha_start = 0.5;
    s.alpha_growth = 2.0;
    s.alpha_cap = 3.0;
    return s;
}

}  // namespace

TEST_CASE("train loop: best restore, patience, lr decay, annealing") {
    ScriptedModel m({1.0, 2.0, 5.0, 4.0, 4.5, 3.0, 4.9, 1.0});
    const auto h = train(m, quick_schedule(), ChannelDistribution{}, {4, 0.5}, SeedTree(1));
    CHECK(h.best_epoch == 2);
    CHECK(h.best_validation == 5.0);
    CHECK(m.restored == 2.0);
    REQUIRE(h.epochs.size() == 7);  // epoch 0, then 6 epochs ending 4 after the best
    CHECK(h.epochs.back().epoch == 6);
    CHECK(h.epochs[0].best);
    CHECK(h.epochs[2].best);
    CHECK(!h.epochs[3].best);
    // lr: two epochs without improvement halve it once, floored at 3e-4.
    CHECK(m.lrs == std::vector<double>{1e-3, 1e-3, 1e-3, 1e-3, 5e-4, 5e-4});
    for (std::size_t i = 1; i < m.alphas.size(); ++i) CHECK(m.alphas[i] >= m.alphas[i - 1]);
    CHECK(m.alphas.back() == 3.0);

    const auto j = h.to_json();
    CHECK(j.at("epochs").size() == 7);
}

TEST_CASE("train loop: max epochs, floor and the initial model is never lost") {
    auto s = quick_schedule();
    s.max_epochs = 3;
    ScriptedModel m({10.0, 1.0, 2.0, 3.0, 4.0});
    const auto h = train(m, s, ChannelDistribution{}, {4, 0.5}, SeedTree(2));
    CHECK(h.epochs.size() == 4);
    CHECK(h.best_epoch == 0);
    CHECK(m.restored == 0.0);
    CHECK(h.best_validation >= h.epochs[0].validation);
}

TEST_CASE("train loop: non-finite loss raises TrainingDiverged") {
    ScriptedModel m({1.0}, std::numeric_limits<double>::quiet_NaN());
    CHECK_THROWS_AS(train(m, quick_schedule(), ChannelDistribution{}, {4, 0.5}, SeedTree(3)), TrainingDiverged);
    ScriptedModel bad({std::numeric_limits<double>::infinity()});
    CHECK_THROWS_AS(train(bad, quick_schedule(), ChannelDistribution{}, {4, 0.5}, SeedTree(3)), TrainingDiverged);
}

TEST_CASE("evaluate: closed-form ZF, order invariance, repeatability") {
    const auto cfg = tiny_config();
    const auto set = tiny_set(cfg, 500, 9);
    const PrecoderPipeline zf_csit = [&](const SampleSet& s, std::size_t b, std::size_t n) {
        std::vector<PrecodingMatrix> out;
        for (std::size_t i = b; i < b + n; ++i) out.push_back(zf(s.channels.h_matrix(i), cfg.power));
        return out;
    };
    const auto r = evaluate(zf_csit, set, 64);
    double closed = 0.0;
    for (std::size_t i = 0; i < set.size(); ++i) {
        const CMatrix h = set.channels.h_matrix(i);
        const auto v = zf(h, cfg.power);
        for (std::size_t k = 0; k < cfg.k; ++k) closed += std::log2(1.0 + std::norm(cgemm(h.row(k).conj_transpose(), v.v.column(k), true)(0, 0)) / cfg.sigma2);
    }
    CHECK(std::abs(r.mean_sum_rate - closed / 500.0) < 1e-9);
    CHECK(r.per_user_mean.size() == cfg.k);
    CHECK(r.per_user_mean[0] + r.per_user_mean[1] == doctest::Approx(r.mean_sum_rate).epsilon(1e-12));
    CHECK(r.std_error > 0.0);

    SampleSet reversed = set;
    std::reverse(reversed.channels.users.begin(), reversed.channels.users.end());
    CHECK(evaluate(zf_csit, reversed).mean_sum_rate == doctest::Approx(r.mean_sum_rate).epsilon(1e-12));

    E2EModel<float> model(cfg, 5);
    const PrecoderPipeline learned = [&](const SampleSet& s, std::size_t b, std::size_t n) { return model.precode(s, b, n); };
    const auto a1 = evaluate(learned, set), a2 = evaluate(learned, set);
    CHECK(a1.mean_sum_rate == a2.mean_sum_rate);
}

TEST_CASE("checkpoint: save, load, evaluate bit-identically; hash mismatch rejected") {
    const auto cfg = tiny_config();
    E2EModel<float> model(cfg, 21);
    for (int s = 0; s < 5; ++s) model.train_step(tiny_set(cfg, 64, 300 + s), 1e-2);
    model.alpha = 1.7;
    const auto dir = std::filesystem::temp_directory_path() / "fdd_dsc_ckpt";
    std::filesystem::create_directories(dir);
    save_model(dir / "m", model, {{"tag", "x"}});
    nlohmann::json extra;
    auto back = load_e2e_model<float>(dir / "m", &extra);
    CHECK(extra.at("tag") == "x");
    CHECK(back.alpha == 1.7);
    CHECK(back.snapshot() == model.snapshot());
    CHECK(back.config_hash() == model.config_hash());

    const auto test = tiny_set(cfg, 300, 77);
    const PrecoderPipeline a = [&](const SampleSet& s, std::size_t b, std::size_t n) { return model.precode(s, b, n); };
    const PrecoderPipeline b = [&](const SampleSet& s, std::size_t b0, std::size_t n) { return back.precode(s, b0, n); };
    const double ra = evaluate(a, test).mean_sum_rate, rb = evaluate(b, test).mean_sum_rate;
    CHECK(std::memcmp(&ra, &rb, sizeof(double)) == 0);

    CHECK_THROWS(load_estimator_model<float>(dir / "m"));
    std::filesystem::remove_all(dir);
}

TEST_CASE("training is deterministic and improves at desk scale") {
    ModelConfig cfg;
    cfg.m = 16;
    cfg.k = 2;
    cfg.l = 8;
    cfg.power = 10.0;
    cfg.encoder.hidden = {256, 128, 64};
    cfg.encoder.outputs = 10;
    cfg.decoder.hidden = {256, 128, 128};
    auto s = TrainingSchedule::desk();
    s.max_epochs = 50;
    s.validation_size = 2000;
    const ArrayConfig array{16, 0.5};

    E2EModel<float> model(cfg, 99);
    const auto h = train(model, s, ChannelDistribution{}, array, SeedTree(5));
    CHECK(h.best_validation > 1.2 * h.epochs[0].validation);
    CHECK(h.best_validation >= h.epochs[0].validation);
    for (std::size_t i = 1; i < h.epochs.size(); ++i) {
        CHECK(h.epochs[i].alpha >= h.epochs[i - 1].alpha);
        CHECK(h.epochs[i].lr <= h.epochs[i - 1].lr);
    }

    auto short_s = s;
    short_s.max_epochs = 3;
    short_s.batches_per_epoch = 5;
    E2EModel<float> a(cfg, 7), b(cfg, 7);
    const auto ha = train(a, short_s, ChannelDistribution{}, array, SeedTree(6));
    const auto hb = train(b, short_s, ChannelDistribution{}, array, SeedTree(6));
    CHECK(ha.to_json().dump() == hb.to_json().dump());
    CHECK(a.snapshot() == b.snapshot());
}

TEST_CASE("channel estimator: beats the zero estimate, more bits help, feeds ZF") {
    ModelConfig cfg;
    cfg.m = 16;
    cfg.k = 2;
    cfg.l = 8;
    cfg.power = 10.0;
    cfg.encoder.hidden = {128, 64};
    cfg.decoder.hidden = {128, 128};
    auto s = TrainingSchedule::desk();
    s.max_epochs = 25;
    s.batches_per_epoch = 30;
    s.validation_size = 2000;
    const ArrayConfig array{16, 0.5};
    RandomStream ch(1), nz(2);
    const auto eval_set = make_sample_set(ChannelDistribution{}, array, 2, 8, 2000, 1.0, ch, nz);
    double mse_small = 0.0, mse_large = 0.0;
    for (std::size_t b : {5u, 50u}) {
        auto c = cfg;
        c.encoder.outputs = b;
        ChannelEstimatorModel<float> est(c, 3);
        train(est, s, ChannelDistribution{}, array, SeedTree(8));
        const double mse = est.mse(eval_set);
        CHECK(mse < 16.0);
        (b == 5 ? mse_small : mse_large) = mse;
        if (b == 50) {
            const auto h = est.estimate(eval_set, 0, 4);
            REQUIRE(h.size() == 8);
            CMatrix hh(2, 16);
            for (std::size_t u = 0; u < 2; ++u)
                for (std::size_t m = 0; m < 16; ++m) hh.set(u, m, std::conj(h[u](m, 0)));
            CHECK(std::abs(zf(hh, 10.0).total_power() - 10.0) < 1e-9);
        }
    }
    CHECK(mse_large < mse_small);
}
