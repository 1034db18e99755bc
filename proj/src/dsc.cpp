// SPDX-License-Identifier: Apache-2.0
#include "fdd/dsc.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <type_traits>

namespace fdd {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Configuration

TrainingSchedule TrainingSchedule::paper() { return {}; }

TrainingSchedule TrainingSchedule::desk() {
    TrainingSchedule s;
    s.batches_per_epoch = 50;
    s.patience = 50;
    s.lr_decay_patience = 20;
    s.max_epochs = 400;
    return s;
}

void TrainingSchedule::validate() const {
    if (batch_size < 2) throw std::invalid_argument("TrainingSchedule: batch_size must be >= 2");
    if (batches_per_epoch < 1) throw std::invalid_argument("TrainingSchedule: batches_per_epoch must be >= 1");
    if (patience < 1) throw std::invalid_argument("TrainingSchedule: patience must be >= 1");
    if (validation_size < 1) throw std::invalid_argument("TrainingSchedule: validation_size must be >= 1");
    if (!(lr_start > 0.0) || !(lr_floor > 0.0) || lr_floor > lr_start)
        throw std::invalid_argument("TrainingSchedule: need 0 < lr_floor <= lr_start");
    if (!(lr_decay > 0.0) || lr_decay > 1.0) throw std::invalid_argument("TrainingSchedule: lr_decay must be in (0, 1]");
    if (lr_decay_patience < 1) throw std::invalid_argument("TrainingSchedule: lr_decay_patience must be >= 1");
    if (!(alpha_start > 0.0) || alpha_growth < 1.0 || alpha_cap < alpha_start)
        throw std::invalid_argument("TrainingSchedule: need alpha_start > 0, alpha_growth >= 1, alpha_cap >= alpha_start");
}

json TrainingSchedule::to_json() const {
    return {{"batch_size", batch_size},     {"batches_per_epoch", batches_per_epoch},
            {"patience", patience},         {"validation_size", validation_size},
            {"max_epochs", max_epochs},     {"lr_start", lr_start},
            {"lr_floor", lr_floor},         {"lr_decay", lr_decay},
            {"lr_decay_patience", lr_decay_patience},
            {"alpha_start", alpha_start},   {"alpha_growth", alpha_growth},
            {"alpha_cap", alpha_cap}};
}

TrainingSchedule TrainingSchedule::from_json(const json& j, TrainingSchedule s) {
    static const std::vector<std::string> known{"batch_size", "batches_per_epoch", "patience", "validation_size",
                                                "max_epochs", "lr_start", "lr_floor", "lr_decay",
                                                "lr_decay_patience", "alpha_start", "alpha_growth", "alpha_cap"};
    for (const auto& [key, _] : j.items())
        if (std::find(known.begin(), known.end(), key) == known.end())
            throw std::invalid_argument("schedule: unknown field '" + key + "'");
    auto take = [&](const char* key, auto& field) {
        if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    take("batch_size", s.batch_size);
    take("batches_per_epoch", s.batches_per_epoch);
    take("patience", s.patience);
    take("validation_size", s.validation_size);
    take("max_epochs", s.max_epochs);
    take("lr_start", s.lr_start);
    take("lr_floor", s.lr_floor);
    take("lr_decay", s.lr_decay);
    take("lr_decay_patience", s.lr_decay_patience);
    take("alpha_start", s.alpha_start);
    take("alpha_growth", s.alpha_growth);
    take("alpha_cap", s.alpha_cap);
    return s;
}

void ModelConfig::validate() const {
    if (m < 1 || k < 1 || l < 1) throw std::invalid_argument("ModelConfig: M, K and L must be >= 1");
    if (k >= m) throw std::invalid_argument("ModelConfig: K must be smaller than M");
    if (encoder.outputs < 1) throw std::invalid_argument("ModelConfig: encoder needs at least one output");
    if (!(power > 0.0) || !(sigma2 > 0.0)) throw std::invalid_argument("ModelConfig: power and sigma2 must be positive");
    for (auto w : encoder.hidden)
        if (w < 1) throw std::invalid_argument("ModelConfig: zero-width encoder layer");
    for (auto w : decoder.hidden)
        if (w < 1) throw std::invalid_argument("ModelConfig: zero-width decoder layer");
}

json ModelConfig::to_json() const {
    return {{"M", m},
            {"K", k},
            {"L", l},
            {"power", power},
            {"sigma2", sigma2},
            {"encoder",
             {{"hidden", encoder.hidden},
              {"outputs", encoder.outputs},
              {"kind", encoder.kind == FeedbackKind::hard_sign ? "hard_sign" : "soft_tanh"}}},
            {"decoder", {{"hidden", decoder.hidden}}},
            {"shared_encoder", shared_encoder}};
}

ModelConfig ModelConfig::from_json(const json& j) {
    ModelConfig c;
    c.m = j.at("M").get<std::size_t>();
    c.k = j.at("K").get<std::size_t>();
    c.l = j.at("L").get<std::size_t>();
    c.power = j.at("power").get<double>();
    c.sigma2 = j.at("sigma2").get<double>();
    c.encoder.hidden = j.at("encoder").at("hidden").get<std::vector<std::size_t>>();
    c.encoder.outputs = j.at("encoder").at("outputs").get<std::size_t>();
    const auto kind = j.at("encoder").at("kind").get<std::string>();
    if (kind == "hard_sign")
        c.encoder.kind = FeedbackKind::hard_sign;
    else if (kind == "soft_tanh")
        c.encoder.kind = FeedbackKind::soft_tanh;
    else
        throw std::invalid_argument("ModelConfig: unknown encoder kind '" + kind + "'");
    c.decoder.hidden = j.at("decoder").at("hidden").get<std::vector<std::size_t>>();
    c.shared_encoder = j.at("shared_encoder").get<bool>();
    c.validate();
    return c;
}

// ---------------------------------------------------------------------------
// Samples

ReceivedPilots SampleSet::received(std::size_t sample, std::size_t user, const PilotMatrix& pilots) const {
    CMatrix y = cgemm(channels.user(sample, user).h, pilots.x, true);
    for (std::size_t i = 0; i < l; ++i) {
        const cdouble z = noise_at(sample, user, i);
        y.re(0, i) += z.real();
        y.im(0, i) += z.imag();
    }
    return ReceivedPilots::from_complex(std::move(y));
}

SampleSet make_sample_set(const ChannelDistribution& dist, const ArrayConfig& cfg, std::size_t k_users, std::size_t l,
                          std::size_t n, double sigma2, RandomStream& channel_rng, RandomStream& noise_rng) {
    SampleSet s;
    s.channels = generate_batch(dist, cfg, k_users, n, channel_rng);
    s.l = l;
    s.sigma2 = sigma2;
    s.noise.resize(n * k_users * l);
    for (auto& z : s.noise) z = noise_rng.complex_normal(sigma2);
    return s;
}

BatchTensors to_tensors(const SampleSet& set, std::size_t begin, std::size_t count) {
    if (begin + count > set.size()) throw std::out_of_range("to_tensors: slice exceeds sample set");
    const std::size_t k = set.users(), m = set.channels.m, l = set.l;
    BatchTensors b;
    b.n = count;
    b.hr.assign(k, Eigen::MatrixXd(m, count));
    b.hi.assign(k, Eigen::MatrixXd(m, count));
    b.z.assign(k, Eigen::MatrixXd(2 * l, count));
    for (std::size_t s = 0; s < count; ++s)
        for (std::size_t u = 0; u < k; ++u) {
            const CMatrix& h = set.channels.user(begin + s, u).h;
            for (std::size_t i = 0; i < m; ++i) {
                b.hr[u](i, s) = h.re(i, 0);
                b.hi[u](i, s) = h.im(i, 0);
            }
            for (std::size_t i = 0; i < l; ++i) {
                const cdouble z = set.noise_at(begin + s, u, i);
                b.z[u](i, s) = z.real();
                b.z[u](l + i, s) = z.imag();
            }
        }
    return b;
}

// ---------------------------------------------------------------------------
// Sum-rate objective

template <typename T>
double batch_sum_rate(const nn::Mat<T>& v, const BatchTensors& batch, std::size_t m, std::size_t k, double sigma2,
                      nn::Mat<T>* grad, std::vector<double>* per_sample) {
    const std::size_t n = batch.n;
    if (static_cast<std::size_t>(v.rows()) != 2 * m * k || static_cast<std::size_t>(v.cols()) != n)
        throw ShapeError("batch_sum_rate: precoder batch has the wrong shape");
    if (batch.hr.size() != k) throw ShapeError("batch_sum_rate: user count mismatch");
    if (grad) grad->setZero(v.rows(), v.cols());
    if (per_sample) per_sample->assign(n, 0.0);

    const std::size_t mk = m * k;
    const double inv_ln2 = 1.0 / std::numbers::ln2;
    std::vector<double> are(k * k), aim(k * k), g(k * k);
    double total = 0.0;
    for (std::size_t s = 0; s < n; ++s) {
        const T* col = v.data() + s * v.rows();
        // A(u, j) = h_u^H v_j
        for (std::size_t u = 0; u < k; ++u) {
            const double* hr = batch.hr[u].data() + s * m;
            const double* hi = batch.hi[u].data() + s * m;
            for (std::size_t j = 0; j < k; ++j) {
                double re = 0.0, im = 0.0;
                for (std::size_t i = 0; i < m; ++i) {
                    const double vr = static_cast<double>(col[j * m + i]);
                    const double vi = static_cast<double>(col[mk + j * m + i]);
                    re += hr[i] * vr + hi[i] * vi;
                    im += hr[i] * vi - hi[i] * vr;
                }
                are[u * k + j] = re;
                aim[u * k + j] = im;
            }
        }
        double rate = 0.0;
        for (std::size_t u = 0; u < k; ++u) {
            double t = sigma2;
            for (std::size_t j = 0; j < k; ++j) t += are[u * k + j] * are[u * k + j] + aim[u * k + j] * aim[u * k + j];
            const double sig = are[u * k + u] * are[u * k + u] + aim[u * k + u] * aim[u * k + u];
            const double interference = t - sig;
            rate += std::log2(t) - std::log2(interference);
            for (std::size_t j = 0; j < k; ++j) g[u * k + j] = inv_ln2 * (1.0 / t - (j == u ? 0.0 : 1.0 / interference));
        }
        total += rate;
        if (per_sample) (*per_sample)[s] = rate;
        if (grad) {
            T* gc = grad->data() + s * v.rows();
            const double scale = -2.0 / static_cast<double>(n);
            for (std::size_t u = 0; u < k; ++u) {
                const double* hr = batch.hr[u].data() + s * m;
                const double* hi = batch.hi[u].data() + s * m;
                for (std::size_t j = 0; j < k; ++j) {
                    const double w = scale * g[u * k + j];
                    const double ar = are[u * k + j], ai = aim[u * k + j];
                    for (std::size_t i = 0; i < m; ++i) {
                        gc[j * m + i] += static_cast<T>(w * (ar * hr[i] - ai * hi[i]));
                        gc[mk + j * m + i] += static_cast<T>(w * (ar * hi[i] + ai * hr[i]));
                    }
                }
            }
        }
    }
    return total / static_cast<double>(n);
}

PrecodingMatrix unpack_precoder(std::span<const double> v, std::size_t m, std::size_t k, double power) {
    if (v.size() != 2 * m * k) throw ShapeError("unpack_precoder: expected 2MK values");
    PrecodingMatrix p{CMatrix(m, k), power};
    for (std::size_t j = 0; j < k; ++j)
        for (std::size_t i = 0; i < m; ++i) {
            p.v.re(i, j) = v[j * m + i];
            p.v.im(i, j) = v[m * k + j * m + i];
        }
    return p;
}

namespace {

template <typename T>
std::vector<PrecodingMatrix> unpack_batch(const nn::Mat<T>& v, std::size_t m, std::size_t k, double power) {
    std::vector<PrecodingMatrix> out;
    out.reserve(static_cast<std::size_t>(v.cols()));
    std::vector<double> col(static_cast<std::size_t>(v.rows()));
    for (Eigen::Index s = 0; s < v.cols(); ++s) {
        for (Eigen::Index r = 0; r < v.rows(); ++r) col[static_cast<std::size_t>(r)] = static_cast<double>(v(r, s));
        out.push_back(unpack_precoder(col, m, k, power));
    }
    return out;
}

void project_columns(Eigen::MatrixXd& re, Eigen::MatrixXd& im, double power) {
    for (Eigen::Index c = 0; c < re.cols(); ++c) {
        const double n2 = re.col(c).squaredNorm() + im.col(c).squaredNorm();
        if (!(n2 > 0.0)) throw DegenerateInputError("pilot projection: zero pilot column");
        const double s = std::sqrt(power / n2);
        re.col(c) *= s;
        im.col(c) *= s;
    }
}

void init_pilot_planes(Eigen::MatrixXd& re, Eigen::MatrixXd& im, std::size_t m, std::size_t l, double power,
                       RandomStream& rng) {
    const PilotMatrix p = PilotMatrix::random_gaussian(m, l, power, rng);
    re.resize(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(l));
    im.resize(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(l));
    for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < l; ++c) {
            re(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = p.x.re(r, c);
            im(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = p.x.im(r, c);
        }
}

PilotMatrix planes_to_pilot(const Eigen::MatrixXd& re, const Eigen::MatrixXd& im, double power) {
    const auto m = static_cast<std::size_t>(re.rows()), l = static_cast<std::size_t>(re.cols());
    PilotMatrix p{CMatrix(m, l), power};
    for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < l; ++c) {
            p.x.re(r, c) = re(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
            p.x.im(r, c) = im(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
        }
    return p;
}

// y = h^H X + z as [Re; Im] columns.
Eigen::MatrixXd observe(const Eigen::MatrixXd& xr, const Eigen::MatrixXd& xi, const Eigen::MatrixXd& hr,
                        const Eigen::MatrixXd& hi, const Eigen::MatrixXd& z) {
    const Eigen::Index l = xr.cols();
    Eigen::MatrixXd y(2 * l, hr.cols());
    y.topRows(l).noalias() = xr.transpose() * hr + xi.transpose() * hi;
    y.bottomRows(l).noalias() = xi.transpose() * hr - xr.transpose() * hi;
    y += z;
    return y;
}

// Accumulates d loss / d X from d loss / d y.
void observe_backward(const Eigen::MatrixXd& hr, const Eigen::MatrixXd& hi, const Eigen::MatrixXd& gy,
                      Eigen::MatrixXd& dxr, Eigen::MatrixXd& dxi) {
    const Eigen::Index l = dxr.cols();
    const auto gyr = gy.topRows(l);
    const auto gyi = gy.bottomRows(l);
    dxr.noalias() += hr * gyr.transpose() - hi * gyi.transpose();
    dxi.noalias() += hi * gyr.transpose() + hr * gyi.transpose();
}

std::vector<std::size_t> layer_sizes(std::size_t in, const std::vector<std::size_t>& hidden, std::size_t out) {
    std::vector<std::size_t> s{in};
    s.insert(s.end(), hidden.begin(), hidden.end());
    s.push_back(out);
    return s;
}

void put_pilot(nn::TensorSet& set, const Eigen::MatrixXd& re, const Eigen::MatrixXd& im) {
    const std::vector<std::size_t> shape{static_cast<std::size_t>(re.rows()), static_cast<std::size_t>(re.cols())};
    set.add(nn::Tensor::from<double>("pilot/re", shape, re.data(), static_cast<std::size_t>(re.size())));
    set.add(nn::Tensor::from<double>("pilot/im", shape, im.data(), static_cast<std::size_t>(im.size())));
}

void get_pilot(const nn::TensorSet& set, Eigen::MatrixXd& re, Eigen::MatrixXd& im) {
    const auto& t = set.at("pilot/re");
    if (t.shape.size() != 2 || t.shape[0] != static_cast<std::size_t>(re.rows()) ||
        t.shape[1] != static_cast<std::size_t>(re.cols()))
        throw ShapeError("checkpoint pilot shape does not match the model");
    t.to<double>(re.data(), static_cast<std::size_t>(re.size()));
    set.at("pilot/im").to<double>(im.data(), static_cast<std::size_t>(im.size()));
}

template <typename T>
nn::Mat<T> to_net(const Eigen::MatrixXd& y) {
    if constexpr (std::is_same_v<T, double>)
        return y;
    else
        return y.cast<T>();
}

template <typename T>
Eigen::MatrixXd from_net(const nn::Mat<T>& y) {
    if constexpr (std::is_same_v<T, double>)
        return y;
    else
        return y.template cast<double>();
}

}  // namespace

// ---------------------------------------------------------------------------
// E2EModel

template <typename T>
E2EModel<T>::E2EModel(ModelConfig cfg, std::uint64_t init_seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    RandomStream rng(init_seed);
    init_pilot_planes(pilot_re, pilot_im, cfg_.m, cfg_.l, cfg_.power, rng);
    const std::size_t groups = cfg_.shared_encoder ? 1 : cfg_.k;
    for (std::size_t g = 0; g < groups; ++g) {
        encoders.emplace_back(layer_sizes(2 * cfg_.l, cfg_.encoder.hidden, cfg_.encoder.outputs));
        encoders.back().init(rng);
    }
    decoder = nn::Mlp<T>(layer_sizes(cfg_.k * cfg_.encoder.outputs, cfg_.decoder.hidden, 2 * cfg_.m * cfg_.k));
    decoder.init(rng);
    dpilot_re_ = Eigen::MatrixXd::Zero(pilot_re.rows(), pilot_re.cols());
    dpilot_im_ = Eigen::MatrixXd::Zero(pilot_re.rows(), pilot_re.cols());
}

template <typename T>
E2EModel<T> E2EModel<T>::with_shared_encoder(const E2EModel& single, std::size_t k_users, DecoderSpec decoder_spec,
                                             std::uint64_t init_seed) {
    if (single.encoders.size() != 1)
        throw std::invalid_argument("with_shared_encoder: source model must have exactly one encoder");
    ModelConfig cfg = single.cfg_;
    cfg.k = k_users;
    cfg.shared_encoder = true;
    cfg.decoder = decoder_spec;
    E2EModel out(cfg, init_seed);
    out.pilot_re = single.pilot_re;
    out.pilot_im = single.pilot_im;
    out.encoders = single.encoders;
    out.feedback_quantizer = single.feedback_quantizer;
    out.freeze_users = true;
    out.alpha = single.alpha;
    return out;
}

template <typename T>
std::string E2EModel<T>::config_hash() const {
    return sha256_hex(cfg_.to_json().dump());
}

template <typename T>
PilotMatrix E2EModel<T>::pilot() const {
    return planes_to_pilot(pilot_re, pilot_im, cfg_.power);
}

template <typename T>
void E2EModel<T>::set_pilot(const PilotMatrix& p) {
    if (p.x.rows() != cfg_.m || p.x.cols() != cfg_.l) throw ShapeError("E2EModel::set_pilot: expected M x L");
    for (std::size_t r = 0; r < cfg_.m; ++r)
        for (std::size_t c = 0; c < cfg_.l; ++c) {
            pilot_re(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = p.x.re(r, c);
            pilot_im(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = p.x.im(r, c);
        }
}

template <typename T>
void E2EModel<T>::project_pilot() {
    project_columns(pilot_re, pilot_im, cfg_.power);
}

template <typename T>
void E2EModel<T>::reset_decoder(DecoderSpec spec, std::uint64_t init_seed) {
    cfg_.decoder = std::move(spec);
    cfg_.validate();
    RandomStream rng(init_seed);
    decoder = nn::Mlp<T>(layer_sizes(cfg_.k * cfg_.encoder.outputs, cfg_.decoder.hidden, 2 * cfg_.m * cfg_.k));
    decoder.init(rng);
    net_opt_ = nn::Adam<T>();
    pilot_opt_ = nn::Adam<double>();
}

template <typename T>
Eigen::MatrixXd E2EModel<T>::pilot_observation(const Eigen::MatrixXd& hr, const Eigen::MatrixXd& hi,
                                               const Eigen::MatrixXd& z) const {
    return observe(pilot_re, pilot_im, hr, hi, z);
}

template <typename T>
nn::Mat<T> E2EModel<T>::activate(const nn::Mat<T>& pre) const {
    if (cfg_.encoder.kind == FeedbackKind::soft_tanh) return nn::tanh_forward(pre);
    return smooth_sign ? nn::sign_surrogate_forward(pre, alpha) : nn::sign_forward(pre);
}

template <typename T>
nn::Mat<T> E2EModel<T>::encode_user(std::size_t u, const Eigen::MatrixXd& hr, const Eigen::MatrixXd& hi,
                                    const Eigen::MatrixXd& z, nn::Mode mode) {
    if (u >= cfg_.k) throw std::out_of_range("E2EModel::encode_user: user index out of range");
    const nn::Mat<T> pre = encoders[group_of(u)].forward(to_net<T>(pilot_observation(hr, hi, z)), mode);
    nn::Mat<T> act = activate(pre);
    if (feedback_quantizer)
        act = act.unaryExpr([this](T x) { return static_cast<T>(feedback_quantizer->apply(static_cast<double>(x))); });
    return act;
}

template <typename T>
typename E2EModel<T>::Output E2EModel<T>::forward(const BatchTensors& batch, nn::Mode mode) {
    const std::size_t k = cfg_.k, n = batch.n, b = cfg_.encoder.outputs;
    if (batch.hr.size() != k) throw ShapeError("E2EModel::forward: batch has the wrong number of users");
    if (static_cast<std::size_t>(batch.hr[0].rows()) != cfg_.m) throw ShapeError("E2EModel::forward: antenna count mismatch");
    const nn::Mode enc_mode = freeze_users ? nn::Mode::infer : mode;
    const std::size_t groups = encoders.size();
    const std::size_t per_group = cfg_.shared_encoder ? k : 1;

    tape_.y.assign(groups, {});
    tape_.pre.assign(groups, {});
    tape_.act.assign(groups, {});
    tape_.encoders_train = enc_mode == nn::Mode::train;
    for (std::size_t g = 0; g < groups; ++g) {
        Eigen::MatrixXd y(2 * cfg_.l, per_group * n);
        for (std::size_t j = 0; j < per_group; ++j) {
            const std::size_t u = g * per_group + j;
            y.middleCols(static_cast<Eigen::Index>(j * n), static_cast<Eigen::Index>(n)) =
                pilot_observation(batch.hr[u], batch.hi[u], batch.z[u]);
        }
        tape_.pre[g] = encoders[g].forward(to_net<T>(y), enc_mode);
        tape_.act[g] = activate(tape_.pre[g]);
        tape_.y[g] = std::move(y);
    }

    Output out;
    nn::Mat<T> dec_in(static_cast<Eigen::Index>(k * b), static_cast<Eigen::Index>(n));
    for (std::size_t u = 0; u < k; ++u) {
        const std::size_t g = group_of(u), j = cfg_.shared_encoder ? u : 0;
        nn::Mat<T> msg = tape_.act[g].middleCols(static_cast<Eigen::Index>(j * n), static_cast<Eigen::Index>(n));
        if (feedback_quantizer)
            msg = msg.unaryExpr([this](T x) { return static_cast<T>(feedback_quantizer->apply(static_cast<double>(x))); });
        dec_in.middleRows(static_cast<Eigen::Index>(u * b), static_cast<Eigen::Index>(b)) = msg;
        out.feedback.push_back(std::move(msg));
    }
    tape_.raw = decoder.forward(dec_in, mode);
    out.v = nn::unit_norm_forward(tape_.raw, cfg_.power);
    return out;
}

template <typename T>
double E2EModel<T>::backward(const BatchTensors& batch, const Output& out) {
    if (feedback_quantizer && !freeze_users)
        throw std::logic_error("E2EModel: a feedback quantizer in the loop requires frozen user-side parameters");
    nn::Mat<T> dv;
    const double rate = batch_sum_rate<T>(out.v, batch, cfg_.m, cfg_.k, cfg_.sigma2, &dv);
    const nn::Mat<T> draw = nn::unit_norm_backward(tape_.raw, dv, cfg_.power);
    const nn::Mat<T> dmsg = decoder.backward(draw);
    if (freeze_users) return rate;

    const std::size_t k = cfg_.k, n = batch.n, b = cfg_.encoder.outputs;
    const std::size_t per_group = cfg_.shared_encoder ? k : 1;
    for (std::size_t g = 0; g < encoders.size(); ++g) {
        nn::Mat<T> dact(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(per_group * n));
        for (std::size_t j = 0; j < per_group; ++j) {
            const std::size_t u = g * per_group + j;
            dact.middleCols(static_cast<Eigen::Index>(j * n), static_cast<Eigen::Index>(n)) =
                dmsg.middleRows(static_cast<Eigen::Index>(u * b), static_cast<Eigen::Index>(b));
        }
        const nn::Mat<T> dpre = cfg_.encoder.kind == FeedbackKind::soft_tanh
                                    ? nn::tanh_backward(tape_.act[g], dact)
                                    : nn::sign_backward(tape_.pre[g], dact, alpha);
        const Eigen::MatrixXd gy = from_net<T>(encoders[g].backward(dpre));
        for (std::size_t j = 0; j < per_group; ++j) {
            const std::size_t u = g * per_group + j;
            observe_backward(batch.hr[u], batch.hi[u],
                             gy.middleCols(static_cast<Eigen::Index>(j * n), static_cast<Eigen::Index>(n)), dpilot_re_,
                             dpilot_im_);
        }
    }
    return rate;
}

template <typename T>
void E2EModel<T>::zero_grad() {
    for (auto& e : encoders) e.zero_grad();
    decoder.zero_grad();
    dpilot_re_.setZero();
    dpilot_im_.setZero();
}

template <typename T>
std::vector<nn::ParamRef<T>> E2EModel<T>::network_params() {
    std::vector<nn::ParamRef<T>> out;
    if (!freeze_users)
        for (std::size_t g = 0; g < encoders.size(); ++g) encoders[g].collect(out, "encoder" + std::to_string(g));
    decoder.collect(out, "decoder");
    return out;
}

template <typename T>
std::vector<nn::ParamRef<double>> E2EModel<T>::pilot_params() {
    if (freeze_users) return {};
    return {{"pilot/re", pilot_re.data(), dpilot_re_.data(), static_cast<std::size_t>(pilot_re.size())},
            {"pilot/im", pilot_im.data(), dpilot_im_.data(), static_cast<std::size_t>(pilot_im.size())}};
}

template <typename T>
double E2EModel<T>::train_step(const SampleSet& set, double lr) {
    const BatchTensors batch = to_tensors(set, 0, set.size());
    zero_grad();
    const Output out = forward(batch, nn::Mode::train);
    const double rate = backward(batch, out);
    net_opt_.step(network_params(), lr);
    if (!freeze_users) {
        pilot_opt_.step(pilot_params(), lr);
        project_pilot();
    }
    return -rate;
}

template <typename T>
std::vector<PrecodingMatrix> E2EModel<T>::precode(const SampleSet& set, std::size_t begin, std::size_t count) {
    const BatchTensors batch = to_tensors(set, begin, count);
    const Output out = forward(batch, nn::Mode::infer);
    return unpack_batch(out.v, cfg_.m, cfg_.k, cfg_.power);
}

template <typename T>
double E2EModel<T>::validate(const SampleSet& validation) {
    constexpr std::size_t chunk = 2048;
    double total = 0.0;
    for (std::size_t begin = 0; begin < validation.size(); begin += chunk) {
        const std::size_t count = std::min(chunk, validation.size() - begin);
        const BatchTensors batch = to_tensors(validation, begin, count);
        const Output out = forward(batch, nn::Mode::infer);
        total += batch_sum_rate<T>(out.v, batch, cfg_.m, cfg_.k, cfg_.sigma2) * static_cast<double>(count);
    }
    return total / static_cast<double>(validation.size());
}

template <typename T>
std::vector<double> E2EModel<T>::pooled_feedback(const SampleSet& set) {
    std::vector<double> out;
    constexpr std::size_t chunk = 2048;
    for (std::size_t begin = 0; begin < set.size(); begin += chunk) {
        const std::size_t count = std::min(chunk, set.size() - begin);
        const BatchTensors batch = to_tensors(set, begin, count);
        for (std::size_t u = 0; u < set.users(); ++u) {
            const std::size_t g = u < cfg_.k ? group_of(u) : 0;
            const nn::Mat<T> pre =
                encoders[g].forward(to_net<T>(pilot_observation(batch.hr[u], batch.hi[u], batch.z[u])), nn::Mode::infer);
            const nn::Mat<T> act = activate(pre);
            for (Eigen::Index i = 0; i < act.size(); ++i) out.push_back(static_cast<double>(act.data()[i]));
        }
    }
    return out;
}

template <typename T>
nn::TensorSet E2EModel<T>::snapshot() const {
    nn::TensorSet set;
    put_pilot(set, pilot_re, pilot_im);
    for (std::size_t g = 0; g < encoders.size(); ++g) nn::export_mlp(encoders[g], "encoder" + std::to_string(g), set);
    nn::export_mlp(decoder, "decoder", set);
    return set;
}

template <typename T>
void E2EModel<T>::restore(const nn::TensorSet& set) {
    get_pilot(set, pilot_re, pilot_im);
    for (std::size_t g = 0; g < encoders.size(); ++g) nn::import_mlp(encoders[g], "encoder" + std::to_string(g), set);
    nn::import_mlp(decoder, "decoder", set);
}

// ---------------------------------------------------------------------------
// ChannelEstimatorModel

template <typename T>
ChannelEstimatorModel<T>::ChannelEstimatorModel(ModelConfig cfg, std::uint64_t init_seed) : cfg_(std::move(cfg)) {
    cfg_.k = 1;
    cfg_.shared_encoder = true;
    cfg_.encoder.kind = FeedbackKind::hard_sign;
    cfg_.validate();
    RandomStream rng(init_seed);
    init_pilot_planes(pilot_re, pilot_im, cfg_.m, cfg_.l, cfg_.power, rng);
    encoder = nn::Mlp<T>(layer_sizes(2 * cfg_.l, cfg_.encoder.hidden, cfg_.encoder.outputs));
    encoder.init(rng);
    decoder = nn::Mlp<T>(layer_sizes(cfg_.encoder.outputs, cfg_.decoder.hidden, 2 * cfg_.m));
    decoder.init(rng);
}

template <typename T>
std::string ChannelEstimatorModel<T>::config_hash() const {
    json j = cfg_.to_json();
    j["objective"] = "channel_mse";
    return sha256_hex(j.dump());
}

template <typename T>
PilotMatrix ChannelEstimatorModel<T>::pilot() const {
    return planes_to_pilot(pilot_re, pilot_im, cfg_.power);
}

template <typename T>
nn::Mat<T> ChannelEstimatorModel<T>::forward(const BatchTensors& batch, nn::Mode mode, std::vector<Eigen::MatrixXd>* y,
                                             std::vector<nn::Mat<T>>* pre) {
    // Every user of the batch goes through the same network, concatenated along columns.
    const std::size_t k = batch.hr.size(), n = batch.n;
    Eigen::MatrixXd obs(2 * cfg_.l, k * n);
    for (std::size_t u = 0; u < k; ++u)
        obs.middleCols(static_cast<Eigen::Index>(u * n), static_cast<Eigen::Index>(n)) =
            observe(pilot_re, pilot_im, batch.hr[u], batch.hi[u], batch.z[u]);
    nn::Mat<T> p = encoder.forward(to_net<T>(obs), mode);
    const nn::Mat<T> bits = nn::sign_forward(p);
    nn::Mat<T> h = decoder.forward(bits, mode);
    if (y) y->assign(1, std::move(obs));
    if (pre) pre->assign(1, std::move(p));
    return h;
}

template <typename T>
double ChannelEstimatorModel<T>::train_step(const SampleSet& set, double lr) {
    const BatchTensors batch = to_tensors(set, 0, set.size());
    const std::size_t k = batch.hr.size(), n = batch.n, m = cfg_.m;
    encoder.zero_grad();
    decoder.zero_grad();
    Eigen::MatrixXd dxr = Eigen::MatrixXd::Zero(pilot_re.rows(), pilot_re.cols());
    Eigen::MatrixXd dxi = Eigen::MatrixXd::Zero(pilot_re.rows(), pilot_re.cols());

    std::vector<Eigen::MatrixXd> y;
    std::vector<nn::Mat<T>> pre;
    const nn::Mat<T> h = forward(batch, nn::Mode::train, &y, &pre);
    const double cols = static_cast<double>(k * n);
    nn::Mat<T> dh(h.rows(), h.cols());
    double loss = 0.0;
    for (std::size_t u = 0; u < k; ++u)
        for (std::size_t s = 0; s < n; ++s) {
            const auto c = static_cast<Eigen::Index>(u * n + s);
            for (std::size_t i = 0; i < m; ++i) {
                const double er = static_cast<double>(h(static_cast<Eigen::Index>(i), c)) - batch.hr[u](i, s);
                const double ei = static_cast<double>(h(static_cast<Eigen::Index>(m + i), c)) - batch.hi[u](i, s);
                loss += er * er + ei * ei;
                dh(static_cast<Eigen::Index>(i), c) = static_cast<T>(2.0 * er / cols);
                dh(static_cast<Eigen::Index>(m + i), c) = static_cast<T>(2.0 * ei / cols);
            }
        }
    const nn::Mat<T> dbits = decoder.backward(dh);
    const Eigen::MatrixXd gy = from_net<T>(encoder.backward(nn::sign_backward(pre[0], dbits, alpha)));
    for (std::size_t u = 0; u < k; ++u)
        observe_backward(batch.hr[u], batch.hi[u],
                         gy.middleCols(static_cast<Eigen::Index>(u * n), static_cast<Eigen::Index>(n)), dxr, dxi);

    std::vector<nn::ParamRef<T>> params;
    encoder.collect(params, "encoder");
    decoder.collect(params, "decoder");
    net_opt_.step(params, lr);
    pilot_opt_.step({{"pilot/re", pilot_re.data(), dxr.data(), static_cast<std::size_t>(pilot_re.size())},
                     {"pilot/im", pilot_im.data(), dxi.data(), static_cast<std::size_t>(pilot_im.size())}},
                    lr);
    project_columns(pilot_re, pilot_im, cfg_.power);
    return loss / cols;
}

template <typename T>
std::vector<CMatrix> ChannelEstimatorModel<T>::estimate(const SampleSet& set, std::size_t begin, std::size_t count) {
    const BatchTensors batch = to_tensors(set, begin, count);
    const std::size_t k = set.users(), m = cfg_.m;
    const nn::Mat<T> h = forward(batch, nn::Mode::infer, nullptr, nullptr);
    std::vector<CMatrix> out(count * k);
    for (std::size_t s = 0; s < count; ++s)
        for (std::size_t u = 0; u < k; ++u) {
            const auto c = static_cast<Eigen::Index>(u * count + s);
            CMatrix hh(m, 1);
            for (std::size_t i = 0; i < m; ++i) {
                hh.re(i, 0) = static_cast<double>(h(static_cast<Eigen::Index>(i), c));
                hh.im(i, 0) = static_cast<double>(h(static_cast<Eigen::Index>(m + i), c));
            }
            out[s * k + u] = std::move(hh);
        }
    return out;
}

template <typename T>
double ChannelEstimatorModel<T>::mse(const SampleSet& set) {
    constexpr std::size_t chunk = 2048;
    double total = 0.0;
    for (std::size_t begin = 0; begin < set.size(); begin += chunk) {
        const std::size_t count = std::min(chunk, set.size() - begin);
        const auto est = estimate(set, begin, count);
        for (std::size_t s = 0; s < count; ++s)
            for (std::size_t u = 0; u < set.users(); ++u)
                total += (est[s * set.users() + u] - set.channels.user(begin + s, u).h).frobenius_norm_sq();
    }
    return total / static_cast<double>(set.size() * set.users());
}

template <typename T>
nn::TensorSet ChannelEstimatorModel<T>::snapshot() const {
    nn::TensorSet set;
    put_pilot(set, pilot_re, pilot_im);
    nn::export_mlp(encoder, "encoder0", set);
    nn::export_mlp(decoder, "decoder", set);
    return set;
}

template <typename T>
void ChannelEstimatorModel<T>::restore(const nn::TensorSet& set) {
    get_pilot(set, pilot_re, pilot_im);
    nn::import_mlp(encoder, "encoder0", set);
    nn::import_mlp(decoder, "decoder", set);
}

// ---------------------------------------------------------------------------
// Training loop and evaluation

json TrainingHistory::to_json() const {
    json rows = json::array();
    for (const auto& e : epochs)
        rows.push_back({{"epoch", e.epoch},
                        {"lr", e.lr},
                        {"alpha", e.alpha},
                        {"train_loss", e.train_loss},
                        {"validation", e.validation},
                        {"best", e.best}});
    return {{"best_epoch", best_epoch}, {"best_validation", best_validation}, {"epochs", rows}};
}

TrainingHistory train(Trainable& model, const TrainingSchedule& schedule, const ChannelDistribution& dist,
                      const ArrayConfig& array, const SeedTree& seeds, const EpochCallback& on_epoch) {
    schedule.validate();
    dist.validate();
    const std::size_t k = model.batch_users(), l = model.pilot_length();
    const double sigma2 = model.noise_variance();

    RandomStream val_channels = seeds.stream(Purpose::validation, 0);
    RandomStream val_noise = seeds.stream(Purpose::validation, 1);
    const SampleSet validation =
        make_sample_set(dist, array, k, l, schedule.validation_size, sigma2, val_channels, val_noise);

    double lr = schedule.lr_start;
    double alpha = schedule.alpha_start;
    model.set_annealing(alpha);

    TrainingHistory hist;
    hist.best_validation = model.validate(validation);
    if (!std::isfinite(hist.best_validation)) throw TrainingDiverged("train: initial validation score is not finite");
    hist.best_epoch = 0;
    hist.epochs.push_back({0, lr, alpha, std::numeric_limits<double>::quiet_NaN(), hist.best_validation, true});
    if (on_epoch) on_epoch(hist.epochs.back());
    nn::TensorSet best = model.snapshot();

    std::size_t since_best = 0, since_decay = 0;
    for (std::size_t epoch = 1;; ++epoch) {
        double loss_sum = 0.0;
        for (std::size_t t = 0; t < schedule.batches_per_epoch; ++t) {
            const std::uint64_t index = (epoch - 1) * schedule.batches_per_epoch + t;
            RandomStream ch = seeds.stream(Purpose::channels, index);
            RandomStream nz = seeds.stream(Purpose::noise, index);
            const SampleSet batch = make_sample_set(dist, array, k, l, schedule.batch_size, sigma2, ch, nz);
            const double loss = model.train_step(batch, lr);
            if (!std::isfinite(loss))
                throw TrainingDiverged("train: non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                                       std::to_string(t) + " (lr " + std::to_string(lr) + ", alpha " +
                                       std::to_string(alpha) + ")");
            loss_sum += loss;
        }
        const double score = model.validate(validation);
        if (!std::isfinite(score))
            throw TrainingDiverged("train: non-finite validation score at epoch " + std::to_string(epoch));
        EpochRecord rec{epoch, lr, alpha, loss_sum / static_cast<double>(schedule.batches_per_epoch), score, false};
        if (score > hist.best_validation) {
            rec.best = true;
            hist.best_validation = score;
            hist.best_epoch = epoch;
            best = model.snapshot();
            since_best = 0;
            since_decay = 0;
        } else {
            ++since_best;
            ++since_decay;
        }
        hist.epochs.push_back(rec);
        if (on_epoch) on_epoch(rec);
        if (since_best >= schedule.patience) break;
        if (schedule.max_epochs != 0 && epoch >= schedule.max_epochs) break;
        if (since_decay >= schedule.lr_decay_patience) {
            lr = std::max(lr * schedule.lr_decay, schedule.lr_floor);
            since_decay = 0;
        }
        alpha = std::min(alpha * schedule.alpha_growth, schedule.alpha_cap);
        model.set_annealing(alpha);
    }
    model.restore(best);
    return hist;
}

EvaluationResult evaluate(const PrecoderPipeline& pipeline, const SampleSet& test, std::size_t chunk) {
    if (test.size() == 0) throw std::invalid_argument("evaluate: empty test set");
    if (chunk == 0) chunk = test.size();
    const std::size_t k = test.users();
    EvaluationResult r;
    r.samples = test.size();
    r.per_user_mean.assign(k, 0.0);
    // Two-pass statistics keep the mean independent of the chunking.
    std::vector<double> sums(test.size());
    std::vector<double> user_sum(k, 0.0);
    for (std::size_t begin = 0; begin < test.size(); begin += chunk) {
        const std::size_t count = std::min(chunk, test.size() - begin);
        const auto precoders = pipeline(test, begin, count);
        if (precoders.size() != count) throw ShapeError("evaluate: pipeline returned the wrong number of precoders");
        for (std::size_t s = 0; s < count; ++s) {
            const auto rates = user_rates(test.channels.h_matrix(begin + s), precoders[s], test.sigma2);
            double total = 0.0;
            for (std::size_t u = 0; u < k; ++u) {
                user_sum[u] += rates[u];
                total += rates[u];
            }
            sums[begin + s] = total;
        }
    }
    double mean = 0.0;
    for (double v : sums) mean += v;
    mean /= static_cast<double>(sums.size());
    double var = 0.0;
    for (double v : sums) var += (v - mean) * (v - mean);
    var = sums.size() > 1 ? var / static_cast<double>(sums.size() - 1) : 0.0;
    r.mean_sum_rate = mean;
    r.std_error = std::sqrt(var / static_cast<double>(sums.size()));
    for (std::size_t u = 0; u < k; ++u) r.per_user_mean[u] = user_sum[u] / static_cast<double>(test.size());
    return r;
}

// ---------------------------------------------------------------------------
// Model checkpoints

template <typename T>
void save_model(const std::filesystem::path& stem, const E2EModel<T>& model, const json& extra) {
    json meta = {{"kind", "e2e"},
                 {"model", model.config().to_json()},
                 {"freeze_users", model.freeze_users},
                 {"alpha", model.alpha},
                 {"extra", extra}};
    if (model.feedback_quantizer) meta["feedback_quantizer"] = model.feedback_quantizer->to_json();
    nn::save_checkpoint(stem, model.snapshot(), model.config_hash(), meta.dump());
}

template <typename T>
E2EModel<T> load_e2e_model(const std::filesystem::path& stem, json* extra) {
    std::string hash, meta_text;
    const nn::TensorSet set = nn::load_checkpoint(stem, &hash, &meta_text);
    const json meta = json::parse(meta_text);
    if (meta.at("kind") != "e2e") throw std::runtime_error("load_e2e_model: checkpoint holds a different model kind");
    E2EModel<T> model(ModelConfig::from_json(meta.at("model")), 0);
    if (model.config_hash() != hash) throw std::runtime_error("load_e2e_model: config hash mismatch in " + stem.string());
    model.restore(set);
    model.freeze_users = meta.at("freeze_users").get<bool>();
    model.alpha = meta.at("alpha").get<double>();
    if (meta.contains("feedback_quantizer")) model.feedback_quantizer = ScalarQuantizer::from_json(meta.at("feedback_quantizer"));
    if (extra) *extra = meta.at("extra");
    return model;
}

template <typename T>
void save_model(const std::filesystem::path& stem, const ChannelEstimatorModel<T>& model, const json& extra) {
    json meta = {{"kind", "channel_mse"}, {"model", model.config().to_json()}, {"alpha", model.alpha}, {"extra", extra}};
    nn::save_checkpoint(stem, model.snapshot(), model.config_hash(), meta.dump());
}

template <typename T>
ChannelEstimatorModel<T> load_estimator_model(const std::filesystem::path& stem, json* extra) {
    std::string hash, meta_text;
    const nn::TensorSet set = nn::load_checkpoint(stem, &hash, &meta_text);
    const json meta = json::parse(meta_text);
    if (meta.at("kind") != "channel_mse")
        throw std::runtime_error("load_estimator_model: checkpoint holds a different model kind");
    ChannelEstimatorModel<T> model(ModelConfig::from_json(meta.at("model")), 0);
    if (model.config_hash() != hash)
        throw std::runtime_error("load_estimator_model: config hash mismatch in " + stem.string());
    model.restore(set);
    model.alpha = meta.at("alpha").get<double>();
    if (extra) *extra = meta.at("extra");
    return model;
}

template double batch_sum_rate<float>(const nn::Mat<float>&, const BatchTensors&, std::size_t, std::size_t, double,
                                      nn::Mat<float>*, std::vector<double>*);
template double batch_sum_rate<double>(const nn::Mat<double>&, const BatchTensors&, std::size_t, std::size_t, double,
                                       nn::Mat<double>*, std::vector<double>*);
template class E2EModel<float>;
template class E2EModel<double>;
template class ChannelEstimatorModel<float>;
template class ChannelEstimatorModel<double>;
template void save_model<float>(const std::filesystem::path&, const E2EModel<float>&, const json&);
template void save_model<double>(const std::filesystem::path&, const E2EModel<double>&, const json&);
template E2EModel<float> load_e2e_model<float>(const std::filesystem::path&, json*);
template E2EModel<double> load_e2e_model<double>(const std::filesystem::path&, json*);
template void save_model<float>(const std::filesystem::path&, const ChannelEstimatorModel<float>&, const json&);
template void save_model<double>(const std::filesystem::path&, const ChannelEstimatorModel<double>&, const json&);
template ChannelEstimatorModel<float> load_estimator_model<float>(const std::filesystem::path&, json*);
template ChannelEstimatorModel<double> load_estimator_model<double>(const std::filesystem::path&, json*);

}  // namespace fdd
