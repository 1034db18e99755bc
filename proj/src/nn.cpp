// SPDX-License-Identifier: Apache-2.0
#include "fdd/nn.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

namespace fdd::nn {

// ---------------------------------------------------------------------------
// Dense

template <typename T>
Dense<T>::Dense(std::size_t in, std::size_t out)
    : w(Mat<T>::Zero(out, in)), b(Vec<T>::Zero(out)), dw(Mat<T>::Zero(out, in)), db(Vec<T>::Zero(out)) {}

template <typename T>
void Dense<T>::init(RandomStream& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(w.rows() + w.cols()));
    // Column-major fill order fixes the stream consumption pattern.
    for (Eigen::Index c = 0; c < w.cols(); ++c)
        for (Eigen::Index r = 0; r < w.rows(); ++r) w(r, c) = static_cast<T>(rng.uniform(-limit, limit));
    b.setZero();
}

template <typename T>
Mat<T> Dense<T>::forward(const Mat<T>& x) {
    if (x.rows() != w.cols())
        throw ShapeError("Dense::forward: expected " + std::to_string(w.cols()) + " input features, got " +
                         std::to_string(x.rows()));
    x_ = x;
    Mat<T> y = w * x;
    y.colwise() += b;
    return y;
}

template <typename T>
Mat<T> Dense<T>::backward(const Mat<T>& dy) {
    if (dy.rows() != w.rows() || dy.cols() != x_.cols()) throw ShapeError("Dense::backward: gradient shape mismatch");
    dw.noalias() += dy * x_.transpose();
    db += dy.rowwise().sum();
    return w.transpose() * dy;
}

template <typename T>
void Dense<T>::zero_grad() {
    dw.setZero();
    db.setZero();
}

template <typename T>
void Dense<T>::collect(std::vector<ParamRef<T>>& out, const std::string& prefix) {
    out.push_back({prefix + "/w", w.data(), dw.data(), static_cast<std::size_t>(w.size())});
    out.push_back({prefix + "/b", b.data(), db.data(), static_cast<std::size_t>(b.size())});
}

// ---------------------------------------------------------------------------
// BatchNorm

template <typename T>
BatchNorm<T>::BatchNorm(std::size_t features, T momentum_, T epsilon_)
    : gamma(Vec<T>::Ones(features)),
      beta(Vec<T>::Zero(features)),
      running_mean(Vec<T>::Zero(features)),
      running_var(Vec<T>::Ones(features)),
      dgamma(Vec<T>::Zero(features)),
      dbeta(Vec<T>::Zero(features)),
      momentum(momentum_),
      epsilon(epsilon_) {}

template <typename T>
Mat<T> BatchNorm<T>::forward(const Mat<T>& x, Mode mode) {
    if (x.rows() != gamma.size()) throw ShapeError("BatchNorm::forward: feature count mismatch");
    last_mode_ = mode;
    const Eigen::Index n = x.cols();
    if (mode == Mode::train) {
        if (n < 2) throw std::invalid_argument("BatchNorm::forward: train mode needs a batch of at least 2");
        const Vec<T> mean = x.rowwise().mean();
        xhat_ = x.colwise() - mean;
        const Vec<T> var = xhat_.array().square().rowwise().mean();
        inv_std_ = (var.array() + epsilon).rsqrt();
        xhat_.array().colwise() *= inv_std_.array();
        const T unbias = static_cast<T>(n) / static_cast<T>(n - 1);
        running_mean = momentum * running_mean + (T(1) - momentum) * mean;
        running_var = momentum * running_var + (T(1) - momentum) * unbias * var;
    } else {
        inv_std_ = (running_var.array() + epsilon).rsqrt();
        xhat_ = x.colwise() - running_mean;
        xhat_.array().colwise() *= inv_std_.array();
    }
    Mat<T> y = xhat_;
    y.array().colwise() *= gamma.array();
    y.colwise() += beta;
    return y;
}

template <typename T>
Mat<T> BatchNorm<T>::backward(const Mat<T>& dy) {
    if (dy.rows() != xhat_.rows() || dy.cols() != xhat_.cols()) throw ShapeError("BatchNorm::backward: shape mismatch");
    dgamma += (dy.array() * xhat_.array()).rowwise().sum().matrix();
    dbeta += dy.rowwise().sum();
    Mat<T> dxhat = dy;
    dxhat.array().colwise() *= gamma.array();
    if (last_mode_ == Mode::infer) {
        dxhat.array().colwise() *= inv_std_.array();
        return dxhat;
    }
    const T n = static_cast<T>(dy.cols());
    const Vec<T> sum_d = dxhat.rowwise().sum();
    const Vec<T> sum_dx = (dxhat.array() * xhat_.array()).rowwise().sum().matrix();
    Mat<T> dx = (dxhat * n).colwise() - sum_d;
    dx.array() -= xhat_.array().colwise() * sum_dx.array();
    dx.array().colwise() *= (inv_std_.array() / n);
    return dx;
}

template <typename T>
void BatchNorm<T>::zero_grad() {
    dgamma.setZero();
    dbeta.setZero();
}

template <typename T>
void BatchNorm<T>::collect(std::vector<ParamRef<T>>& out, const std::string& prefix) {
    out.push_back({prefix + "/gamma", gamma.data(), dgamma.data(), static_cast<std::size_t>(gamma.size())});
    out.push_back({prefix + "/beta", beta.data(), dbeta.data(), static_cast<std::size_t>(beta.size())});
}

// ---------------------------------------------------------------------------
// Elementwise layers

template <typename T>
Mat<T> relu_forward(const Mat<T>& x) {
    return x.cwiseMax(T(0));
}

template <typename T>
Mat<T> relu_backward(const Mat<T>& x, const Mat<T>& dy) {
    return (x.array() > T(0)).select(dy, T(0));
}

template <typename T>
Mat<T> tanh_forward(const Mat<T>& x) {
    return x.array().tanh().matrix();
}

template <typename T>
Mat<T> tanh_backward(const Mat<T>& y, const Mat<T>& dy) {
    return (dy.array() * (T(1) - y.array().square())).matrix();
}

template <typename T>
Mat<T> sign_forward(const Mat<T>& u) {
    return u.unaryExpr([](T v) { return v >= T(0) ? T(1) : T(-1); });
}

template <typename T>
Mat<T> sign_surrogate_forward(const Mat<T>& u, double alpha) {
    return u.unaryExpr([alpha](T v) {
        const double z = alpha * static_cast<double>(v);
        return static_cast<T>(2.0 / (1.0 + std::exp(-z)) - 1.0);
    });
}

double sign_surrogate_slope(double u, double alpha) {
    const double z = std::abs(alpha * u);
    if (!std::isfinite(z)) return 0.0;
    const double e = std::exp(-z);
    return 2.0 * alpha * e / ((1.0 + e) * (1.0 + e));
}

template <typename T>
Mat<T> sign_backward(const Mat<T>& u, const Mat<T>& dy, double alpha) {
    Mat<T> dx(u.rows(), u.cols());
    for (Eigen::Index i = 0; i < u.size(); ++i)
        dx.data()[i] = dy.data()[i] * static_cast<T>(sign_surrogate_slope(static_cast<double>(u.data()[i]), alpha));
    return dx;
}

template <typename T>
Mat<T> unit_norm_forward(const Mat<T>& x, double power) {
    Mat<T> y = x;
    const T sp = static_cast<T>(std::sqrt(power));
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
        const T n = x.col(c).norm();
        if (!(n > T(0))) throw DegenerateInputError("unit_norm_forward: zero input column");
        y.col(c) *= sp / n;
    }
    return y;
}

template <typename T>
Mat<T> unit_norm_backward(const Mat<T>& x, const Mat<T>& dy, double power) {
    Mat<T> dx(x.rows(), x.cols());
    const T sp = static_cast<T>(std::sqrt(power));
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
        const T n = x.col(c).norm();
        const Vec<T> xh = x.col(c) / n;
        dx.col(c) = (sp / n) * (dy.col(c) - xh * xh.dot(dy.col(c)));
    }
    return dx;
}

// ---------------------------------------------------------------------------
// Mlp

template <typename T>
Mlp<T>::Mlp(std::vector<std::size_t> sizes, bool batch_norm) : sizes_(std::move(sizes)), batch_norm_(batch_norm) {
    if (sizes_.size() < 2) throw std::invalid_argument("Mlp: need at least input and output sizes");
    for (std::size_t i = 0; i + 1 < sizes_.size(); ++i) {
        if (batch_norm_) norms.emplace_back(sizes_[i]);
        layers.emplace_back(sizes_[i], sizes_[i + 1]);
    }
}

template <typename T>
void Mlp<T>::init(RandomStream& rng) {
    for (auto& l : layers) l.init(rng);
}

template <typename T>
Mat<T> Mlp<T>::forward(const Mat<T>& x, Mode mode) {
    Mat<T> h = x;
    pre_.resize(layers.size());
    min_margin_ = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < layers.size(); ++i) {
        if (batch_norm_) h = norms[i].forward(h, mode);
        Mat<T> z = layers[i].forward(h);
        if (i + 1 < layers.size()) {
            min_margin_ = std::min(min_margin_, static_cast<double>(z.cwiseAbs().minCoeff()));
            h = relu_forward(z);
            pre_[i] = std::move(z);
        } else {
            h = std::move(z);
        }
    }
    return h;
}

template <typename T>
Mat<T> Mlp<T>::backward(const Mat<T>& dy) {
    Mat<T> g = dy;
    for (std::size_t i = layers.size(); i-- > 0;) {
        if (i + 1 < layers.size()) g = relu_backward(pre_[i], g);
        g = layers[i].backward(g);
        if (batch_norm_) g = norms[i].backward(g);
    }
    return g;
}

template <typename T>
void Mlp<T>::zero_grad() {
    for (auto& l : layers) l.zero_grad();
    for (auto& n : norms) n.zero_grad();
}

template <typename T>
void Mlp<T>::collect(std::vector<ParamRef<T>>& out, const std::string& prefix) {
    for (std::size_t i = 0; i < layers.size(); ++i) {
        if (batch_norm_) norms[i].collect(out, prefix + "/bn" + std::to_string(i));
        layers[i].collect(out, prefix + "/dense" + std::to_string(i));
    }
}

// ---------------------------------------------------------------------------
// Adam

template <typename T>
void Adam<T>::step(const std::vector<ParamRef<T>>& params, double lr) {
    if (names_.empty()) {
        for (const auto& p : params) {
            names_.push_back(p.name);
            m_.emplace_back(p.size, 0.0);
            v_.emplace_back(p.size, 0.0);
        }
    }
    if (params.size() != names_.size()) throw ShapeError("Adam::step: parameter list changed between steps");
    ++steps_;
    const double t = static_cast<double>(steps_);
    const double c1 = 1.0 - std::pow(cfg_.beta1, t);
    const double c2 = 1.0 - std::pow(cfg_.beta2, t);
    for (std::size_t b = 0; b < params.size(); ++b) {
        const auto& p = params[b];
        if (p.name != names_[b] || p.size != m_[b].size())
            throw ShapeError("Adam::step: parameter block '" + p.name + "' does not match its moments");
        auto& m = m_[b];
        auto& v = v_[b];
        for (std::size_t i = 0; i < p.size; ++i) {
            const double g = static_cast<double>(p.grad[i]);
            m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
            v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
            const double mh = m[i] / c1;
            const double vh = v[i] / c2;
            p.value[i] = static_cast<T>(static_cast<double>(p.value[i]) - lr * mh / (std::sqrt(vh) + cfg_.eps));
        }
    }
}

// ---------------------------------------------------------------------------
// Gradient check

GradCheckReport grad_check(const std::function<double()>& loss, const std::vector<ParamRef<double>>& params,
                           double h, std::size_t max_coords_per_block) {
    double amax = 0.0;
    for (const auto& p : params)
        for (std::size_t i = 0; i < p.size; ++i) amax = std::max(amax, std::abs(p.grad[i]));
    const double floor = 1e-6 * amax + 1e-12;

    GradCheckReport rep;
    for (const auto& p : params) {
        const std::size_t stride =
            (max_coords_per_block == 0 || p.size <= max_coords_per_block) ? 1 : p.size / max_coords_per_block;
        for (std::size_t i = 0; i < p.size; i += stride) {
            const double saved = p.value[i];
            p.value[i] = saved + h;
            const double fp = loss();
            p.value[i] = saved - h;
            const double fm = loss();
            p.value[i] = saved;
            const double numeric = (fp - fm) / (2.0 * h);
            const double analytic = p.grad[i];
            const double abs_err = std::abs(numeric - analytic);
            const double rel = abs_err / std::max({std::abs(numeric), std::abs(analytic), floor});
            rep.max_abs_error = std::max(rep.max_abs_error, abs_err);
            if (rel > rep.max_rel_error) {
                rep.max_rel_error = rel;
                rep.worst = p.name + "[" + std::to_string(i) + "]";
            }
            ++rep.checked;
        }
    }
    return rep;
}

// ---------------------------------------------------------------------------
// Checkpoints

template <typename S>
Tensor Tensor::from(std::string name, std::vector<std::size_t> shape, const S* data, std::size_t count) {
    static_assert(std::is_same_v<S, float> || std::is_same_v<S, double>);
    Tensor t{std::move(name), std::move(shape), std::is_same_v<S, float> ? "f32" : "f64", {}};
    t.bytes.resize(count * sizeof(S));
    std::memcpy(t.bytes.data(), data, t.bytes.size());
    return t;
}

template <typename S>
void Tensor::to(S* data, std::size_t count) const {
    const std::string want = std::is_same_v<S, float> ? "f32" : "f64";
    if (dtype != want) throw std::invalid_argument("Tensor '" + name + "': dtype " + dtype + ", expected " + want);
    if (bytes.size() != count * sizeof(S)) throw ShapeError("Tensor '" + name + "': size mismatch");
    std::memcpy(data, bytes.data(), bytes.size());
}

template Tensor Tensor::from<float>(std::string, std::vector<std::size_t>, const float*, std::size_t);
template Tensor Tensor::from<double>(std::string, std::vector<std::size_t>, const double*, std::size_t);
template void Tensor::to<float>(float*, std::size_t) const;
template void Tensor::to<double>(double*, std::size_t) const;

const Tensor& TensorSet::at(const std::string& name) const {
    for (const auto& t : tensors)
        if (t.name == name) return t;
    throw std::out_of_range("TensorSet: no tensor named '" + name + "'");
}

bool TensorSet::contains(const std::string& name) const {
    return std::any_of(tensors.begin(), tensors.end(), [&](const Tensor& t) { return t.name == name; });
}

bool operator==(const TensorSet& a, const TensorSet& b) { return a.tensors == b.tensors; }

void save_checkpoint(const std::filesystem::path& stem, const TensorSet& set, const std::string& config_hash,
                     const std::string& metadata_json) {
    static_assert(std::endian::native == std::endian::little);
    nlohmann::json entries = nlohmann::json::array();
    std::size_t offset = 0;
    for (const auto& t : set.tensors) {
        entries.push_back({{"name", t.name}, {"shape", t.shape}, {"dtype", t.dtype}, {"layout", "col-major"},
                           {"offset", offset}, {"nbytes", t.bytes.size()}});
        offset += t.bytes.size();
    }
    nlohmann::json manifest = {{"format", "fdd-checkpoint/1"},
                               {"config_hash", config_hash},
                               {"blob", stem.filename().string() + ".bin"},
                               {"blob_bytes", offset},
                               {"tensors", entries},
                               {"metadata", nlohmann::json::parse(metadata_json)}};
    if (stem.has_parent_path()) std::filesystem::create_directories(stem.parent_path());
    {
        std::ofstream blob(stem.string() + ".bin", std::ios::binary);
        if (!blob) throw std::runtime_error("save_checkpoint: cannot write " + stem.string() + ".bin");
        for (const auto& t : set.tensors) blob.write(reinterpret_cast<const char*>(t.bytes.data()), t.bytes.size());
    }
    std::ofstream js(stem.string() + ".json");
    if (!js) throw std::runtime_error("save_checkpoint: cannot write " + stem.string() + ".json");
    js << manifest.dump(2) << '\n';
}

TensorSet load_checkpoint(const std::filesystem::path& stem, std::string* config_hash, std::string* metadata_json) {
    std::ifstream js(stem.string() + ".json");
    if (!js) throw std::runtime_error("load_checkpoint: missing manifest " + stem.string() + ".json");
    const auto manifest = nlohmann::json::parse(js);
    if (manifest.at("format") != "fdd-checkpoint/1") throw std::runtime_error("load_checkpoint: unknown format");
    std::ifstream blob(stem.string() + ".bin", std::ios::binary);
    if (!blob) throw std::runtime_error("load_checkpoint: missing blob " + stem.string() + ".bin");
    std::vector<unsigned char> data((std::istreambuf_iterator<char>(blob)), std::istreambuf_iterator<char>());
    if (data.size() != manifest.at("blob_bytes").get<std::size_t>())
        throw std::runtime_error("load_checkpoint: blob size does not match manifest");
    TensorSet set;
    for (const auto& e : manifest.at("tensors")) {
        Tensor t;
        t.name = e.at("name").get<std::string>();
        t.shape = e.at("shape").get<std::vector<std::size_t>>();
        t.dtype = e.at("dtype").get<std::string>();
        const auto off = e.at("offset").get<std::size_t>();
        const auto nb = e.at("nbytes").get<std::size_t>();
        if (off + nb > data.size()) throw std::runtime_error("load_checkpoint: tensor extends past blob end");
        t.bytes.assign(data.begin() + static_cast<std::ptrdiff_t>(off), data.begin() + static_cast<std::ptrdiff_t>(off + nb));
        set.add(std::move(t));
    }
    if (config_hash) *config_hash = manifest.at("config_hash").get<std::string>();
    if (metadata_json) *metadata_json = manifest.at("metadata").dump();
    return set;
}

namespace {

template <typename T, typename E>
void put(TensorSet& out, const std::string& name, const E& m) {
    std::vector<std::size_t> shape{static_cast<std::size_t>(m.rows())};
    if (m.cols() != 1 || E::ColsAtCompileTime != 1) shape.push_back(static_cast<std::size_t>(m.cols()));
    out.add(Tensor::from<T>(name, shape, m.data(), static_cast<std::size_t>(m.size())));
}

template <typename T, typename E>
void get(const TensorSet& in, const std::string& name, E& m) {
    in.at(name).to<T>(m.data(), static_cast<std::size_t>(m.size()));
}

}  // namespace

template <typename T>
void export_mlp(const Mlp<T>& mlp, const std::string& prefix, TensorSet& out) {
    for (std::size_t i = 0; i < mlp.layers.size(); ++i) {
        const std::string p = prefix + "/" + std::to_string(i);
        if (!mlp.norms.empty()) {
            const auto& bn = mlp.norms[i];
            put<T>(out, p + "/bn/gamma", bn.gamma);
            put<T>(out, p + "/bn/beta", bn.beta);
            put<T>(out, p + "/bn/running_mean", bn.running_mean);
            put<T>(out, p + "/bn/running_var", bn.running_var);
        }
        put<T>(out, p + "/dense/w", mlp.layers[i].w);
        put<T>(out, p + "/dense/b", mlp.layers[i].b);
    }
}

template <typename T>
void import_mlp(Mlp<T>& mlp, const std::string& prefix, const TensorSet& in) {
    for (std::size_t i = 0; i < mlp.layers.size(); ++i) {
        const std::string p = prefix + "/" + std::to_string(i);
        if (!mlp.norms.empty()) {
            auto& bn = mlp.norms[i];
            get<T>(in, p + "/bn/gamma", bn.gamma);
            get<T>(in, p + "/bn/beta", bn.beta);
            get<T>(in, p + "/bn/running_mean", bn.running_mean);
            get<T>(in, p + "/bn/running_var", bn.running_var);
        }
        get<T>(in, p + "/dense/w", mlp.layers[i].w);
        get<T>(in, p + "/dense/b", mlp.layers[i].b);
    }
}

#define FDD_NN_INSTANTIATE(T)                                                        \
    template class Dense<T>;                                                         \
    template class BatchNorm<T>;                                                     \
    template class Mlp<T>;                                                           \
    template class Adam<T>;                                                          \
    template Mat<T> relu_forward<T>(const Mat<T>&);                                  \
    template Mat<T> relu_backward<T>(const Mat<T>&, const Mat<T>&);                  \
    template Mat<T> tanh_forward<T>(const Mat<T>&);                                  \
    template Mat<T> tanh_backward<T>(const Mat<T>&, const Mat<T>&);                  \
    template Mat<T> sign_forward<T>(const Mat<T>&);                                  \
    template Mat<T> sign_surrogate_forward<T>(const Mat<T>&, double);                \
    template Mat<T> sign_backward<T>(const Mat<T>&, const Mat<T>&, double);          \
    template Mat<T> unit_norm_forward<T>(const Mat<T>&, double);                     \
    template Mat<T> unit_norm_backward<T>(const Mat<T>&, const Mat<T>&, double);     \
    template void export_mlp<T>(const Mlp<T>&, const std::string&, TensorSet&);      \
    template void import_mlp<T>(Mlp<T>&, const std::string&, const TensorSet&);

FDD_NN_INSTANTIATE(float)
FDD_NN_INSTANTIATE(double)

#undef FDD_NN_INSTANTIATE

}  // namespace fdd::nn
