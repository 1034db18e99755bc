// SPDX-License-Identifier: Apache-2.0
#pragma once

// Small reverse-mode layer library. Activations are stored feature-major: one column per sample.
// Every layer caches what its backward pass needs during forward, so each forward call must be
// followed by at most one backward call before the next forward.

#include "fdd/numerics.hpp"

#include <Eigen/Dense>

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace fdd::nn {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <typename T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

enum class Mode { train, infer };

/// A trainable parameter block and its gradient accumulator.
template <typename T>
struct ParamRef {
    std::string name;
    T* value;
    T* grad;
    std::size_t size;
};

template <typename T>
class Dense {
  public:
    Dense() = default;
    Dense(std::size_t in, std::size_t out);

    /// Symmetric uniform init with limit sqrt(6 / (in + out)); zero bias.
    void init(RandomStream& rng);
    Mat<T> forward(const Mat<T>& x);
    Mat<T> backward(const Mat<T>& dy);
    void zero_grad();
    void collect(std::vector<ParamRef<T>>& out, const std::string& prefix);

    std::size_t in() const { return static_cast<std::size_t>(w.cols()); }
    std::size_t out() const { return static_cast<std::size_t>(w.rows()); }

    Mat<T> w;
    Vec<T> b;
    Mat<T> dw;
    Vec<T> db;

  private:
    Mat<T> x_;
};

template <typename T>
class BatchNorm {
  public:
    BatchNorm() = default;
    explicit BatchNorm(std::size_t features, T momentum = T(0.99), T epsilon = T(1e-3));

    /// Train mode normalizes by the batch statistics (needs >= 2 samples) and updates the running
    /// statistics; infer mode uses the running statistics only.
    Mat<T> forward(const Mat<T>& x, Mode mode);
    Mat<T> backward(const Mat<T>& dy);
    void zero_grad();
    void collect(std::vector<ParamRef<T>>& out, const std::string& prefix);

    Vec<T> gamma, beta, running_mean, running_var;
    Vec<T> dgamma, dbeta;
    T momentum = T(0.99);
    T epsilon = T(1e-3);

  private:
    Mode last_mode_ = Mode::infer;
    Mat<T> xhat_;
    Vec<T> inv_std_;
};

template <typename T>
Mat<T> relu_forward(const Mat<T>& x);
/// Subgradient 0 at the kink.
template <typename T>
Mat<T> relu_backward(const Mat<T>& x, const Mat<T>& dy);
template <typename T>
Mat<T> tanh_forward(const Mat<T>& x);
template <typename T>
Mat<T> tanh_backward(const Mat<T>& y, const Mat<T>& dy);

/// Hard sign with the sigmoid-adjusted straight-through gradient.
/// Forward emits exactly +1 for u >= 0 and -1 otherwise (NaN maps to -1).
template <typename T>
Mat<T> sign_forward(const Mat<T>& u);
/// The smooth surrogate 2 sigm(alpha u) - 1, used as forward only for gradient checks.
template <typename T>
Mat<T> sign_surrogate_forward(const Mat<T>& u, double alpha);
/// d/du [2 sigm(alpha u) - 1] = 2 alpha sigm(alpha u)(1 - sigm(alpha u)).
double sign_surrogate_slope(double u, double alpha);
template <typename T>
Mat<T> sign_backward(const Mat<T>& u, const Mat<T>& dy, double alpha);

/// y = sqrt(P) x / ||x||_2 per column.
template <typename T>
Mat<T> unit_norm_forward(const Mat<T>& x, double power);
template <typename T>
Mat<T> unit_norm_backward(const Mat<T>& x, const Mat<T>& dy, double power);

/// BatchNorm -> Dense for every layer, ReLU after all but the last dense layer; the output is the
/// raw last affine map so callers attach their own output activation.
template <typename T>
class Mlp {
  public:
    Mlp() = default;
    /// sizes = {input, hidden..., output}.
    explicit Mlp(std::vector<std::size_t> sizes, bool batch_norm = true);

    void init(RandomStream& rng);
    Mat<T> forward(const Mat<T>& x, Mode mode);
    Mat<T> backward(const Mat<T>& dy);
    void zero_grad();
    void collect(std::vector<ParamRef<T>>& out, const std::string& prefix);

    const std::vector<std::size_t>& sizes() const { return sizes_; }
    std::size_t input_size() const { return sizes_.front(); }
    std::size_t output_size() const { return sizes_.back(); }
    /// Smallest |pre-activation| seen by a ReLU in the last forward pass (kink distance).
    double min_relu_margin() const { return min_margin_; }

    std::vector<BatchNorm<T>> norms;
    std::vector<Dense<T>> layers;

  private:
    std::vector<std::size_t> sizes_;
    bool batch_norm_ = true;
    std::vector<Mat<T>> pre_;
    double min_margin_ = 0.0;
};

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

template <typename T>
class Adam {
  public:
    explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

    /// One bias-corrected update of every block; moments are allocated on first use and matched by name.
    void step(const std::vector<ParamRef<T>>& params, double lr);
    std::size_t step_count() const { return steps_; }
    const AdamConfig& config() const { return cfg_; }

  private:
    AdamConfig cfg_;
    std::size_t steps_ = 0;
    std::vector<std::string> names_;
    std::vector<std::vector<double>> m_, v_;
};

struct GradCheckReport {
    double max_rel_error = 0.0;
    double max_abs_error = 0.0;
    std::size_t checked = 0;
    std::string worst;
};

/// Central differences (step h) of `loss` against analytic gradients stored in each ParamRef's grad.
/// The relative error of a coordinate is |a - n| / max(|a|, |n|, floor), floor = 1e-6 * max|a| + 1e-12.
/// `loss` must not touch the grad buffers. When `max_coords_per_block` is nonzero, coordinates are
/// subsampled with a fixed stride.
GradCheckReport grad_check(const std::function<double()>& loss, const std::vector<ParamRef<double>>& params,
                           double h = 1e-5, std::size_t max_coords_per_block = 0);

// ---------------------------------------------------------------------------
// Checkpoints: JSON manifest + one contiguous little-endian blob.

struct Tensor {
    std::string name;
    std::vector<std::size_t> shape;
    std::string dtype;  // "f32" or "f64"
    std::vector<unsigned char> bytes;

    template <typename S>
    static Tensor from(std::string name, std::vector<std::size_t> shape, const S* data, std::size_t count);
    template <typename S>
    void to(S* data, std::size_t count) const;
};

struct TensorSet {
    std::vector<Tensor> tensors;

    const Tensor& at(const std::string& name) const;
    bool contains(const std::string& name) const;
    void add(Tensor t) { tensors.push_back(std::move(t)); }
    friend bool operator==(const TensorSet&, const TensorSet&);
};

inline bool operator==(const Tensor& a, const Tensor& b) {
    return a.name == b.name && a.shape == b.shape && a.dtype == b.dtype && a.bytes == b.bytes;
}

/// Writes `<stem>.json` (manifest) and `<stem>.bin` (blob). `metadata` is stored verbatim in the manifest.
void save_checkpoint(const std::filesystem::path& stem, const TensorSet& set, const std::string& config_hash,
                     const std::string& metadata_json = "{}");
/// Reads a checkpoint; optionally returns the stored config hash and metadata JSON text.
TensorSet load_checkpoint(const std::filesystem::path& stem, std::string* config_hash = nullptr,
                          std::string* metadata_json = nullptr);

template <typename T>
void export_mlp(const Mlp<T>& mlp, const std::string& prefix, TensorSet& out);
template <typename T>
void import_mlp(Mlp<T>& mlp, const std::string& prefix, const TensorSet& in);

}  // namespace fdd::nn
