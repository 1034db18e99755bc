// SPDX-License-Identifier: Apache-2.0
#pragma once

// End-to-end limited-feedback system: trainable pilots, per-user encoder networks emitting the
// feedback message, and a BS-side network mapping all messages to the precoder. Also hosts the
// channel-reconstruction (MSE) network baseline and the shared training loop.

#include "fdd/channel.hpp"
#include "fdd/nn.hpp"
#include "fdd/precoding.hpp"
#include "fdd/quantizer.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <functional>
#include <optional>

namespace fdd {

enum class FeedbackKind { hard_sign, soft_tanh };

struct EncoderSpec {
    std::vector<std::size_t> hidden{1024, 512, 256};
    std::size_t outputs = 30;  // B for hard_sign, S for soft_tanh
    FeedbackKind kind = FeedbackKind::hard_sign;
};

struct DecoderSpec {
    std::vector<std::size_t> hidden{1024, 512, 512};

    static DecoderSpec large_k() { return {{2048, 1024, 512}}; }
};

/// Algorithm-level training constants. `max_epochs == 0` means no cap beyond the patience rule.
struct TrainingSchedule {
    std::size_t batch_size = 1024;
    std::size_t batches_per_epoch = 200;
    std::size_t patience = 300;
    std::size_t validation_size = 10'000;
    std::size_t max_epochs = 0;
    double lr_start = 1e-3;
    double lr_floor = 1e-5;
    double lr_decay = 0.3;
    std::size_t lr_decay_patience = 100;
    double alpha_start = 0.5;
    double alpha_growth = 1.001;
    double alpha_cap = 10.0;

    static TrainingSchedule paper();
    static TrainingSchedule desk();
    void validate() const;
    nlohmann::json to_json() const;
    static TrainingSchedule from_json(const nlohmann::json& j, TrainingSchedule base);
};

struct ModelConfig {
    std::size_t m = 64;
    std::size_t k = 2;
    std::size_t l = 8;
    double power = 10.0;
    double sigma2 = 1.0;
    EncoderSpec encoder;
    DecoderSpec decoder;
    bool shared_encoder = false;

    std::size_t feedback_per_user() const { return encoder.outputs; }
    void validate() const;
    nlohmann::json to_json() const;
    static ModelConfig from_json(const nlohmann::json& j);
};

/// Channels plus the pilot-phase noise that goes with them, fixed once generated.
struct SampleSet {
    ChannelBatch channels;
    std::size_t l = 0;
    double sigma2 = 1.0;
    std::vector<cdouble> noise;  // index (sample * K + user) * L + pilot

    std::size_t size() const { return channels.n; }
    std::size_t users() const { return channels.k; }
    cdouble noise_at(std::size_t sample, std::size_t user, std::size_t pilot) const {
        return noise[(sample * channels.k + user) * l + pilot];
    }
    /// Received pilots of one user of one sample under the given pilot matrix.
    ReceivedPilots received(std::size_t sample, std::size_t user, const PilotMatrix& pilots) const;
};

SampleSet make_sample_set(const ChannelDistribution& dist, const ArrayConfig& cfg, std::size_t k_users, std::size_t l,
                          std::size_t n, double sigma2, RandomStream& channel_rng, RandomStream& noise_rng);

/// Real planes of a contiguous slice of a SampleSet, one block per user.
struct BatchTensors {
    std::size_t n = 0;
    std::vector<Eigen::MatrixXd> hr, hi;  // M x n: column s is h_u of sample s
    std::vector<Eigen::MatrixXd> z;       // 2L x n: [Re z; Im z]
};

BatchTensors to_tensors(const SampleSet& set, std::size_t begin, std::size_t count);

/// Mean sum rate of a batch of precoders given as 2MK x N columns [vec(Re V); vec(Im V)].
/// When `grad` is non-null it receives d(-mean sum rate)/dv.
template <typename T>
double batch_sum_rate(const nn::Mat<T>& v, const BatchTensors& batch, std::size_t m, std::size_t k, double sigma2,
                      nn::Mat<T>* grad = nullptr, std::vector<double>* per_sample = nullptr);

/// Column-major [vec(Re V); vec(Im V)] to an M x K precoder.
PrecodingMatrix unpack_precoder(std::span<const double> v, std::size_t m, std::size_t k, double power);

class TrainingDiverged : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// What the training loop needs from a model.
class Trainable {
  public:
    virtual ~Trainable() = default;
    /// Users per sample drawn for training and validation batches.
    virtual std::size_t batch_users() const = 0;
    virtual std::size_t pilot_length() const = 0;
    virtual double noise_variance() const = 0;
    virtual void set_annealing(double /*alpha*/) {}
    /// One optimizer step on the batch; returns the training loss.
    virtual double train_step(const SampleSet& batch, double lr) = 0;
    /// Validation score, higher is better.
    virtual double validate(const SampleSet& validation) = 0;
    virtual nn::TensorSet snapshot() const = 0;
    virtual void restore(const nn::TensorSet& set) = 0;
};

template <typename T>
class E2EModel : public Trainable {
  public:
    E2EModel(ModelConfig cfg, std::uint64_t init_seed);

    /// K-user model reusing the (frozen) encoder and pilots of the single-user model `single`.
    static E2EModel with_shared_encoder(const E2EModel& single, std::size_t k_users, DecoderSpec decoder,
                                        std::uint64_t init_seed);

    const ModelConfig& config() const { return cfg_; }
    std::string config_hash() const;

    PilotMatrix pilot() const;
    void set_pilot(const PilotMatrix& p);
    void project_pilot();
    /// Fresh decoder with input K * feedback_per_user.
    void reset_decoder(DecoderSpec spec, std::uint64_t init_seed);

    struct Output {
        nn::Mat<T> v;                       // 2MK x N, Tr(VV^H) = P per column
        std::vector<nn::Mat<T>> feedback;   // per user, B x N (or S x N)
    };

    Output forward(const BatchTensors& batch, nn::Mode mode);
    /// Feedback message of user `u` from its own channel and noise only.
    nn::Mat<T> encode_user(std::size_t u, const Eigen::MatrixXd& hr, const Eigen::MatrixXd& hi,
                           const Eigen::MatrixXd& z, nn::Mode mode);
    /// Backpropagates d(-mean sum rate) of the last forward into every gradient buffer; returns the mean sum rate.
    double backward(const BatchTensors& batch, const Output& out);
    void zero_grad();
    std::vector<nn::ParamRef<T>> network_params();
    std::vector<nn::ParamRef<double>> pilot_params();

    /// Inference-mode precoders for set[begin, begin + count).
    std::vector<PrecodingMatrix> precode(const SampleSet& set, std::size_t begin, std::size_t count);
    /// Inference-mode soft or hard feedback values of every user, pooled.
    std::vector<double> pooled_feedback(const SampleSet& set);

    std::size_t batch_users() const override { return cfg_.k; }
    std::size_t pilot_length() const override { return cfg_.l; }
    double noise_variance() const override { return cfg_.sigma2; }
    void set_annealing(double a) override { alpha = a; }
    double train_step(const SampleSet& batch, double lr) override;
    double validate(const SampleSet& validation) override;
    nn::TensorSet snapshot() const override;
    void restore(const nn::TensorSet& set) override;

    Eigen::MatrixXd pilot_re, pilot_im;
    std::vector<nn::Mlp<T>> encoders;  // one per user, or a single shared one
    nn::Mlp<T> decoder;
    /// Soft-feedback quantizer applied to every tanh output before the BS network.
    std::optional<ScalarQuantizer> feedback_quantizer;
    /// Pilots and encoders are held fixed (and run in inference mode) during training.
    bool freeze_users = false;
    /// Replace the hard sign by its smooth surrogate in forward (finite-difference checks only).
    bool smooth_sign = false;
    double alpha = 0.5;

  private:
    struct Tape {
        std::vector<Eigen::MatrixXd> y;        // per encoder group, 2L x cols (double)
        std::vector<nn::Mat<T>> pre;           // encoder outputs before sign/tanh
        std::vector<nn::Mat<T>> act;           // after sign/tanh (before quantization)
        nn::Mat<T> raw;                        // decoder output before normalization
        bool encoders_train = false;
    };

    std::size_t group_of(std::size_t u) const { return cfg_.shared_encoder ? 0 : u; }
    Eigen::MatrixXd pilot_observation(const Eigen::MatrixXd& hr, const Eigen::MatrixXd& hi,
                                      const Eigen::MatrixXd& z) const;
    nn::Mat<T> activate(const nn::Mat<T>& pre) const;

    ModelConfig cfg_;
    Tape tape_;
    Eigen::MatrixXd dpilot_re_, dpilot_im_;
    nn::Adam<T> net_opt_;
    nn::Adam<double> pilot_opt_;
};

/// Channel-reconstruction network: pilots, encoder to B feedback bits, and a BS network producing
/// the 2M real entries of h_hat. One network is shared by all users; trained on E||h_hat - h||^2.
template <typename T>
class ChannelEstimatorModel : public Trainable {
  public:
    ChannelEstimatorModel(ModelConfig cfg, std::uint64_t init_seed);

    const ModelConfig& config() const { return cfg_; }
    std::string config_hash() const;
    PilotMatrix pilot() const;

    /// Estimated channel of every user of set[begin, begin + count), sample-major.
    std::vector<CMatrix> estimate(const SampleSet& set, std::size_t begin, std::size_t count);
    /// Mean ||h_hat - h||^2 per user over the set.
    double mse(const SampleSet& set);

    std::size_t batch_users() const override { return 1; }
    std::size_t pilot_length() const override { return cfg_.l; }
    double noise_variance() const override { return cfg_.sigma2; }
    void set_annealing(double a) override { alpha = a; }
    double train_step(const SampleSet& batch, double lr) override;
    double validate(const SampleSet& validation) override { return -mse(validation); }
    nn::TensorSet snapshot() const override;
    void restore(const nn::TensorSet& set) override;

    Eigen::MatrixXd pilot_re, pilot_im;
    nn::Mlp<T> encoder;
    nn::Mlp<T> decoder;
    double alpha = 0.5;

  private:
    nn::Mat<T> forward(const BatchTensors& batch, nn::Mode mode, std::vector<Eigen::MatrixXd>* y,
                       std::vector<nn::Mat<T>>* pre);

    ModelConfig cfg_;
    nn::Adam<T> net_opt_;
    nn::Adam<double> pilot_opt_;
};

struct EpochRecord {
    std::size_t epoch = 0;
    double lr = 0.0;
    double alpha = 0.0;
    double train_loss = 0.0;
    double validation = 0.0;
    bool best = false;
};

struct TrainingHistory {
    std::vector<EpochRecord> epochs;
    double best_validation = 0.0;
    std::size_t best_epoch = 0;

    nlohmann::json to_json() const;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Online training: every minibatch is freshly drawn from `dist`; the validation set is drawn once.
/// Keeps the best-validating parameters and restores them before returning.
TrainingHistory train(Trainable& model, const TrainingSchedule& schedule, const ChannelDistribution& dist,
                      const ArrayConfig& array, const SeedTree& seeds, const EpochCallback& on_epoch = {});

struct EvaluationResult {
    double mean_sum_rate = 0.0;
    double std_error = 0.0;
    std::vector<double> per_user_mean;
    std::size_t samples = 0;
};

/// Produces precoders for set[begin, begin + count).
using PrecoderPipeline = std::function<std::vector<PrecodingMatrix>(const SampleSet&, std::size_t, std::size_t)>;

EvaluationResult evaluate(const PrecoderPipeline& pipeline, const SampleSet& test, std::size_t chunk = 1024);

/// Checkpoint of a complete model; the model config (and feedback quantizer, if any) rides in the metadata.
template <typename T>
void save_model(const std::filesystem::path& stem, const E2EModel<T>& model, const nlohmann::json& extra = {});
template <typename T>
E2EModel<T> load_e2e_model(const std::filesystem::path& stem, nlohmann::json* extra = nullptr);
template <typename T>
void save_model(const std::filesystem::path& stem, const ChannelEstimatorModel<T>& model,
                const nlohmann::json& extra = {});
template <typename T>
ChannelEstimatorModel<T> load_estimator_model(const std::filesystem::path& stem, nlohmann::json* extra = nullptr);

}  // namespace fdd
