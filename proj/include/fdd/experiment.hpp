// SPDX-License-Identifier: Apache-2.0
#pragma once

// JSON-configured sweeps over (K, B, test L_p), result rows, CSV and manifest output,
// and a checkpoint cache keyed by the SHA-256 of each model's canonical description.

#include "fdd/generalize.hpp"
#include "fdd/sparse.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

namespace fdd {

/// Invalid experiment configuration; `fields` lists every offending key.
class ConfigError : public std::invalid_argument {
  public:
    ConfigError(const std::string& what, std::vector<std::string> fields)
        : std::invalid_argument(what), fields(std::move(fields)) {}
    std::vector<std::string> fields;
};

class MissingCheckpointError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

enum class Preset { desk, paper };

struct PresetWidths {
    EncoderSpec encoder;
    DecoderSpec decoder;
    DecoderSpec decoder_large_k;
    TrainingSchedule schedule;
};

PresetWidths preset_widths(Preset p);
Preset parse_preset(const std::string& s);
std::string to_string(Preset p);

/// Known method names, in canonical order.
const std::vector<std::string>& known_methods();
/// True for methods that need no trained state.
bool is_training_free(const std::string& method);

struct ExperimentConfig {
    std::size_t m = 16;
    std::vector<std::size_t> k_list{2};
    std::size_t l = 8;
    std::vector<std::size_t> b_list{30};
    double snr_db = 10.0;
    double sigma2 = 1.0;
    std::vector<std::size_t> lp_train{2};
    /// Test points, one L_p each; empty means a single point drawn like the training data.
    std::vector<std::size_t> lp_test;
    double aod_low_deg = -30.0;
    double aod_high_deg = 30.0;
    double spacing_over_lambda = 0.5;
    std::vector<std::string> methods{"proposed"};
    Preset preset = Preset::desk;
    nlohmann::json schedule_overrides = nlohmann::json::object();
    std::uint64_t seed = 1;
    std::size_t test_size = 10'000;
    std::size_t soft_s = 10;
    std::size_t omp_grid = 1024;
    /// Paths estimated / fed back by the parametric baselines; 0 means the largest test L_p.
    std::size_t baseline_lp = 0;
    std::size_t quantizer_training_samples = 1'000'000;
    std::string out_dir = "out";

    /// Parses and validates; every problem is reported at once through ConfigError.
    static ExperimentConfig from_json(const nlohmann::json& j);
    nlohmann::json to_json() const;
    /// Throws ConfigError listing all offending fields.
    void validate() const;
    /// SHA-256 of the canonical JSON (output directory excluded).
    std::string hash() const;

    double power() const { return sigma2 * std::pow(10.0, snr_db / 10.0); }
    TrainingSchedule schedule() const;
    ArrayConfig array() const { return {m, spacing_over_lambda}; }
    ChannelDistribution train_distribution() const;
    /// Test distribution of one grid point (lp == 0: the training distribution).
    ChannelDistribution test_distribution(std::size_t lp) const;
    std::vector<std::size_t> test_points() const;
    std::size_t effective_baseline_lp(std::size_t test_lp) const;
};

struct ResultRow {
    std::string method;
    std::size_t m = 0, k = 0, l = 0, b = 0;
    std::string lp;  // test L_p, or the training set joined by ';'
    double snr_db = 0.0;
    std::uint64_t seed = 0;
    double sum_rate = 0.0;
    double sum_rate_se = 0.0;
    std::vector<double> user_rates;
    std::size_t test_size = 0;

    friend bool operator==(const ResultRow&, const ResultRow&) = default;
};

const std::string& csv_header();
std::string to_csv(const std::vector<ResultRow>& rows);
std::vector<ResultRow> parse_csv(const std::string& text);

enum class RunMode {
    full,        // train what is missing, then evaluate
    train_only,  // populate the checkpoint cache, no evaluation
    eval_only,   // evaluate from cached checkpoints; missing ones are an error
    baseline     // training-free methods only
};

struct RunSummary {
    std::vector<ResultRow> rows;
    std::vector<std::string> checkpoints;
    nlohmann::json manifest;
};

using ProgressSink = std::function<void(const std::string&)>;

/// Runs every grid point of `cfg` and writes `<out>/results.csv` and `<out>/manifest.json`
/// (train_only writes only the manifest).
RunSummary run_experiment(const ExperimentConfig& cfg, RunMode mode, const ProgressSink& progress = {});

/// Fits the parametric-feedback and soft-output quantizers the config needs and writes them
/// under `<out>/quantizers/`; returns the written paths.
std::vector<std::string> fit_quantizers(const ExperimentConfig& cfg, const ProgressSink& progress = {});

/// Precoders from estimated channels (K x M, rows h_hat^H). ZF falls back to MRT on a singular
/// estimate, and a zero estimate yields the zero precoder.
PrecodingMatrix precode_from_estimate(const CMatrix& h_hat, bool zero_forcing, double power);

std::string git_describe();

}  // namespace fdd
