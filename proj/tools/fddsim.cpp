// SPDX-License-Identifier: Apache-2.0
// fddsim: command-line front end for experiment sweeps.

#include "fdd/experiment.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <fstream>
#include <iostream>

namespace {

struct CommonFlags {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
    std::optional<std::string> preset;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
    cmd->add_option("--config", f.config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
    cmd->add_option("--seed", f.seed, "root seed (overrides the config)");
    cmd->add_option("--out", f.out, "output directory (overrides the config)");
    cmd->add_option("--preset", f.preset, "desk or paper (overrides the config)")
        ->check(CLI::IsMember({"desk", "paper"}));
}

fdd::ExperimentConfig load_config(const CommonFlags& f) {
    std::ifstream in(f.config);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw fdd::ConfigError(std::string("config is not valid JSON: ") + e.what(), {"<root>"});
    }
    if (j.is_object()) {
        if (f.seed) j["seed"] = *f.seed;
        if (f.out) j["out"] = *f.out;
        if (f.preset) j["preset"] = *f.preset;
    }
    return fdd::ExperimentConfig::from_json(j);
}

int fail(const std::string& kind, const std::string& message, const std::vector<std::string>& fields = {}) {
    nlohmann::json err = {{"error", kind}, {"message", message}};
    if (!fields.empty()) err["fields"] = fields;
    std::cerr << err.dump() << '\n';
    return kind == "config" ? 2 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"limited-feedback FDD downlink precoding simulator"};
    app.require_subcommand(1);
    bool quiet = false;
    app.add_flag("-q,--quiet", quiet, "suppress progress output");

    CommonFlags flags;
    struct Sub {
        const char* name;
        const char* help;
    };
    const Sub subs[] = {{"train", "train every learned model the config needs (fills the checkpoint cache)"},
                        {"eval", "evaluate from cached checkpoints only"},
                        {"sweep", "train what is missing and evaluate every grid point"},
                        {"baseline", "evaluate the training-free baselines only"},
                        {"quantfit", "fit and write the quantizers the config needs"}};
    std::vector<CLI::App*> cmds;
    for (const auto& s : subs) {
        cmds.push_back(app.add_subcommand(s.name, s.help));
        cmds.back()->fallthrough();
        add_common(cmds.back(), flags);
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        return fail("usage", e.what());
    }

    const fdd::ProgressSink progress = [quiet](const std::string& s) {
        if (!quiet) std::cerr << s << '\n';
    };
    try {
        const fdd::ExperimentConfig cfg = load_config(flags);
        const std::string name = app.get_subcommands().front()->get_name();
        if (name == "quantfit") {
            for (const auto& p : fdd::fit_quantizers(cfg, progress)) std::cout << p << '\n';
            return 0;
        }
        const fdd::RunMode mode = name == "train"  ? fdd::RunMode::train_only
                                  : name == "eval" ? fdd::RunMode::eval_only
                                  : name == "sweep" ? fdd::RunMode::full
                                                    : fdd::RunMode::baseline;
        const auto summary = fdd::run_experiment(cfg, mode, progress);
        if (mode != fdd::RunMode::train_only) std::cout << fdd::to_csv(summary.rows);
        return 0;
    } catch (const fdd::ConfigError& e) {
        return fail("config", e.what(), e.fields);
    } catch (const fdd::MissingCheckpointError& e) {
        return fail("missing_checkpoint", e.what());
    } catch (const fdd::TrainingDiverged& e) {
        return fail("diverged", e.what());
    } catch (const std::exception& e) {
        return fail("runtime", e.what());
    }
}
