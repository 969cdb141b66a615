// SPDX-License-Identifier: Apache-2.0

// hilora: run, inspect and evaluate hierarchical federated LoRA simulations.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "hilora/errors.hpp"
#include "hilora/experiment.hpp"
#include "hilora/gradcheck.hpp"

namespace fs = std::filesystem;

namespace {

struct Options {
    std::string config;
    std::optional<int> workers;
    std::optional<std::uint64_t> seed;
    std::string out = "hilora-out";
};

void add_common(CLI::App* cmd, Options& o) {
    cmd->add_option("--config", o.config, "experiment config (JSON)");
    cmd->add_option("--workers", o.workers, "OpenMP threads for per-client work")->check(CLI::PositiveNumber);
    cmd->add_option("--seed", o.seed, "override federation.master_seed");
    cmd->add_option("--out", o.out, "output directory");
}

// Falls back to the config materialized in the output directory.
hilora::ExperimentConfig resolve_config(const Options& o, bool allow_saved) {
    hilora::ExperimentConfig config;
    if (!o.config.empty()) {
        config = hilora::load_config(o.config);
    } else if (allow_saved && fs::exists(fs::path(o.out) / hilora::artifact::kConfig)) {
        config = hilora::load_config(fs::path(o.out) / hilora::artifact::kConfig);
    }
    if (o.workers) config.federation.workers = *o.workers;
    if (o.seed) config.federation.master_seed = *o.seed;
    config.validate();
    return config;
}

void list(const fs::path& out, const std::vector<std::string>& files) {
    std::size_t checkpoints = 0;
    for (const auto& f : files) {
        if (f.starts_with(hilora::artifact::kCheckpoints)) {
            ++checkpoints;
        } else {
            std::cout << "wrote " << (out / f).string() << '\n';
        }
    }
    if (checkpoints > 0) {
        std::cout << "wrote " << checkpoints << " checkpoints under " << (out / hilora::artifact::kCheckpoints).string()
                  << '\n';
    }
    std::cout << "manifest: " << (out / hilora::artifact::kManifest).string() << '\n';
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Hierarchical federated LoRA simulator"};
    app.require_subcommand(1);
    Options o;

    auto* run = app.add_subcommand("run", "train root, cluster and leaf tiers; write logs, metrics and checkpoints");
    auto* diag = app.add_subcommand("cluster-diag", "run the root stage and write the clustering diagnostics");
    auto* adapt = app.add_subcommand("adapt", "route and fine-tune the held-out clients against saved checkpoints");
    auto* grad = app.add_subcommand("gradcheck", "compare analytic gradients with central differences");
    auto* report = app.add_subcommand("report", "recompute metrics from saved checkpoints");
    for (auto* cmd : {run, diag, adapt, grad, report}) add_common(cmd, o);

    CLI11_PARSE(app, argc, argv);

    try {
        const fs::path out(o.out);
        if (run->parsed()) {
            list(out, hilora::command_run(resolve_config(o, false), out));
        } else if (diag->parsed()) {
            const auto files = hilora::command_cluster_diag(resolve_config(o, false), out);
            list(out, files);
        } else if (adapt->parsed()) {
            list(out, hilora::command_adapt(resolve_config(o, true), out));
        } else if (report->parsed()) {
            list(out, hilora::command_report(resolve_config(o, true), out));
        } else if (grad->parsed()) {
            const auto config = resolve_config(o, false);
            const auto result = hilora::run_gradcheck(config.gradcheck);
            std::printf("configurations: %zu\nmax relative error: %.3e\n", result.cases.size(), result.max_rel_error);
            if (result.max_rel_error > 1e-4) {
                std::fprintf(stderr, "gradcheck: max relative error exceeds 1e-4\n");
                return 1;
            }
        }
    } catch (const hilora::ConfigError& e) {
        std::cerr << "hilora: configuration error: " << e.what() << '\n';
        return 2;
    } catch (const hilora::StageError& e) {
        std::cerr << "hilora: " << e.what() << '\n';
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "hilora: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
