// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "hilora/adaptation.hpp"
#include "hilora/datagen.hpp"
#include "hilora/eval.hpp"
#include "hilora/federation.hpp"
#include "hilora/gradcheck.hpp"
#include "hilora/model.hpp"

namespace hilora {

struct DataSpec {
    /// "generator" or "csv".
    std::string source = "generator";
    std::string csv_path;
    std::size_t classes = 12;
    std::size_t feature_dim = 10;
    std::size_t per_class = 400;
    double separation = 3.0;
    /// Total clients before the unseen split.
    std::size_t clients = 38;
    std::size_t samples_per_client = 100;
    PartitionSpec partition = partition_spec::ClusterShift{};
    /// 0 keeps every client participating.
    double unseen_fraction = 0.2;
};

struct ModelSpec {
    std::size_t hidden = 32;
    double w0_scale = 0.1;
};

struct ExperimentConfig {
    FederationConfig federation;
    DataSpec data;
    ModelSpec model;
    AdaptationOptions adapt;
    GradcheckOptions gradcheck;

    /// Throws ConfigError naming the first invalid field.
    void validate() const;
};

/// Parses a JSON document; absent fields keep their defaults, unknown or
/// mistyped fields throw ConfigError naming the field.
ExperimentConfig parse_config(std::istream& in);
ExperimentConfig load_config(const std::filesystem::path& path);
/// Every field, defaults included.
void write_config(std::ostream& out, const ExperimentConfig& config);

struct Experiment {
    HeadModel model;
    FederationData data;
};

/// Builds the model and the participating/unseen client split. All
/// randomness derives from federation.master_seed.
Experiment build_experiment(const ExperimentConfig& config);

/// {"k_star","sigma","eigenvalues","eigengaps","labels","distance_matrix"}
void write_clustering_json(std::ostream& out, const ClusterAssignment& assignment);
ClusterAssignment read_clustering_json(std::istream& in);

/// File names, relative to the output directory.
namespace artifact {
inline constexpr const char* kConfig = "config.json";
inline constexpr const char* kRoundLog = "round_log.csv";
inline constexpr const char* kMetricsJson = "metrics.json";
inline constexpr const char* kMetricsCsv = "metrics.csv";
inline constexpr const char* kClustering = "clustering.json";
inline constexpr const char* kAdaptCsv = "adapt.csv";
inline constexpr const char* kManifest = "manifest.json";
inline constexpr const char* kCheckpoints = "checkpoints";
}  // namespace artifact

/// Writes root, cluster and leaf adapters under out/checkpoints; returns
/// the relative paths written.
std::vector<std::string> write_checkpoints(const std::filesystem::path& out, const TrainedFederation& fed);

/// Rebuilds the frozen federation from checkpoints and clustering.json.
/// Throws ConfigError if any file is missing or inconsistent.
TrainedFederation load_trained(const std::filesystem::path& out, const ExperimentConfig& config,
                               const FederationData& data);

/// Records `files` in out/manifest.json together with the materialized
/// config, merging with files listed by earlier commands.
void update_manifest(const std::filesystem::path& out, const ExperimentConfig& config, const std::string& command,
                     const std::vector<std::string>& files);

/// The CLI subcommands. Each writes its artifacts under `out` and returns
/// their relative paths.
std::vector<std::string> command_run(const ExperimentConfig& config, const std::filesystem::path& out);
std::vector<std::string> command_cluster_diag(const ExperimentConfig& config, const std::filesystem::path& out);
std::vector<std::string> command_adapt(const ExperimentConfig& config, const std::filesystem::path& out);
std::vector<std::string> command_report(const ExperimentConfig& config, const std::filesystem::path& out);

}  // namespace hilora
