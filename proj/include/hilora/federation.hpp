// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hilora/clustering.hpp"
#include "hilora/datagen.hpp"
#include "hilora/lora.hpp"
#include "hilora/model.hpp"

namespace hilora {

enum class AggregationMode { ProductSvd, SeparateAverage };

struct FederationConfig {
    std::size_t rank = 2;
    double gamma_c = 1.0;
    double gamma_l = 1.0;
    double lambda = 0.9;
    double tau_rel = 1e-3;
    double eps = 1e-8;
    int t_root = 20;
    int t_cluster = 20;
    int t_leaf = 10;
    /// t_root + t_cluster + t_leaf must equal this.
    int total_budget = 50;
    double lr = 0.05;
    int local_epochs = 1;
    /// 0 selects deterministic full-batch descent.
    std::size_t batch_size = 16;
    std::size_t k_min = 2;
    /// 0 means min(10, N − 1).
    std::size_t k_max = 0;
    AggregationMode aggregation = AggregationMode::ProductSvd;
    std::uint64_t master_seed = 0;
    double init_scale = 0.01;
    /// OpenMP threads for per-client work; results do not depend on it.
    int workers = 1;

    /// Throws ConfigError naming the first invalid field.
    void validate() const;
    OptimizerConfig optimizer() const { return {lr, local_epochs, batch_size}; }
};

enum class StopReason { Budget, Criterion };

struct StageReport {
    std::string stage;  // "root", "cluster" or "leaf"
    /// Cluster index (cluster stage) or client index (leaf stage).
    std::optional<std::size_t> unit;
    std::vector<double> rho;
    std::vector<double> weighted_train_loss;
    StopReason stop_reason = StopReason::Budget;

    std::size_t rounds() const noexcept { return rho.size(); }
};

struct ServerState {
    LoraAdapter root;
    std::vector<LoraAdapter> clusters;
    ClusterAssignment assignment;
};

struct ClientState {
    std::size_t id = 0;
    std::size_t cluster = 0;
    LoraAdapter leaf;
};

struct TrainedFederation {
    FederationConfig config;
    ServerState server;
    std::vector<ClientState> clients;
    StageReport root_report;
    std::vector<StageReport> cluster_reports;
    std::vector<StageReport> leaf_reports;

    /// Root rounds plus the longest cluster and leaf runs.
    int rounds_executed() const;
    /// The three frozen tiers on client i's route.
    AdapterPath path(std::size_t client) const;
};

struct StopCheck {
    bool stop = false;
    double rho = 0.0;
};

std::vector<double> weights_root(std::span<const std::size_t> sizes);
/// Weights over `members` only, in member order.
std::vector<double> weights_cluster(std::span<const std::size_t> members, std::span<const std::size_t> sizes);

/// Σ π_i B_i A_i
Matrix aggregate_product(std::span<const LoraAdapter> locals, std::span<const double> weights);
/// (Σ π_i B_i, Σ π_i A_i), the separate-averaging baseline.
LoraAdapter aggregate_separate(std::span<const LoraAdapter> locals, std::span<const double> weights);
/// (U_r, Σ_r V_rᵀ) from the rank-r truncated SVD of delta.
LoraAdapter refactor(const Matrix& delta, std::size_t r);

/// ρ = ‖new − prev‖_F / (‖prev‖_F + eps); stop iff ρ <= tau_rel.
StopCheck stop_check(const Matrix& delta_prev, const Matrix& delta_new, double tau_rel, double eps);

/// An all-zero (p x r, r x q) adapter standing in for an absent tier.
LoraAdapter zero_adapter(std::size_t p, std::size_t q, std::size_t rank);

struct RootStageResult {
    LoraAdapter root;
    StageReport report;
    BasisTracker tracker;
};

RootStageResult run_root_stage(const FederationConfig& config, const HeadModel& model, const FederationData& data);

struct ClusterStageResult {
    std::vector<LoraAdapter> clusters;
    std::vector<StageReport> reports;
};

ClusterStageResult run_cluster_stage(const FederationConfig& config, const HeadModel& model,
                                     const FederationData& data, const ClusterAssignment& assignment,
                                     const LoraAdapter& root);

struct LeafStageResult {
    std::vector<LoraAdapter> leaves;
    std::vector<StageReport> reports;
};

LeafStageResult run_leaf_stage(const FederationConfig& config, const HeadModel& model, const FederationData& data,
                               const ServerState& server);

/// Clusters the tracked root-stage bases. Fewer than three participants,
/// or an empty eigengap range, yields a single degenerate cluster.
ClusterAssignment assign_clusters(const FederationConfig& config, const BasisTracker& tracker, std::size_t n_clients);

/// Root stage, clustering, cluster stage, leaf stage. Failures are
/// rethrown as StageError tagged with the failing stage.
TrainedFederation run_protocol(const FederationConfig& config, const HeadModel& model, const FederationData& data);

/// Round log as CSV: stage,round,cluster,rho,weighted_train_loss,stopped.
/// Leaf rows aggregate over clients: max ρ and mean loss, with clients that
/// stopped early carrying their last value forward.
void write_round_log(std::ostream& out, const TrainedFederation& fed);

}  // namespace hilora
