// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <iosfwd>
#include <optional>
#include <span>
#include <vector>

#include "hilora/federation.hpp"
#include "hilora/model.hpp"

namespace hilora {

/// Fraction of argmax-correct predictions; ties go to the lowest class.
double accuracy(const HeadModel& model, const AdapterPath& path, std::span<const Sample> test);

/// Mean of the lowest ⌈0.1·N⌉ values.
double worst_decile(std::span<const double> values);

struct TierGains {
    /// Over the pooled train data of the client's cluster.
    double g_c = 0.0;
    /// g_c evaluated on the client's own train data.
    double g_c_own = 0.0;
    double g_l = 0.0;
    /// L(root) − L(root+cluster+leaf) on the client's own data.
    double total_own = 0.0;
};

/// Loss reductions contributed by the cluster and leaf tiers of client i.
TierGains tier_gains(const HeadModel& model, const TrainedFederation& fed, const FederationData& data,
                     std::size_t client);

struct ClusteringQuality {
    double ari = 0.0;
    double nmi = 0.0;
};

/// Adjusted Rand Index and arithmetic-mean Normalized Mutual Information.
ClusteringQuality clustering_quality(std::span<const std::size_t> labels, std::span<const std::size_t> truth);

struct OverlapSummary {
    double mean = 0.0;
    double max = 0.0;
    std::size_t count = 0;
};

struct OrthogonalityReport {
    OverlapSummary root_leaf;
    OverlapSummary cluster_leaf;
    OverlapSummary root_cluster;
    /// Paths skipped because a tier's B was numerically zero.
    std::size_t excluded_leaves = 0;
    std::size_t excluded_clusters = 0;
};

/// Normalized overlap ‖UᵀV‖_F²/r between orthonormalized B bases along
/// every client path.
OrthogonalityReport orthogonality_report(const TrainedFederation& fed);

struct ClientMetrics {
    std::size_t client_id = 0;
    std::size_t cluster = 0;
    double acc = 0.0;
    double acc_root = 0.0;
    double acc_cluster = 0.0;
    TierGains gains;
};

struct MetricsReport {
    std::vector<ClientMetrics> clients;
    double mean_acc = 0.0;
    double worst_decile_acc = 0.0;
    double mean_acc_root = 0.0;
    double mean_acc_cluster = 0.0;
    /// Mean accuracy per cluster.
    std::vector<double> group_means;
    OrthogonalityReport orthogonality;
    std::optional<ClusteringQuality> clustering;
};

MetricsReport evaluate(const HeadModel& model, const TrainedFederation& fed, const FederationData& data,
                       int workers = 1);

/// client_id,cluster,acc,G_c,G_l
void write_metrics_csv(std::ostream& out, const MetricsReport& report);
void write_metrics_json(std::ostream& out, const MetricsReport& report);

}  // namespace hilora
