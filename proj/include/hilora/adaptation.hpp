// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "hilora/datagen.hpp"
#include "hilora/federation.hpp"
#include "hilora/model.hpp"

namespace hilora {

/// Orthonormal basis of a frozen cluster adapter's B.
struct ClusterRepresentative {
    std::size_t cluster = 0;
    Matrix u;
};

std::vector<ClusterRepresentative> cluster_representatives(const ServerState& server, std::size_t rank);

/// Trains a fresh zero-B probe on top of the frozen root for `steps`
/// full-batch steps and returns the orthonormal basis of its B. Throws
/// DegenerateInputError if B is still numerically zero.
Matrix probe_basis(const HeadModel& model, const LoraAdapter& root, std::span<const Sample> data, int steps,
                   double lr, std::size_t rank, std::uint64_t seed);

/// argmax_j ‖u_uᵀ u_j‖_F² / r; ties go to the lowest index.
std::size_t assign_cluster(const Matrix& u_u, std::span<const ClusterRepresentative> reps);

struct AdaptationOptions {
    int probe_steps = 20;
    /// 0 uses the federation learning rate.
    double probe_lr = 0.0;
    int epochs = 5;
};

struct AdaptationResult {
    std::size_t client_id = 0;
    std::size_t assigned_cluster = 0;
    Matrix probe;
    AdapterPath path;
    /// Test accuracy before fine-tuning, then after each epoch.
    std::vector<double> accuracy;
};

/// Routes an unseen client to a cluster and fine-tunes a fresh leaf on
/// top of the frozen root and cluster adapters.
AdaptationResult adapt_unseen(const HeadModel& model, const ClientData& client, const TrainedFederation& fed,
                              const AdaptationOptions& options = {});

}  // namespace hilora
