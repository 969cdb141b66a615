// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <variant>
#include <vector>

#include "hilora/model.hpp"

namespace hilora {

/// Gaussian-blob pool with generator metadata.
struct LabeledPool {
    std::vector<Sample> samples;
    std::size_t classes = 0;
    std::size_t feature_dim = 0;
    std::vector<std::vector<double>> class_means;
};

namespace partition_spec {
/// Per-client label prior ~ Dirichlet(alpha · 1_C).
struct GlDir {
    double alpha = 0.3;
};
/// Dirichlet over superclasses, then uniform within the superclass.
struct ScDir {
    double alpha = 3.0;
    std::vector<std::size_t> superclass_of;  // empty -> default_superclasses(C)
};
/// Every client owns exactly `classes_per_client` labels.
struct Patho {
    std::size_t classes_per_client = 10;
};
/// Latent groups sharing a label subset and a feature-space rotation.
struct ClusterShift {
    std::size_t k_true = 3;
    double rotation_angle = 0.7853981633974483;
    std::size_t label_subset_size = 4;
};
}  // namespace partition_spec

using PartitionSpec =
    std::variant<partition_spec::GlDir, partition_spec::ScDir, partition_spec::Patho, partition_spec::ClusterShift>;

struct ClientData {
    std::size_t id = 0;
    std::vector<Sample> train;
    std::vector<Sample> test;
    /// Generator group (ClusterShift only).
    std::optional<std::size_t> true_cluster;

    /// n_i, the aggregation size (training samples).
    std::size_t size() const noexcept { return train.size(); }
};

struct FederationData {
    std::vector<ClientData> clients;
    std::vector<ClientData> unseen;
    std::size_t classes = 0;
    std::size_t feature_dim = 0;
    /// Pool samples handed out to clients (train + test, all clients).
    std::size_t distributed = 0;
    /// Seeds tried by split_unseen before every true group kept a participant.
    std::size_t unseen_split_attempts = 0;

    bool has_ground_truth() const;
    /// true_cluster of every participating client; throws if absent.
    std::vector<std::size_t> true_cluster_of() const;
};

/// `per_class` samples per class around means of norm `separation` along
/// random unit directions, with identity covariance.
LabeledPool gen_pool(std::size_t classes, std::size_t dim, std::size_t per_class, double separation,
                     std::uint64_t seed);

/// `groups` equal-width superclasses over C classes (fewer if C < groups).
std::vector<std::size_t> default_superclasses(std::size_t classes, std::size_t groups = 10);

/// Dirichlet(alpha · 1_k) via normalized Gamma(alpha, 1) variates. A draw
/// whose variates all underflow falls back to a one-hot vector.
std::vector<double> sample_dirichlet(std::size_t k, double alpha, std::mt19937_64& rng);

/// Splits the pool across `clients` clients without replacement, then each
/// client 80/20 into train/test. `samples_per_client` = 0 uses pool/N.
///
/// Random streams: derive_seed(seed, {1}) draws priors, group memberships
/// and labels; derive_seed(seed, {2}) shuffles class queues and the
/// train/test split; derive_seed(seed, {3}) draws ClusterShift rotations.
FederationData partition(const LabeledPool& pool, const PartitionSpec& spec, std::size_t clients, std::uint64_t seed,
                         std::size_t samples_per_client = 0);

/// Moves ⌈fraction · N⌉ clients into the unseen set. With ground truth the
/// draw is repeated (seed, seed+1, ...) until every true group keeps at
/// least one participating client.
FederationData split_unseen(FederationData data, double fraction, std::uint64_t seed);

/// Reads `client_id,label,f0..f{d-1}` rows (header required, labels
/// zero-based) and splits each client 80/20 with `seed`.
FederationData load_csv(std::istream& in, std::uint64_t seed);

/// Rotation by `angle` in the plane spanned by orthonormal u, v.
Matrix plane_rotation(std::span<const double> u, std::span<const double> v, double angle);

}  // namespace hilora
