// SPDX-License-Identifier: Apache-2.0

#include "hilora/adaptation.hpp"

#include "hilora/errors.hpp"
#include "hilora/eval.hpp"
#include "hilora/numerics.hpp"
#include "hilora/rng.hpp"

namespace hilora {

namespace {

enum : std::uint64_t { kProbeInit = 50, kUnseenLeafInit = 51, kUnseenLeafLocal = 52 };

}  // namespace

std::vector<ClusterRepresentative> cluster_representatives(const ServerState& server, std::size_t rank) {
    std::vector<ClusterRepresentative> reps;
    reps.reserve(server.clusters.size());
    for (std::size_t j = 0; j < server.clusters.size(); ++j) {
        reps.push_back({j, orthonormal_columns(server.clusters[j].b(), rank)});
    }
    return reps;
}

Matrix probe_basis(const HeadModel& model, const LoraAdapter& root, std::span<const Sample> data, int steps,
                   double lr, std::size_t rank, std::uint64_t seed) {
    if (steps < 1) throw ConfigError("probe_steps: must be at least 1");
    const std::size_t p = model.classes();
    const std::size_t q = model.hidden();
    auto rng = make_rng(seed, {kProbeInit});
    const LoraAdapter zero = zero_adapter(p, q, rank);
    AdapterPath path{root, LoraAdapter::zero_b(p, q, rank, rng), zero, 0, 0};
    const LoraAdapter probe = local_update(model, path, data, tier::Cluster{0}, {}, OptimizerConfig{lr, steps, 0});
    if (frobenius_norm(probe.b()) <= kDegenerateNorm) {
        throw DegenerateInputError("probe adapter stayed at zero; the client's data gives no gradient signal");
    }
    return orthonormal_columns(probe.b(), rank);
}

std::size_t assign_cluster(const Matrix& u_u, std::span<const ClusterRepresentative> reps) {
    if (reps.empty()) throw ConfigError("assign_cluster: no cluster representatives");
    const double r = static_cast<double>(u_u.cols());
    std::size_t best = reps[0].cluster;
    double best_score = -1.0;
    for (const auto& rep : reps) {
        const double score = subspace_overlap(u_u, rep.u) / r;
        if (score > best_score) {
            best_score = score;
            best = rep.cluster;
        }
    }
    return best;
}

AdaptationResult adapt_unseen(const HeadModel& model, const ClientData& client, const TrainedFederation& fed,
                              const AdaptationOptions& options) {
    if (options.epochs < 0) throw ConfigError("epochs: must be non-negative");
    if (client.train.empty() || client.test.empty()) {
        throw PreconditionError("unseen client " + std::to_string(client.id) + " needs train and test data");
    }
    const FederationConfig& config = fed.config;
    const std::size_t p = model.classes();
    const std::size_t q = model.hidden();
    const std::uint64_t id = client.id;

    AdaptationResult out;
    out.client_id = client.id;
    const double probe_lr = options.probe_lr > 0.0 ? options.probe_lr : config.lr;
    out.probe = probe_basis(model, fed.server.root, client.train, options.probe_steps, probe_lr, config.rank,
                            derive_seed(config.master_seed, {id}));
    const auto reps = cluster_representatives(fed.server, config.rank);
    out.assigned_cluster = assign_cluster(out.probe, reps);

    const LoraAdapter& cluster = fed.server.clusters.at(out.assigned_cluster);
    auto init_rng = make_rng(config.master_seed, {kUnseenLeafInit, id});
    out.path = AdapterPath{fed.server.root, cluster,
                           LoraAdapter::zero_b(p, q, config.rank, init_rng, config.init_scale),
                           out.assigned_cluster, 0};
    const std::vector<PenaltyTerm> penalties{{fed.server.root.b(), config.gamma_c}, {cluster.b(), config.gamma_l}};
    OptimizerConfig opt = config.optimizer();
    opt.epochs = 1;

    out.accuracy.push_back(accuracy(model, out.path, client.test));
    for (int e = 1; e <= options.epochs; ++e) {
        auto rng = make_rng(config.master_seed, {kUnseenLeafLocal, static_cast<std::uint64_t>(e), id});
        out.path.leaf = local_update(model, out.path, client.train, tier::Leaf{0}, penalties, opt, rng);
        out.accuracy.push_back(accuracy(model, out.path, client.test));
    }
    return out;
}

}  // namespace hilora
