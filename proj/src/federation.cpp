// SPDX-License-Identifier: Apache-2.0

#include "hilora/federation.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numeric>
#include <ostream>

#include "hilora/errors.hpp"
#include "hilora/numerics.hpp"
#include "hilora/rng.hpp"
#include "parallel.hpp"

namespace hilora {

namespace {

// Stream keys for derive_seed.
enum : std::uint64_t {
    kRootInit = 10,
    kRootLocal = 11,
    kClusterInit = 20,
    kClusterLocal = 21,
    kLeafInit = 30,
    kLeafLocal = 31,
    kClusteringSeed = 40,
};

constexpr double kWeightTolerance = 1e-12;

void check_weights(std::span<const LoraAdapter> locals, std::span<const double> weights, const char* op) {
    if (locals.empty()) throw ConfigError(std::string(op) + ": no local adapters");
    if (locals.size() != weights.size()) throw ConfigError(std::string(op) + ": one weight per adapter required");
    const double total = std::accumulate(weights.begin(), weights.end(), 0.0);
    if (std::abs(total - 1.0) > kWeightTolerance) throw PreconditionError(std::string(op) + ": weights must sum to 1");
    for (const auto& l : locals) {
        if (l.p() != locals[0].p() || l.q() != locals[0].q() || l.rank() != locals[0].rank()) {
            throw ConfigError(std::string(op) + ": adapters disagree on dimensions");
        }
    }
}

std::vector<std::size_t> train_sizes(const FederationData& data) {
    std::vector<std::size_t> sizes;
    sizes.reserve(data.clients.size());
    for (const auto& c : data.clients) sizes.push_back(c.size());
    return sizes;
}

LoraAdapter aggregate(const FederationConfig& config, std::span<const LoraAdapter> locals,
                      std::span<const double> weights) {
    if (config.aggregation == AggregationMode::SeparateAverage) return aggregate_separate(locals, weights);
    return refactor(aggregate_product(locals, weights), config.rank);
}

AdapterPath make_path(const LoraAdapter& root, const LoraAdapter& cluster, const LoraAdapter& leaf,
                      std::size_t cluster_index, std::size_t client_index) {
    return AdapterPath{root, cluster, leaf, cluster_index, client_index};
}

double weighted_loss(const HeadModel& model, const FederationData& data, std::span<const std::size_t> members,
                     std::span<const double> weights, int workers,
                     const std::function<AdapterPath(std::size_t)>& path_of) {
    std::vector<double> losses(members.size());
    detail::parallel_for(members.size(), workers, [&](std::size_t k) {
        losses[k] = dataset_loss(model, path_of(members[k]), data.clients[members[k]].train);
    });
    double total = 0.0;
    for (std::size_t k = 0; k < members.size(); ++k) total += weights[k] * losses[k];
    return total;
}

void check_participants(const FederationData& data, const HeadModel& model) {
    if (data.clients.empty()) throw ConfigError("federation has no participating clients");
    for (const auto& c : data.clients)
        if (c.train.empty()) throw PreconditionError("client " + std::to_string(c.id) + " has no training data");
    if (data.feature_dim != model.backbone().input_dim() || data.classes > model.classes()) {
        throw ConfigError("federation data does not match the model (features or classes)");
    }
}

}  // namespace

void FederationConfig::validate() const {
    auto fail = [](const std::string& field, const std::string& rule) { throw ConfigError(field + ": " + rule); };
    if (rank == 0) fail("rank", "must be positive");
    if (!(gamma_c >= 0.0)) fail("gamma_c", "must be non-negative");
    if (!(gamma_l >= 0.0)) fail("gamma_l", "must be non-negative");
    if (!(lambda > 0.0 && lambda < 1.0)) fail("lambda", "must lie in (0, 1)");
    if (!(tau_rel > 0.0)) fail("tau_rel", "must be positive");
    if (!(eps > 0.0)) fail("eps", "must be positive");
    if (t_root < 0 || t_cluster < 0 || t_leaf < 0) fail("t_root/t_cluster/t_leaf", "must be non-negative");
    if (t_root == 0) fail("t_root", "must be positive (clustering needs root rounds)");
    if (t_root + t_cluster + t_leaf != total_budget) {
        fail("total_budget", "t_root + t_cluster + t_leaf (" + std::to_string(t_root + t_cluster + t_leaf) +
                                 ") must equal total_budget (" + std::to_string(total_budget) + ")");
    }
    if (!(lr > 0.0)) fail("lr", "must be positive");
    if (local_epochs <= 0) fail("local_epochs", "must be positive");
    if (k_min < 2) fail("k_min", "must be at least 2");
    if (k_max != 0 && k_max < k_min) fail("k_max", "must be >= k_min (or 0 for automatic)");
    if (!(init_scale > 0.0)) fail("init_scale", "must be positive");
    if (workers < 1) fail("workers", "must be at least 1");
}

int TrainedFederation::rounds_executed() const {
    int total = static_cast<int>(root_report.rounds());
    std::size_t longest = 0;
    for (const auto& r : cluster_reports) longest = std::max(longest, r.rounds());
    total += static_cast<int>(longest);
    longest = 0;
    for (const auto& r : leaf_reports) longest = std::max(longest, r.rounds());
    return total + static_cast<int>(longest);
}

AdapterPath TrainedFederation::path(std::size_t client) const {
    const ClientState& c = clients.at(client);
    return make_path(server.root, server.clusters.at(c.cluster), c.leaf, c.cluster, client);
}

std::vector<double> weights_root(std::span<const std::size_t> sizes) {
    if (sizes.empty()) throw ConfigError("weights_root: no clients");
    double total = 0.0;
    for (std::size_t n : sizes) {
        if (n == 0) throw PreconditionError("weights_root: every client needs n_i > 0");
        total += static_cast<double>(n);
    }
    std::vector<double> w;
    w.reserve(sizes.size());
    for (std::size_t n : sizes) w.push_back(static_cast<double>(n) / total);
    return w;
}

std::vector<double> weights_cluster(std::span<const std::size_t> members, std::span<const std::size_t> sizes) {
    std::vector<std::size_t> sub;
    sub.reserve(members.size());
    for (std::size_t m : members) {
        if (m >= sizes.size()) throw ConfigError("weights_cluster: member index out of range");
        sub.push_back(sizes[m]);
    }
    return weights_root(sub);
}

Matrix aggregate_product(std::span<const LoraAdapter> locals, std::span<const double> weights) {
    check_weights(locals, weights, "aggregate_product");
    Matrix out(locals[0].p(), locals[0].q());
    for (std::size_t i = 0; i < locals.size(); ++i) {
        Matrix d = delta(locals[i]);
        d *= weights[i];
        out += d;
    }
    return out;
}

LoraAdapter aggregate_separate(std::span<const LoraAdapter> locals, std::span<const double> weights) {
    check_weights(locals, weights, "aggregate_separate");
    Matrix b(locals[0].p(), locals[0].rank());
    Matrix a(locals[0].rank(), locals[0].q());
    for (std::size_t i = 0; i < locals.size(); ++i) {
        b += weights[i] * locals[i].b();
        a += weights[i] * locals[i].a();
    }
    return LoraAdapter(std::move(b), std::move(a));
}

LoraAdapter refactor(const Matrix& delta_w, std::size_t r) {
    SvdFactors f = truncated_svd(delta_w, r);
    Matrix a = std::move(f.vt);
    for (std::size_t s = 0; s < a.rows(); ++s)
        for (double& v : a.row(s)) v *= f.singular_values[s];
    return LoraAdapter(std::move(f.u), std::move(a));
}

StopCheck stop_check(const Matrix& delta_prev, const Matrix& delta_new, double tau_rel, double eps) {
    const double rho = frobenius_norm(delta_new - delta_prev) / (frobenius_norm(delta_prev) + eps);
    return {rho <= tau_rel, rho};
}

LoraAdapter zero_adapter(std::size_t p, std::size_t q, std::size_t rank) {
    return LoraAdapter(Matrix(p, rank), Matrix(rank, q));
}

RootStageResult run_root_stage(const FederationConfig& config, const HeadModel& model, const FederationData& data) {
    config.validate();
    check_participants(data, model);
    const std::size_t n = data.clients.size();
    const std::size_t p = model.classes();
    const std::size_t q = model.hidden();
    const auto sizes = train_sizes(data);
    const auto pi = weights_root(sizes);
    std::vector<std::size_t> everyone(n);
    std::iota(everyone.begin(), everyone.end(), std::size_t{0});
    const LoraAdapter zero = zero_adapter(p, q, config.rank);

    auto init_rng = make_rng(config.master_seed, {kRootInit});
    RootStageResult out{LoraAdapter::zero_b(p, q, config.rank, init_rng, config.init_scale), StageReport{},
                        BasisTracker(config.lambda)};
    out.report.stage = "root";
    Matrix prev = delta(out.root);
    std::vector<LoraAdapter> locals(n);

    for (int t = 1; t <= config.t_root; ++t) {
        detail::parallel_for(n, config.workers, [&](std::size_t i) {
            auto rng = make_rng(config.master_seed, {kRootLocal, static_cast<std::uint64_t>(t), i});
            const AdapterPath path = make_path(out.root, zero, zero, 0, i);
            locals[i] = local_update(model, path, data.clients[i].train, tier::Root{}, {}, config.optimizer(), rng);
        });
        for (std::size_t i = 0; i < n; ++i) {
            if (frobenius_norm(locals[i].b()) > kDegenerateNorm) out.tracker.update(i, locals[i].b());
        }
        out.root = aggregate(config, locals, pi);
        const Matrix next = delta(out.root);
        const StopCheck check = stop_check(prev, next, config.tau_rel, config.eps);
        prev = next;
        out.report.rho.push_back(check.rho);
        out.report.weighted_train_loss.push_back(weighted_loss(
            model, data, everyone, pi, config.workers, [&](std::size_t i) { return make_path(out.root, zero, zero, 0, i); }));
        if (check.stop) {
            out.report.stop_reason = StopReason::Criterion;
            break;
        }
    }
    return out;
}

ClusterAssignment assign_clusters(const FederationConfig& config, const BasisTracker& tracker, std::size_t n_clients) {
    const std::size_t k_max = std::min(config.k_max == 0 ? std::size_t{10} : config.k_max,
                                       n_clients == 0 ? std::size_t{0} : n_clients - 1);
    if (n_clients < 3 || k_max < config.k_min) {
        ClusterAssignment single;
        single.k_star = 1;
        single.k_min = config.k_min;
        single.label_of.assign(n_clients, 0);
        single.degenerate = true;
        single.distance = Matrix(n_clients, n_clients);
        single.affinity = Matrix(n_clients, n_clients, 1.0);
        return single;
    }
    return cluster_clients(tracker, n_clients, config.rank, config.k_min, k_max,
                           derive_seed(config.master_seed, {kClusteringSeed}));
}

ClusterStageResult run_cluster_stage(const FederationConfig& config, const HeadModel& model,
                                     const FederationData& data, const ClusterAssignment& assignment,
                                     const LoraAdapter& root) {
    config.validate();
    check_participants(data, model);
    const std::size_t n = data.clients.size();
    if (assignment.label_of.size() != n) throw ConfigError("cluster stage: assignment does not cover every client");
    const std::size_t k = assignment.cluster_count();
    const std::size_t p = model.classes();
    const std::size_t q = model.hidden();
    const auto sizes = train_sizes(data);
    const LoraAdapter zero = zero_adapter(p, q, config.rank);
    const std::vector<PenaltyTerm> penalties{{root.b(), config.gamma_c}};

    ClusterStageResult out;
    std::vector<std::vector<std::size_t>> members(k);
    std::vector<std::vector<double>> pi(k);
    std::vector<Matrix> prev(k);
    std::vector<bool> active(k, true);
    for (std::size_t j = 0; j < k; ++j) {
        members[j] = assignment.members(j);
        if (members[j].empty()) throw PreconditionError("cluster stage: cluster " + std::to_string(j) + " is empty");
        pi[j] = weights_cluster(members[j], sizes);
        auto rng = make_rng(config.master_seed, {kClusterInit, j});
        out.clusters.push_back(LoraAdapter::zero_b(p, q, config.rank, rng, config.init_scale));
        prev[j] = delta(out.clusters[j]);
        StageReport report;
        report.stage = "cluster";
        report.unit = j;
        out.reports.push_back(std::move(report));
    }

    std::vector<LoraAdapter> locals(n);
    for (int t = 1; t <= config.t_cluster; ++t) {
        std::vector<std::size_t> running;
        for (std::size_t i = 0; i < n; ++i)
            if (active[assignment.label_of[i]]) running.push_back(i);
        if (running.empty()) break;

        detail::parallel_for(running.size(), config.workers, [&](std::size_t k_idx) {
            const std::size_t i = running[k_idx];
            const std::size_t j = assignment.label_of[i];
            auto rng = make_rng(config.master_seed, {kClusterLocal, static_cast<std::uint64_t>(t), i});
            const AdapterPath path = make_path(root, out.clusters[j], zero, j, i);
            locals[i] = local_update(model, path, data.clients[i].train, tier::Cluster{j}, penalties,
                                     config.optimizer(), rng);
        });

        for (std::size_t j = 0; j < k; ++j) {
            if (!active[j]) continue;
            std::vector<LoraAdapter> group;
            group.reserve(members[j].size());
            for (std::size_t i : members[j]) group.push_back(locals[i]);
            out.clusters[j] = aggregate(config, group, pi[j]);
            const Matrix next = delta(out.clusters[j]);
            const StopCheck check = stop_check(prev[j], next, config.tau_rel, config.eps);
            prev[j] = next;
            out.reports[j].rho.push_back(check.rho);
            out.reports[j].weighted_train_loss.push_back(
                weighted_loss(model, data, members[j], pi[j], config.workers,
                              [&](std::size_t i) { return make_path(root, out.clusters[j], zero, j, i); }));
            if (check.stop) {
                out.reports[j].stop_reason = StopReason::Criterion;
                active[j] = false;
            }
        }
    }
    return out;
}

LeafStageResult run_leaf_stage(const FederationConfig& config, const HeadModel& model, const FederationData& data,
                               const ServerState& server) {
    config.validate();
    check_participants(data, model);
    const std::size_t n = data.clients.size();
    if (server.assignment.label_of.size() != n) throw ConfigError("leaf stage: assignment does not cover every client");
    const std::size_t p = model.classes();
    const std::size_t q = model.hidden();

    LeafStageResult out;
    out.leaves.resize(n);
    out.reports.resize(n);
    detail::parallel_for(n, config.workers, [&](std::size_t i) {
        const std::size_t j = server.assignment.label_of[i];
        const LoraAdapter& cluster = server.clusters.at(j);
        const std::vector<PenaltyTerm> penalties{{server.root.b(), config.gamma_c}, {cluster.b(), config.gamma_l}};
        auto init_rng = make_rng(config.master_seed, {kLeafInit, i});
        LoraAdapter leaf = LoraAdapter::zero_b(p, q, config.rank, init_rng, config.init_scale);
        StageReport& report = out.reports[i];
        report.stage = "leaf";
        report.unit = i;
        Matrix prev = delta(leaf);
        for (int t = 1; t <= config.t_leaf; ++t) {
            auto rng = make_rng(config.master_seed, {kLeafLocal, static_cast<std::uint64_t>(t), i});
            const AdapterPath path = make_path(server.root, cluster, leaf, j, i);
            leaf = local_update(model, path, data.clients[i].train, tier::Leaf{i}, penalties, config.optimizer(), rng);
            const Matrix next = delta(leaf);
            const StopCheck check = stop_check(prev, next, config.tau_rel, config.eps);
            prev = next;
            report.rho.push_back(check.rho);
            report.weighted_train_loss.push_back(
                dataset_loss(model, make_path(server.root, cluster, leaf, j, i), data.clients[i].train));
            if (check.stop) {
                report.stop_reason = StopReason::Criterion;
                break;
            }
        }
        out.leaves[i] = std::move(leaf);
    });
    return out;
}

TrainedFederation run_protocol(const FederationConfig& config, const HeadModel& model, const FederationData& data) {
    config.validate();
    TrainedFederation fed;
    fed.config = config;

    RootStageResult root;
    try {
        root = run_root_stage(config, model, data);
    } catch (const Error& e) {
        throw StageError("root", e.what());
    }
    fed.server.root = std::move(root.root);
    fed.root_report = std::move(root.report);

    try {
        fed.server.assignment = assign_clusters(config, root.tracker, data.clients.size());
    } catch (const Error& e) {
        throw StageError("clustering", e.what());
    }

    try {
        ClusterStageResult clusters = run_cluster_stage(config, model, data, fed.server.assignment, fed.server.root);
        fed.server.clusters = std::move(clusters.clusters);
        fed.cluster_reports = std::move(clusters.reports);
    } catch (const Error& e) {
        throw StageError("cluster", e.what());
    }

    LeafStageResult leaves;
    try {
        leaves = run_leaf_stage(config, model, data, fed.server);
    } catch (const Error& e) {
        throw StageError("leaf", e.what());
    }
    fed.leaf_reports = std::move(leaves.reports);
    for (std::size_t i = 0; i < data.clients.size(); ++i) {
        fed.clients.push_back(
            ClientState{data.clients[i].id, fed.server.assignment.label_of[i], std::move(leaves.leaves[i])});
    }
    return fed;
}

void write_round_log(std::ostream& out, const TrainedFederation& fed) {
    const auto old_precision = out.precision(std::numeric_limits<double>::max_digits10);
    out << "stage,round,cluster,rho,weighted_train_loss,stopped\n";
    auto row = [&](const char* stage, std::size_t round, const std::string& cluster, double rho, double loss,
                   bool stopped) {
        out << stage << ',' << round << ',' << cluster << ',' << rho << ',' << loss << ',' << (stopped ? 1 : 0) << '\n';
    };
    const auto& rr = fed.root_report;
    for (std::size_t t = 0; t < rr.rounds(); ++t) {
        row("root", t + 1, "", rr.rho[t], rr.weighted_train_loss[t],
            t + 1 == rr.rounds() && rr.stop_reason == StopReason::Criterion);
    }
    for (const auto& cr : fed.cluster_reports) {
        for (std::size_t t = 0; t < cr.rounds(); ++t) {
            row("cluster", t + 1, std::to_string(*cr.unit), cr.rho[t], cr.weighted_train_loss[t],
                t + 1 == cr.rounds() && cr.stop_reason == StopReason::Criterion);
        }
    }

    // Leaf rounds are local; one row per round summarizes every client.
    std::size_t longest = 0;
    for (const auto& lr : fed.leaf_reports) longest = std::max(longest, lr.rounds());
    for (std::size_t t = 0; t < longest; ++t) {
        double rho = 0.0;
        double loss = 0.0;
        double weight = 0.0;
        bool all_stopped = true;
        for (const auto& lr : fed.leaf_reports) {
            if (lr.rounds() == 0) continue;
            const std::size_t at = std::min(t, lr.rounds() - 1);
            if (t < lr.rounds()) rho = std::max(rho, lr.rho[t]);
            loss += lr.weighted_train_loss[at];
            weight += 1.0;
            if (!(lr.stop_reason == StopReason::Criterion && t + 1 >= lr.rounds())) all_stopped = false;
        }
        row("leaf", t + 1, "", rho, weight > 0.0 ? loss / weight : 0.0, all_stopped);
    }
    out.precision(old_precision);
}

}  // namespace hilora
