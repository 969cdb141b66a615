// SPDX-License-Identifier: Apache-2.0

#include "hilora/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <ostream>
#include <string>

#include <json.hpp>

#include "hilora/errors.hpp"
#include "hilora/numerics.hpp"
#include "parallel.hpp"

namespace hilora {

namespace {

// B factors below this norm carry no usable subspace.
constexpr double kNegligibleB = 1e-10;

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

AdapterPath root_only(const AdapterPath& path) {
    const LoraAdapter zero = zero_adapter(path.root.p(), path.root.q(), path.root.rank());
    return AdapterPath{path.root, zero, zero, path.cluster_index, path.client_index};
}

AdapterPath without_leaf(const AdapterPath& path) {
    const LoraAdapter zero = zero_adapter(path.leaf.p(), path.leaf.q(), path.leaf.rank());
    return AdapterPath{path.root, path.cluster, zero, path.cluster_index, path.client_index};
}

void add(OverlapSummary& s, double v) {
    s.mean += v;
    s.max = std::max(s.max, v);
    ++s.count;
}

void finish(OverlapSummary& s) {
    if (s.count > 0) s.mean /= static_cast<double>(s.count);
}

double comb2(double n) { return n * (n - 1.0) / 2.0; }

nlohmann::ordered_json summary_json(const OverlapSummary& s) {
    return {{"mean", s.mean}, {"max", s.max}, {"count", s.count}};
}

}  // namespace

double accuracy(const HeadModel& model, const AdapterPath& path, std::span<const Sample> test) {
    if (test.empty()) throw PreconditionError("accuracy: empty test set");
    const Matrix weight = compose_path(path, model.w0());
    std::size_t correct = 0;
    for (const Sample& s : test) {
        const auto logits = logits_for_weight(model, weight, s.x);
        const auto best = std::max_element(logits.begin(), logits.end());
        if (static_cast<std::size_t>(best - logits.begin()) == s.y) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(test.size());
}

double worst_decile(std::span<const double> values) {
    if (values.empty()) throw PreconditionError("worst_decile: empty list");
    std::vector<double> sorted(values.begin(), values.end());
    std::sort(sorted.begin(), sorted.end());
    const auto k = static_cast<std::size_t>(std::ceil(0.1 * static_cast<double>(sorted.size())));
    double total = 0.0;
    for (std::size_t i = 0; i < k; ++i) total += sorted[i];
    return total / static_cast<double>(k);
}

TierGains tier_gains(const HeadModel& model, const TrainedFederation& fed, const FederationData& data,
                     std::size_t client) {
    if (client >= fed.clients.size() || client >= data.clients.size()) {
        throw ConfigError("tier_gains: no trained state for client " + std::to_string(client));
    }
    if (fed.server.clusters.empty()) throw ConfigError("tier_gains: missing cluster snapshot");
    const AdapterPath full = fed.path(client);
    const AdapterPath r = root_only(full);
    const AdapterPath rc = without_leaf(full);

    std::vector<Sample> pooled;
    for (std::size_t m : fed.server.assignment.members(full.cluster_index)) {
        const auto& train = data.clients.at(m).train;
        pooled.insert(pooled.end(), train.begin(), train.end());
    }
    const auto& own = data.clients[client].train;

    TierGains g;
    g.g_c = dataset_loss(model, r, pooled) - dataset_loss(model, rc, pooled);
    const double l_r = dataset_loss(model, r, own);
    const double l_rc = dataset_loss(model, rc, own);
    const double l_rcl = dataset_loss(model, full, own);
    g.g_c_own = l_r - l_rc;
    g.g_l = l_rc - l_rcl;
    g.total_own = l_r - l_rcl;
    return g;
}

ClusteringQuality clustering_quality(std::span<const std::size_t> labels, std::span<const std::size_t> truth) {
    if (labels.size() != truth.size()) throw ConfigError("clustering_quality: label vectors differ in length");
    const double n = static_cast<double>(labels.size());
    if (labels.empty()) return {1.0, 1.0};

    std::map<std::pair<std::size_t, std::size_t>, double> joint;
    std::map<std::size_t, double> a;
    std::map<std::size_t, double> b;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        joint[{labels[i], truth[i]}] += 1.0;
        a[labels[i]] += 1.0;
        b[truth[i]] += 1.0;
    }

    double sum_joint = 0.0;
    double sum_a = 0.0;
    double sum_b = 0.0;
    for (const auto& [_, c] : joint) sum_joint += comb2(c);
    for (const auto& [_, c] : a) sum_a += comb2(c);
    for (const auto& [_, c] : b) sum_b += comb2(c);
    const double expected = sum_a * sum_b / comb2(n);
    const double max_index = 0.5 * (sum_a + sum_b);
    ClusteringQuality q;
    // Both partitions trivial (all singletons or one block): identical by construction.
    q.ari = max_index == expected ? 1.0 : (sum_joint - expected) / (max_index - expected);

    double mi = 0.0;
    for (const auto& [key, c] : joint) mi += c / n * std::log(c * n / (a[key.first] * b[key.second]));
    double h_a = 0.0;
    double h_b = 0.0;
    for (const auto& [_, c] : a) h_a -= c / n * std::log(c / n);
    for (const auto& [_, c] : b) h_b -= c / n * std::log(c / n);
    const double denom = 0.5 * (h_a + h_b);
    q.nmi = denom <= 0.0 ? 1.0 : std::clamp(mi / denom, 0.0, 1.0);
    return q;
}

OrthogonalityReport orthogonality_report(const TrainedFederation& fed) {
    OrthogonalityReport rep;
    const std::size_t r = fed.config.rank;
    const double rd = static_cast<double>(r);
    const Matrix u_root = orthonormal_columns(fed.server.root.b(), r);
    const bool root_ok = frobenius_norm(fed.server.root.b()) > kNegligibleB;

    std::vector<Matrix> u_cluster;
    std::vector<bool> cluster_ok;
    for (const auto& c : fed.server.clusters) {
        u_cluster.push_back(orthonormal_columns(c.b(), r));
        cluster_ok.push_back(frobenius_norm(c.b()) > kNegligibleB);
    }

    for (const auto& client : fed.clients) {
        const bool c_ok = cluster_ok.at(client.cluster);
        const bool l_ok = frobenius_norm(client.leaf.b()) > kNegligibleB;
        if (!c_ok) ++rep.excluded_clusters;
        if (root_ok && c_ok) add(rep.root_cluster, subspace_overlap(u_root, u_cluster[client.cluster]) / rd);
        if (!l_ok) {
            ++rep.excluded_leaves;
            continue;
        }
        const Matrix u_leaf = orthonormal_columns(client.leaf.b(), r);
        if (root_ok) add(rep.root_leaf, subspace_overlap(u_root, u_leaf) / rd);
        if (c_ok) add(rep.cluster_leaf, subspace_overlap(u_cluster[client.cluster], u_leaf) / rd);
    }
    finish(rep.root_leaf);
    finish(rep.cluster_leaf);
    finish(rep.root_cluster);
    return rep;
}

MetricsReport evaluate(const HeadModel& model, const TrainedFederation& fed, const FederationData& data,
                       int workers) {
    const std::size_t n = fed.clients.size();
    if (n != data.clients.size()) throw ConfigError("evaluate: federation and data disagree on client count");
    MetricsReport report;
    report.clients.resize(n);
    detail::parallel_for(n, workers, [&](std::size_t i) {
        const AdapterPath full = fed.path(i);
        const auto& test = data.clients[i].test;
        ClientMetrics& m = report.clients[i];
        m.client_id = fed.clients[i].id;
        m.cluster = fed.clients[i].cluster;
        m.acc = accuracy(model, full, test);
        m.acc_root = accuracy(model, root_only(full), test);
        m.acc_cluster = accuracy(model, without_leaf(full), test);
        m.gains = tier_gains(model, fed, data, i);
    });

    std::vector<double> accs;
    std::vector<double> group_sum(fed.server.clusters.size(), 0.0);
    std::vector<double> group_count(fed.server.clusters.size(), 0.0);
    for (const auto& m : report.clients) {
        accs.push_back(m.acc);
        report.mean_acc += m.acc;
        report.mean_acc_root += m.acc_root;
        report.mean_acc_cluster += m.acc_cluster;
        group_sum.at(m.cluster) += m.acc;
        group_count[m.cluster] += 1.0;
    }
    if (n > 0) {
        report.mean_acc /= static_cast<double>(n);
        report.mean_acc_root /= static_cast<double>(n);
        report.mean_acc_cluster /= static_cast<double>(n);
        report.worst_decile_acc = worst_decile(accs);
    }
    for (std::size_t j = 0; j < group_sum.size(); ++j) {
        report.group_means.push_back(group_count[j] > 0.0 ? group_sum[j] / group_count[j] : 0.0);
    }
    report.orthogonality = orthogonality_report(fed);
    if (data.has_ground_truth()) {
        const std::vector<std::size_t> truth = data.true_cluster_of();
        report.clustering = clustering_quality(fed.server.assignment.label_of, truth);
    }
    return report;
}

void write_metrics_csv(std::ostream& out, const MetricsReport& report) {
    out << "client_id,cluster,acc,G_c,G_l\n";
    for (const auto& m : report.clients) {
        out << m.client_id << ',' << m.cluster << ',' << fmt(m.acc) << ',' << fmt(m.gains.g_c) << ','
            << fmt(m.gains.g_l) << '\n';
    }
}

void write_metrics_json(std::ostream& out, const MetricsReport& report) {
    nlohmann::ordered_json j;
    nlohmann::ordered_json clients = nlohmann::ordered_json::array();
    for (const auto& m : report.clients) {
        clients.push_back({{"client_id", m.client_id},
                           {"cluster", m.cluster},
                           {"acc", m.acc},
                           {"acc_root", m.acc_root},
                           {"acc_cluster", m.acc_cluster},
                           {"G_c", m.gains.g_c},
                           {"G_c_own", m.gains.g_c_own},
                           {"G_l", m.gains.g_l}});
    }
    j["mean_acc"] = report.mean_acc;
    j["worst_decile_acc"] = report.worst_decile_acc;
    j["mean_acc_root"] = report.mean_acc_root;
    j["mean_acc_cluster"] = report.mean_acc_cluster;
    j["group_means"] = report.group_means;
    j["orthogonality"] = {{"root_leaf", summary_json(report.orthogonality.root_leaf)},
                          {"cluster_leaf", summary_json(report.orthogonality.cluster_leaf)},
                          {"root_cluster", summary_json(report.orthogonality.root_cluster)},
                          {"excluded_leaves", report.orthogonality.excluded_leaves},
                          {"excluded_clusters", report.orthogonality.excluded_clusters}};
    if (report.clustering) j["clustering"] = {{"ari", report.clustering->ari}, {"nmi", report.clustering->nmi}};
    j["clients"] = std::move(clients);
    out << j.dump(2) << '\n';
}

}  // namespace hilora
