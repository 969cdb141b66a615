// SPDX-License-Identifier: Apache-2.0

// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
// failure. Oracles (Eigen, hand-built matrices, majority maps) are
// independent of the library code under test.

#include <Eigen/Dense>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "hilora/adaptation.hpp"
#include "hilora/clustering.hpp"
#include "hilora/eval.hpp"
#include "hilora/experiment.hpp"
#include "hilora/federation.hpp"
#include "hilora/gradcheck.hpp"
#include "hilora/numerics.hpp"
#include "hilora/rng.hpp"

using namespace hilora;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

struct Outcome {
    bool pass = false;
    std::string detail;
};

int failures = 0;

void report(int id, const char* name, const std::function<Outcome()>& check) {
    const auto t0 = Clock::now();
    Outcome o;
    try {
        o = check();
    } catch (const std::exception& e) {
        o = {false, std::string("threw: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
    std::printf("[%s] criterion %2d %s: %s (%.1f s)\n", o.pass ? "PASS" : "FAIL", id, name, o.detail.c_str(), secs);
    std::fflush(stdout);
    if (!o.pass) ++failures;
}

std::string format(const char* fmt, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, fmt, args...);
    return buf;
}

Matrix random_matrix(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
    std::normal_distribution<double> n(0.0, 1.0);
    Matrix m(rows, cols);
    for (double& v : m.values()) v = n(rng);
    return m;
}

Eigen::MatrixXd to_eigen(const Matrix& m) {
    Eigen::MatrixXd e(m.rows(), m.cols());
    for (std::size_t r = 0; r < m.rows(); ++r)
        for (std::size_t c = 0; c < m.cols(); ++c) e(r, c) = m(r, c);
    return e;
}

// Oracle best rank-r approximation: project onto the top-r eigenvectors of mᵀm.
struct RankOracle {
    Eigen::MatrixXd best;
    double tail_energy = 0.0;
};

RankOracle rank_oracle(const Matrix& m, std::size_t r) {
    const Eigen::MatrixXd e = to_eigen(m);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(e.transpose() * e);
    const Eigen::VectorXd lambda = solver.eigenvalues();  // ascending
    const Eigen::MatrixXd v = solver.eigenvectors();
    const auto q = static_cast<Eigen::Index>(m.cols());
    const auto rr = static_cast<Eigen::Index>(r);
    const Eigen::MatrixXd top = v.rightCols(rr);
    RankOracle o;
    o.best = e * top * top.transpose();
    // Only min(p, q) eigenvalues of mᵀm can be nonzero.
    const auto k = static_cast<Eigen::Index>(std::min(m.rows(), m.cols()));
    for (Eigen::Index i = q - k; i < q - rr; ++i) o.tail_energy += std::max(lambda(i), 0.0);
    return o;
}

Matrix random_orthonormal(std::size_t p, std::size_t r, std::mt19937_64& rng) {
    const Eigen::HouseholderQR<Eigen::MatrixXd> qr(to_eigen(random_matrix(p, r, rng)));
    const Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(p),
                                                                           static_cast<Eigen::Index>(r));
    Matrix out(p, r);
    for (std::size_t i = 0; i < p; ++i)
        for (std::size_t j = 0; j < r; ++j) out(i, j) = q(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
    return out;
}

// ClusterShift experiment shared by the end-to-end criteria.
ExperimentConfig cluster_shift_config(std::uint64_t seed) {
    ExperimentConfig c;
    c.federation.master_seed = seed;
    c.federation.lr = 0.05;
    c.federation.local_epochs = 20;
    c.federation.batch_size = 0;
    c.federation.init_scale = 1.0;
    c.federation.workers = 4;
    c.data.partition = partition_spec::ClusterShift{3, std::numbers::pi / 4.0, 4};
    c.data.clients = 38;
    c.data.unseen_fraction = 0.2;
    return c;
}

struct FullRun {
    Experiment ex;
    TrainedFederation fed;
    MetricsReport metrics;
};

FullRun full_run(const ExperimentConfig& c) {
    Experiment ex = build_experiment(c);
    TrainedFederation fed = run_protocol(c.federation, ex.model, ex.data);
    MetricsReport metrics = evaluate(ex.model, fed, ex.data, c.federation.workers);
    return {std::move(ex), std::move(fed), std::move(metrics)};
}

std::map<std::uint64_t, FullRun>& run_cache() {
    static std::map<std::uint64_t, FullRun> cache;
    return cache;
}

const FullRun& cached_run(std::uint64_t seed) {
    auto& cache = run_cache();
    auto it = cache.find(seed);
    if (it == cache.end()) it = cache.emplace(seed, full_run(cluster_shift_config(seed))).first;
    return it->second;
}

// Generator group -> learned cluster by majority over participating members.
std::map<std::size_t, std::size_t> majority_map(const FederationData& data, const ClusterAssignment& a) {
    std::map<std::size_t, std::map<std::size_t, std::size_t>> votes;
    const auto truth = data.true_cluster_of();
    for (std::size_t i = 0; i < truth.size(); ++i) ++votes[truth[i]][a.label_of[i]];
    std::map<std::size_t, std::size_t> out;
    for (const auto& [g, v] : votes) {
        out[g] = std::max_element(v.begin(), v.end(), [](auto& x, auto& y) { return x.second < y.second; })->first;
    }
    return out;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

Outcome gradient_correctness() {
    const auto t0 = Clock::now();
    GradcheckOptions o;
    o.configurations = 24;
    o.step = 1e-5;
    const GradcheckResult r = run_gradcheck(o);
    const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
    return {r.cases.size() >= 20 && r.max_rel_error <= 1e-4 && secs < 60.0,
            format("max rel error %.2e over %zu configurations", r.max_rel_error, r.cases.size())};
}

Outcome svd_refactorization() {
    std::mt19937_64 rng(2024);
    std::uniform_int_distribution<std::size_t> dim(1, 8);
    double worst_energy = 0.0;
    double worst_best = 0.0;
    bool deterministic = true;
    bool orthonormal = true;
    for (int trial = 0; trial < 300; ++trial) {
        const std::size_t p = dim(rng);
        const std::size_t q = dim(rng);
        const std::size_t r = std::uniform_int_distribution<std::size_t>(1, std::min(p, q))(rng);
        const Matrix m = random_matrix(p, q, rng);
        const LoraAdapter a = refactor(m, r);
        const RankOracle o = rank_oracle(m, r);
        const Eigen::MatrixXd ba = to_eigen(delta(a));
        const double residual = (to_eigen(m) - ba).squaredNorm();
        worst_energy = std::max(worst_energy, std::abs(residual - o.tail_energy));
        worst_best = std::max(worst_best, (ba - o.best).norm());
        orthonormal = orthonormal && orthonormality_defect(a.b()) <= 1e-10;
        deterministic = deterministic && refactor(m, r) == a;
    }
    return {worst_energy <= 1e-9 && worst_best <= 1e-8 && deterministic && orthonormal,
            format("Eckart-Young gap %.2e, |BA - best rank r| %.2e, repeatable %s, B orthonormal %s", worst_energy,
                   worst_best, deterministic ? "yes" : "no", orthonormal ? "yes" : "no")};
}

Outcome cross_terms() {
    const Matrix e1{{1.0}, {0.0}, {0.0}};
    const Matrix e2{{0.0}, {1.0}, {0.0}};
    const std::vector<LoraAdapter> locals{LoraAdapter(e1, e1.transposed()), LoraAdapter(e2, e2.transposed())};
    const std::vector<double> pi{0.5, 0.5};
    const Matrix product = aggregate_product(locals, pi);
    const Matrix separate = delta(aggregate_separate(locals, pi));
    const double gap = frobenius_norm(product - separate);
    return {std::abs(gap - 0.5) <= 1e-12, format("Frobenius gap %.17g", gap)};
}

Outcome distance_axioms() {
    std::mt19937_64 rng(8);
    std::uniform_int_distribution<std::size_t> dim(2, 10);
    double out_of_range = 0.0;
    double self = 0.0;
    double asym = 0.0;
    double rot = 0.0;
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t p = dim(rng);
        const std::size_t r = std::uniform_int_distribution<std::size_t>(1, p)(rng);
        const Matrix u = random_orthonormal(p, r, rng);
        const Matrix v = random_orthonormal(p, r, rng);
        const Matrix q = random_orthonormal(r, r, rng);
        const double d = pairwise_distance(u, v, r);
        out_of_range = std::max({out_of_range, -d, d - 1.0});
        self = std::max(self, std::abs(pairwise_distance(u, u, r)));
        asym = std::max(asym, std::abs(d - pairwise_distance(v, u, r)));
        rot = std::max(rot, std::abs(d - pairwise_distance(matmul(u, q), matmul(v, q), r)));
    }
    return {out_of_range <= 0.0 && self <= 1e-12 && asym <= 1e-12 && rot <= 1e-10,
            format("range excess %.1e, d(U,U) %.1e, asymmetry %.1e, rotation drift %.1e", out_of_range, self, asym,
                   rot)};
}

Matrix block_affinity(const std::vector<std::size_t>& group, double off, double within_low, std::mt19937_64& rng) {
    const std::size_t n = group.size();
    std::uniform_real_distribution<double> within(within_low, 1.0);
    Matrix s(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        s(i, i) = 1.0;
        for (std::size_t j = i + 1; j < n; ++j) s(i, j) = s(j, i) = group[i] == group[j] ? within(rng) : off;
    }
    return s;
}

Outcome eigengap_selection() {
    bool exact = true;
    std::string detail;
    int noisy_worst = 10;
    for (std::size_t k = 2; k <= 4; ++k) {
        std::vector<std::size_t> group;
        for (std::size_t j = 0; j < k; ++j) group.insert(group.end(), 5 + j, j);
        std::mt19937_64 rng(k);
        const Matrix s = block_affinity(group, 0.0, 1.0, rng);
        const EigengapSelection sel = select_k(s, 2, std::min<std::size_t>(10, group.size() - 1));
        const auto labels = spectral_cluster(s, sel.k_star, 0);
        exact = exact && sel.k_star == k && clustering_quality(labels, group).ari == 1.0;

        int correct = 0;
        for (std::uint64_t seed = 0; seed < 10; ++seed) {
            std::mt19937_64 g(derive_seed(seed, {k}));
            std::vector<std::size_t> noisy;
            for (std::size_t j = 0; j < k; ++j) {
                noisy.insert(noisy.end(), std::uniform_int_distribution<std::size_t>(4, 12)(g), j);
            }
            std::shuffle(noisy.begin(), noisy.end(), g);
            const Matrix sn = block_affinity(noisy, 0.05, 0.7, g);
            if (select_k(sn, 2, std::min<std::size_t>(10, noisy.size() - 1)).k_star == k) ++correct;
        }
        noisy_worst = std::min(noisy_worst, correct);
        detail += format("K=%zu exact %s, noisy %d/10; ", k, sel.k_star == k ? "yes" : "no", correct);
    }
    return {exact && noisy_worst >= 9, detail};
}

Outcome cluster_recovery() {
    int ok = 0;
    std::string ks;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        ExperimentConfig c = cluster_shift_config(seed);
        c.data.clients = 30;
        c.data.unseen_fraction = 0.0;
        const Experiment ex = build_experiment(c);
        const RootStageResult root = run_root_stage(c.federation, ex.model, ex.data);
        const ClusterAssignment a = assign_clusters(c.federation, root.tracker, ex.data.clients.size());
        const double ari = clustering_quality(a.label_of, ex.data.true_cluster_of()).ari;
        if (a.k_star == 3 && ari >= 0.9) ++ok;
        ks += format("%zu", a.k_star);
    }
    return {ok >= 8, format("%d/10 seeds with K*=3 and ARI>=0.9 (K* per seed: %s)", ok, ks.c_str())};
}

Outcome tier_gain_nonnegativity() {
    double worst_c = INFINITY;
    double worst_l = INFINITY;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        for (const auto& m : cached_run(seed).metrics.clients) {
            worst_c = std::min(worst_c, m.gains.g_c);
            worst_l = std::min(worst_l, m.gains.g_l);
        }
    }
    return {worst_c >= -1e-6 && worst_l >= -1e-6, format("min G_c %.3e, min G_l %.3e over 5 seeds", worst_c, worst_l)};
}

Outcome stage_ordering() {
    bool ok = true;
    std::string detail;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const MetricsReport& m = cached_run(seed).metrics;
        ok = ok && m.mean_acc >= m.mean_acc_cluster - 0.01 && m.mean_acc_cluster >= m.mean_acc_root - 0.01;
        detail += format("%.3f<=%.3f<=%.3f ", m.mean_acc_root, m.mean_acc_cluster, m.mean_acc);
    }
    return {ok, "root<=cluster<=leaf per seed: " + detail};
}

Outcome orthogonality_effect() {
    bool ok = true;
    std::string detail;
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        ExperimentConfig strong = cluster_shift_config(seed);
        strong.federation.gamma_c = strong.federation.gamma_l = 10.0;
        ExperimentConfig none = strong;
        none.federation.gamma_c = none.federation.gamma_l = 0.0;
        const OrthogonalityReport s = full_run(strong).metrics.orthogonality;
        const OrthogonalityReport z = full_run(none).metrics.orthogonality;
        ok = ok && s.root_cluster.mean <= 0.05 && z.root_cluster.mean > s.root_cluster.mean &&
             z.root_leaf.mean > s.root_leaf.mean && z.cluster_leaf.mean > s.cluster_leaf.mean &&
             s.root_cluster.count > 0 && s.root_leaf.count > 0;
        detail += format("seed %llu rc %.4f/%.4f rl %.4f/%.4f cl %.4f/%.4f; ", static_cast<unsigned long long>(seed),
                         s.root_cluster.mean, z.root_cluster.mean, s.root_leaf.mean, z.root_leaf.mean,
                         s.cluster_leaf.mean, z.cluster_leaf.mean);
    }
    return {ok, "gamma=10 vs gamma=0 overlaps: " + detail};
}

Outcome unseen_routing() {
    int trials = 0;
    int routed = 0;
    int improving_seeds = 0;
    double worst_twin = 0.0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const FullRun& run = cached_run(seed);
        const auto map = majority_map(run.ex.data, run.fed.server.assignment);
        double acc0 = 0.0;
        double acc5 = 0.0;
        for (const ClientData& u : run.ex.data.unseen) {
            const AdaptationResult r = adapt_unseen(run.ex.model, u, run.fed);
            if (trials < 50) {
                ++trials;
                if (r.assigned_cluster == map.at(*u.true_cluster)) ++routed;
            }
            acc0 += r.accuracy.front();
            acc5 += r.accuracy.back();
        }
        if (acc5 >= acc0 - 0.01 * static_cast<double>(run.ex.data.unseen.size())) ++improving_seeds;

        ClientData twin = run.ex.data.clients[0];
        const AdaptationResult t = adapt_unseen(run.ex.model, twin, run.fed, {20, 0.0, 0});
        const AdapterPath p = run.fed.path(0);
        const AdapterPath rc{p.root, p.cluster, zero_adapter(p.leaf.p(), p.leaf.q(), p.leaf.rank()), p.cluster_index, 0};
        worst_twin = std::max(worst_twin, std::abs(t.accuracy.front() - accuracy(run.ex.model, rc, twin.test)));
    }
    const double rate = static_cast<double>(routed) / static_cast<double>(trials);
    return {trials == 50 && rate >= 0.9 && worst_twin <= 0.05 && improving_seeds >= 9,
            format("routing %d/%d, worst twin gap %.3f, 5-epoch >= 0-epoch - 0.01 in %d/10 seeds", routed, trials,
                   worst_twin, improving_seeds)};
}

Outcome determinism_and_budget() {
    ExperimentConfig c;
    c.federation.master_seed = 7;
    const fs::path base = fs::temp_directory_path() / "hilora-acceptance";
    fs::remove_all(base);
    c.federation.workers = 1;
    command_run(c, base / "w1");
    c.federation.workers = 4;
    command_run(c, base / "w4");
    const std::string a = slurp(base / "w1" / artifact::kMetricsCsv);
    const std::string b = slurp(base / "w4" / artifact::kMetricsCsv);
    fs::remove_all(base);

    bool within_budget = true;
    int most = 0;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const TrainedFederation& fed = cached_run(seed).fed;
        most = std::max(most, fed.rounds_executed());
        within_budget = within_budget &&
                        fed.rounds_executed() <= fed.config.t_root + fed.config.t_cluster + fed.config.t_leaf;
    }
    return {!a.empty() && a == b && within_budget,
            format("metrics CSV identical for 1 and 4 workers: %s (%zu bytes); max rounds %d of budget 50",
                   a == b ? "yes" : "no", a.size(), most)};
}

}  // namespace

int main() {
    report(1, "gradient correctness", gradient_correctness);
    report(2, "SVD refactorization", svd_refactorization);
    report(3, "cross-term demonstration", cross_terms);
    report(4, "subspace-distance axioms", distance_axioms);
    report(5, "eigengap K-selection", eigengap_selection);
    report(6, "end-to-end cluster recovery", cluster_recovery);
    report(7, "tier-gain nonnegativity", tier_gain_nonnegativity);
    report(8, "stage ordering of personalization", stage_ordering);
    report(9, "orthogonality effect", orthogonality_effect);
    report(10, "unseen-client routing and adaptation", unseen_routing);
    report(11, "determinism and budget", determinism_and_budget);
    std::printf("%d of 11 criteria failed\n", failures);
    return failures == 0 ? 0 : 1;
}
