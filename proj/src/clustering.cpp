// SPDX-License-Identifier: Apache-2.0

#include "hilora/clustering.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "hilora/errors.hpp"
#include "hilora/numerics.hpp"
#include "hilora/rng.hpp"

namespace hilora {

namespace {

constexpr std::size_t kKmeansRestarts = 20;
constexpr int kKmeansMaxIterations = 300;
constexpr double kKmeansTolerance = 1e-10;
constexpr double kGapTieTolerance = 1e-10;

void check_square_symmetric(const Matrix& s, const char* op) {
    if (s.rows() != s.cols()) throw PreconditionError(std::string(op) + ": matrix is not square");
    for (std::size_t i = 0; i < s.rows(); ++i)
        for (std::size_t j = i + 1; j < s.cols(); ++j)
            if (std::abs(s(i, j) - s(j, i)) > 1e-12) throw PreconditionError(std::string(op) + ": matrix is not symmetric");
}

double squared_distance(std::span<const double> a, std::span<const double> b) {
    double acc = 0.0;
    for (std::size_t j = 0; j < a.size(); ++j) acc += (a[j] - b[j]) * (a[j] - b[j]);
    return acc;
}

std::vector<std::size_t> relabel_by_first_appearance(const std::vector<std::size_t>& labels, std::size_t k) {
    std::vector<std::size_t> map(k, std::numeric_limits<std::size_t>::max());
    std::size_t next = 0;
    std::vector<std::size_t> out(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (map[labels[i]] == std::numeric_limits<std::size_t>::max()) map[labels[i]] = next++;
        out[i] = map[labels[i]];
    }
    return out;
}

struct KmeansRun {
    std::vector<std::size_t> labels;
    double objective = 0.0;
};

KmeansRun lloyd(const Matrix& points, std::size_t k, std::size_t first_center) {
    const std::size_t n = points.rows();
    const std::size_t dim = points.cols();

    // Farthest-point seeding from the given first center.
    Matrix centers(k, dim);
    std::vector<double> nearest(n, std::numeric_limits<double>::infinity());
    std::size_t chosen = first_center;
    for (std::size_t c = 0; c < k; ++c) {
        std::copy(points.row(chosen).begin(), points.row(chosen).end(), centers.row(c).begin());
        for (std::size_t i = 0; i < n; ++i) nearest[i] = std::min(nearest[i], squared_distance(points.row(i), centers.row(c)));
        chosen = static_cast<std::size_t>(std::max_element(nearest.begin(), nearest.end()) - nearest.begin());
    }

    std::vector<std::size_t> labels(n, 0);
    std::vector<double> dist(n, 0.0);
    for (int iter = 0; iter < kKmeansMaxIterations; ++iter) {
        for (std::size_t i = 0; i < n; ++i) {
            double best = std::numeric_limits<double>::infinity();
            for (std::size_t c = 0; c < k; ++c) {
                const double d = squared_distance(points.row(i), centers.row(c));
                if (d < best) {
                    best = d;
                    labels[i] = c;
                }
            }
            dist[i] = best;
        }
        std::vector<std::size_t> count(k, 0);
        for (std::size_t i = 0; i < n; ++i) ++count[labels[i]];
        for (std::size_t c = 0; c < k; ++c) {
            if (count[c] != 0) continue;
            // Re-seed an empty cluster at the worst-served point whose own
            // cluster can spare it.
            std::size_t far = n;
            for (std::size_t i = 0; i < n; ++i)
                if (count[labels[i]] > 1 && (far == n || dist[i] > dist[far])) far = i;
            if (far == n) break;
            --count[labels[far]];
            labels[far] = c;
            count[c] = 1;
            dist[far] = 0.0;
        }
        Matrix next(k, dim);
        for (std::size_t i = 0; i < n; ++i) {
            auto row = next.row(labels[i]);
            for (std::size_t j = 0; j < dim; ++j) row[j] += points(i, j);
        }
        for (std::size_t c = 0; c < k; ++c) {
            if (count[c] == 0) {
                std::copy(centers.row(c).begin(), centers.row(c).end(), next.row(c).begin());
                continue;
            }
            for (double& v : next.row(c)) v /= static_cast<double>(count[c]);
        }
        double moved = 0.0;
        for (std::size_t c = 0; c < k; ++c) moved = std::max(moved, std::sqrt(squared_distance(next.row(c), centers.row(c))));
        centers = std::move(next);
        if (moved <= kKmeansTolerance) break;
    }

    KmeansRun run{std::vector<std::size_t>(n), 0.0};
    for (std::size_t i = 0; i < n; ++i) {
        double best = std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < k; ++c) {
            const double d = squared_distance(points.row(i), centers.row(c));
            if (d < best) {
                best = d;
                run.labels[i] = c;
            }
        }
        run.objective += best;
    }
    return run;
}

double distance_entry(const std::vector<std::vector<Matrix>>& bases, std::size_t i, std::size_t j) {
    double total = 0.0;
    for (std::size_t layer = 0; layer < bases[i].size(); ++layer) {
        total += pairwise_distance(bases[i][layer], bases[j][layer], bases[i][layer].cols());
    }
    return total / static_cast<double>(bases[i].size());
}

void check_bases(const std::vector<std::vector<Matrix>>& bases) {
    if (bases.empty()) throw ConfigError("distance_matrix: no clients");
    const std::size_t layers = bases.front().size();
    if (layers == 0) throw ConfigError("distance_matrix: clients expose no layers");
    for (const auto& client : bases) {
        if (client.size() != layers) throw ConfigError("distance_matrix: ragged layer lists");
        for (std::size_t l = 0; l < layers; ++l) {
            if (client[l].rows() != bases.front()[l].rows() || client[l].cols() != bases.front()[l].cols()) {
                throw ConfigError("distance_matrix: layer " + std::to_string(l) + " shapes differ across clients");
            }
        }
    }
}

}  // namespace

BasisTracker::BasisTracker(double lambda) : lambda_(lambda) {
    if (!(lambda > 0.0 && lambda < 1.0)) throw ConfigError("BasisTracker: lambda must lie in (0, 1)");
}

bool BasisTracker::has(std::size_t client) const { return client < bases_.size() && bases_[client].has_value(); }

std::size_t BasisTracker::rounds(std::size_t client) const { return client < rounds_.size() ? rounds_[client] : 0; }

const Matrix& BasisTracker::smoothed(std::size_t client) const {
    if (!has(client)) throw ConfigError("BasisTracker: no basis for client " + std::to_string(client));
    return *bases_[client];
}

void BasisTracker::update(std::size_t client, const Matrix& b_new) {
    const double norm = frobenius_norm(b_new);
    if (!(norm > kDegenerateNorm)) throw DegenerateInputError("BasisTracker: zero-norm basis for client " + std::to_string(client));
    if (client >= bases_.size()) {
        bases_.resize(client + 1);
        rounds_.resize(client + 1, 0);
    }
    Matrix unit = b_new;
    unit *= 1.0 / norm;
    if (!bases_[client]) {
        bases_[client] = std::move(unit);
    } else {
        Matrix& bar = *bases_[client];
        if (bar.rows() != unit.rows() || bar.cols() != unit.cols()) throw ConfigError("BasisTracker: basis shape changed");
        bar *= lambda_;
        unit *= 1.0 - lambda_;
        bar += unit;
        const double bar_norm = frobenius_norm(bar);
        if (!(bar_norm > kDegenerateNorm)) throw DegenerateInputError("BasisTracker: smoothed basis cancelled to zero");
        bar *= 1.0 / bar_norm;
    }
    ++rounds_[client];
}

std::size_t ClusterAssignment::cluster_count() const {
    return label_of.empty() ? 0 : *std::max_element(label_of.begin(), label_of.end()) + 1;
}

std::vector<std::size_t> ClusterAssignment::members(std::size_t cluster) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < label_of.size(); ++i)
        if (label_of[i] == cluster) out.push_back(i);
    return out;
}

double pairwise_distance(const Matrix& u_i, const Matrix& u_j, std::size_t r) {
    if (r == 0 || u_i.cols() != r || u_j.cols() != r) throw ConfigError("pairwise_distance: bases must have r columns");
    const double d = 1.0 - subspace_overlap(u_i, u_j) / static_cast<double>(r);
    return std::clamp(d, 0.0, 1.0);
}

Matrix distance_matrix_serial(const std::vector<std::vector<Matrix>>& bases) {
    check_bases(bases);
    const std::size_t n = bases.size();
    Matrix d(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) d(i, j) = d(j, i) = distance_entry(bases, i, j);
    return d;
}

Matrix distance_matrix(const std::vector<std::vector<Matrix>>& bases) {
    check_bases(bases);
    const auto n = static_cast<long>(bases.size());
    Matrix d(bases.size(), bases.size());
    // Each task owns row i of the upper triangle; the mirror write touches
    // entries no other task writes.
#pragma omp parallel for schedule(dynamic)
    for (long i = 0; i < n; ++i)
        for (long j = i + 1; j < n; ++j) {
            const double v = distance_entry(bases, static_cast<std::size_t>(i), static_cast<std::size_t>(j));
            d(static_cast<std::size_t>(i), static_cast<std::size_t>(j)) = v;
            d(static_cast<std::size_t>(j), static_cast<std::size_t>(i)) = v;
        }
    return d;
}

Affinity affinity(const Matrix& distance) {
    check_square_symmetric(distance, "affinity");
    const std::size_t n = distance.rows();
    if (n < 2) throw PreconditionError("affinity: need at least two clients");
    std::vector<double> off;
    off.reserve(n * (n - 1) / 2);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) off.push_back(distance(i, j));
    std::sort(off.begin(), off.end());
    const std::size_t m = off.size();
    const double sigma = m % 2 == 1 ? off[m / 2] : 0.5 * (off[m / 2 - 1] + off[m / 2]);

    Affinity out{Matrix(n, n, 1.0), sigma, false};
    if (!(sigma > 0.0)) {
        out.degenerate = true;
        return out;
    }
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            if (i != j) out.s(i, j) = std::exp(-distance(i, j) * distance(i, j) / (2.0 * sigma * sigma));
    return out;
}

Matrix normalized_laplacian(const Matrix& s) {
    check_square_symmetric(s, "normalized_laplacian");
    const std::size_t n = s.rows();
    std::vector<double> inv_sqrt_deg(n);
    for (std::size_t i = 0; i < n; ++i) {
        double deg = 0.0;
        for (double v : s.row(i)) deg += v;
        if (!(deg > 0.0)) throw PreconditionError("normalized_laplacian: vertex with zero degree");
        inv_sqrt_deg[i] = 1.0 / std::sqrt(deg);
    }
    Matrix l(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            l(i, j) = (i == j ? 1.0 : 0.0) - inv_sqrt_deg[i] * s(i, j) * inv_sqrt_deg[j];
    return l;
}

std::vector<std::size_t> kmeans(const Matrix& points, std::size_t k, std::size_t restarts, std::uint64_t seed) {
    const std::size_t n = points.rows();
    if (k == 0 || k > n) throw ConfigError("kmeans: k must lie in [1, " + std::to_string(n) + "]");
    KmeansRun best;
    best.objective = std::numeric_limits<double>::infinity();
    for (std::size_t r = 0; r < std::max<std::size_t>(restarts, 1); ++r) {
        auto rng = make_rng(seed, {static_cast<std::uint64_t>(r)});
        std::uniform_int_distribution<std::size_t> pick(0, n - 1);
        KmeansRun run = lloyd(points, k, pick(rng));
        if (run.objective < best.objective) best = std::move(run);
    }
    return relabel_by_first_appearance(best.labels, k);
}

std::vector<std::size_t> spectral_cluster(const Matrix& s, std::size_t k, std::uint64_t seed) {
    const std::size_t n = s.rows();
    if (k > n) throw ConfigError("spectral_cluster: k = " + std::to_string(k) + " exceeds N = " + std::to_string(n));
    if (k < 2) throw PreconditionError("spectral_cluster: k must be at least 2");
    for (double v : s.values())
        if (!(v >= 0.0)) throw PreconditionError("spectral_cluster: affinities must be non-negative");

    const SymmetricEigen eig = symmetric_eigen(normalized_laplacian(s));
    Matrix embed(n, k);
    for (std::size_t i = 0; i < n; ++i) {
        double norm = 0.0;
        for (std::size_t c = 0; c < k; ++c) {
            embed(i, c) = eig.vectors(i, c);
            norm += embed(i, c) * embed(i, c);
        }
        norm = std::sqrt(norm);
        if (norm > 0.0)
            for (double& v : embed.row(i)) v /= norm;
    }
    return kmeans(embed, k, kKmeansRestarts, seed);
}

EigengapSelection select_k(const Matrix& s, std::size_t k_min, std::size_t k_max) {
    const std::size_t n = s.rows();
    if (k_min < 2 || k_min > k_max || k_max + 1 > n) {
        throw PreconditionError("select_k: need 2 <= k_min <= k_max <= N-1 (got [" + std::to_string(k_min) + ", " +
                                std::to_string(k_max) + "], N = " + std::to_string(n) + ")");
    }
    EigengapSelection out;
    out.eigenvalues = symmetric_eigen(normalized_laplacian(s)).values;
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t k = k_min; k <= k_max; ++k) {
        const double gap = out.eigenvalues[k] - out.eigenvalues[k - 1];
        out.gaps.push_back(gap);
        best = std::max(best, gap);
    }
    for (std::size_t k = k_min; k <= k_max; ++k) {
        if (out.gaps[k - k_min] >= best - kGapTieTolerance) {
            out.k_star = k;
            break;
        }
    }
    return out;
}

ClusterAssignment cluster_clients(const BasisTracker& tracker, std::size_t n_clients, std::size_t rank,
                                  std::size_t k_min, std::size_t k_max, std::uint64_t seed) {
    std::vector<std::vector<Matrix>> bases(n_clients);
    for (std::size_t i = 0; i < n_clients; ++i) {
        if (!tracker.has(i)) throw PreconditionError("cluster_clients: client " + std::to_string(i) + " has no tracked basis");
        bases[i].push_back(orthonormal_columns(tracker.smoothed(i), rank));
    }

    ClusterAssignment out;
    out.k_min = k_min;
    out.distance = distance_matrix(bases);
    Affinity aff = affinity(out.distance);
    out.sigma_used = aff.sigma;
    out.degenerate = aff.degenerate;
    out.affinity = std::move(aff.s);

    EigengapSelection sel = select_k(out.affinity, k_min, k_max);
    out.k_star = sel.k_star;
    out.eigengaps = std::move(sel.gaps);
    out.eigenvalues = std::move(sel.eigenvalues);
    if (out.degenerate) {
        out.label_of.assign(n_clients, 0);
    } else {
        out.label_of = spectral_cluster(out.affinity, out.k_star, seed);
    }
    return out;
}

}  // namespace hilora
