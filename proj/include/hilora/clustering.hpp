// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <vector>

#include "hilora/matrix.hpp"

namespace hilora {

/// Per-client exponential moving average of unit-Frobenius LoRA bases.
class BasisTracker {
public:
    explicit BasisTracker(double lambda = 0.9);

    double lambda() const noexcept { return lambda_; }
    std::size_t rounds(std::size_t client) const;
    bool has(std::size_t client) const;
    const Matrix& smoothed(std::size_t client) const;
    std::size_t clients() const noexcept { return bases_.size(); }

    /// B̄ ← normalize(λ·B̄ + (1−λ)·b/‖b‖); the first observation sets B̄
    /// directly. Throws DegenerateInputError for a (numerically) zero b.
    void update(std::size_t client, const Matrix& b_new);

private:
    double lambda_;
    std::vector<std::optional<Matrix>> bases_;
    std::vector<std::size_t> rounds_;
};

struct Affinity {
    Matrix s;
    double sigma = 0.0;
    /// σ = 0: every client coincides and S falls back to all ones.
    bool degenerate = false;
};

struct EigengapSelection {
    std::size_t k_star = 0;
    /// gaps[K - k_min] = λ_{K+1} − λ_K (1-based eigenvalue numbering).
    std::vector<double> gaps;
    std::vector<double> eigenvalues;
};

struct ClusterAssignment {
    /// Eigengap choice. Equals cluster_count() except in the degenerate
    /// σ = 0 case, where every client shares a single cluster.
    std::size_t k_star = 0;
    /// Zero-based cluster of each participating client; clusters are
    /// numbered by first appearance.
    std::vector<std::size_t> label_of;
    std::size_t k_min = 0;
    std::vector<double> eigengaps;
    std::vector<double> eigenvalues;
    double sigma_used = 0.0;
    bool degenerate = false;
    Matrix distance;
    Matrix affinity;

    std::size_t cluster_count() const;
    std::vector<std::size_t> members(std::size_t cluster) const;
};

/// 1 − ‖u_iᵀu_j‖_F² / r
double pairwise_distance(const Matrix& u_i, const Matrix& u_j, std::size_t r);

/// Layer-averaged distance matrix; bases[i][layer] is client i's
/// orthonormal basis for that layer. Rows are computed in parallel.
Matrix distance_matrix(const std::vector<std::vector<Matrix>>& bases);
Matrix distance_matrix_serial(const std::vector<std::vector<Matrix>>& bases);

/// Gaussian kernel with σ = median off-diagonal distance.
Affinity affinity(const Matrix& distance);

/// I − D^{-1/2} S D^{-1/2}
Matrix normalized_laplacian(const Matrix& s);

/// Ng–Jordan–Weiss embedding plus k-means (farthest-point seeding with a
/// seeded first center, 20 restarts, lowest objective wins). Entries must
/// be non-negative and every vertex needs positive degree.
std::vector<std::size_t> spectral_cluster(const Matrix& s, std::size_t k, std::uint64_t seed = 0);

/// Eigengap maximizer over [k_min, k_max]. Gaps within 1e-10 of the best
/// count as ties and resolve to the smallest K.
EigengapSelection select_k(const Matrix& s, std::size_t k_min, std::size_t k_max);

/// Full pipeline over the tracker's smoothed bases for clients 0..n-1.
ClusterAssignment cluster_clients(const BasisTracker& tracker, std::size_t n_clients, std::size_t rank,
                                  std::size_t k_min, std::size_t k_max, std::uint64_t seed = 0);

/// Lloyd's k-means on the rows of `points` with the seeding used by
/// spectral_cluster. Returns labels numbered by first appearance.
std::vector<std::size_t> kmeans(const Matrix& points, std::size_t k, std::size_t restarts, std::uint64_t seed);

}  // namespace hilora
