// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

#include "hilora/clustering.hpp"
#include "hilora/errors.hpp"
#include "hilora/numerics.hpp"
#include "support.hpp"

using namespace hilora;

namespace {

Matrix block_affinity(const std::vector<std::size_t>& sizes, double off, double within = 1.0) {
    std::size_t n = 0;
    for (std::size_t s : sizes) n += s;
    std::vector<std::size_t> block;
    for (std::size_t b = 0; b < sizes.size(); ++b) block.insert(block.end(), sizes[b], b);
    Matrix s(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) s(i, j) = i == j ? 1.0 : (block[i] == block[j] ? within : off);
    return s;
}

std::vector<std::size_t> block_labels(const std::vector<std::size_t>& sizes) {
    std::vector<std::size_t> out;
    for (std::size_t b = 0; b < sizes.size(); ++b) out.insert(out.end(), sizes[b], b);
    return out;
}

Matrix column(std::vector<double> v) {
    Matrix m(v.size(), 1);
    for (std::size_t i = 0; i < v.size(); ++i) m(i, 0) = v[i];
    return m;
}

}  // namespace

TEST_CASE("basis tracker") {
    std::mt19937_64 rng(3);
    SUBCASE("first observation is the normalized input") {
        BasisTracker t(0.9);
        const Matrix b = test::random_matrix(5, 2, rng, 3.0);
        t.update(0, b);
        const double n = frobenius_norm(b);
        for (std::size_t k = 0; k < b.size(); ++k) CHECK(t.smoothed(0).values()[k] == doctest::Approx(b.values()[k] / n));
        CHECK(t.rounds(0) == 1);
    }
    SUBCASE("constant input is a fixed point") {
        BasisTracker t(0.9);
        const Matrix b = test::random_matrix(5, 2, rng);
        for (int r = 0; r < 10; ++r) t.update(1, b * (1.0 + r));
        const Matrix unit = b * (1.0 / frobenius_norm(b));
        CHECK(max_abs_diff(t.smoothed(1), unit) <= 1e-14);
        CHECK(std::abs(frobenius_norm(t.smoothed(1)) - 1.0) <= 1e-10);
    }
    SUBCASE("two-step hand computation") {
        BasisTracker t(0.9);
        t.update(0, column({1, 0, 0}));
        t.update(0, column({0, 1, 0}));
        const double n = std::sqrt(0.81 + 0.01);
        CHECK(t.smoothed(0)(0, 0) == doctest::Approx(0.9 / n).epsilon(1e-14));
        CHECK(t.smoothed(0)(1, 0) == doctest::Approx(0.1 / n).epsilon(1e-14));
        CHECK(t.smoothed(0)(2, 0) == 0.0);
    }
    SUBCASE("errors") {
        BasisTracker t(0.5);
        CHECK_THROWS_AS(t.update(0, Matrix(3, 1)), DegenerateInputError);
        CHECK_THROWS_AS(t.smoothed(0), ConfigError);
        CHECK_THROWS_AS(BasisTracker(1.0), ConfigError);
        CHECK_THROWS_AS(BasisTracker(0.0), ConfigError);
    }
}

TEST_CASE("pairwise distance") {
    const Matrix e1 = column({1, 0, 0});
    const Matrix e2 = column({0, 1, 0});
    const Matrix diag = column({1 / std::sqrt(2.0), 1 / std::sqrt(2.0), 0});
    CHECK(pairwise_distance(e1, e1, 1) == doctest::Approx(0.0));
    CHECK(pairwise_distance(e1, e2, 1) == doctest::Approx(1.0));
    CHECK(pairwise_distance(e1, diag, 1) == doctest::Approx(0.5).epsilon(1e-14));
    CHECK_THROWS_AS(pairwise_distance(e1, column({2, 0, 0}), 1), PreconditionError);
    CHECK_THROWS_AS(pairwise_distance(e1, e2, 2), ConfigError);
}

TEST_CASE("distance matrix") {
    std::mt19937_64 rng(5);
    SUBCASE("identical bases") {
        const Matrix u = test::random_orthonormal(6, 2, rng);
        const Matrix d = distance_matrix({{u}, {u}});
        for (double v : d.values()) CHECK(std::abs(v) <= 1e-14);
    }
    SUBCASE("layer averaging") {
        const Matrix e1 = column({1, 0, 0});
        const Matrix e2 = column({0, 1, 0});
        const Matrix d = distance_matrix({{e1, e1}, {e1, e2}});
        CHECK(d(0, 1) == doctest::Approx(0.5));
        CHECK(d(1, 0) == doctest::Approx(0.5));
    }
    SUBCASE("loop oracle and serial agreement") {
        std::vector<std::vector<Matrix>> bases(7);
        for (auto& b : bases)
            for (int l = 0; l < 3; ++l) b.push_back(test::random_orthonormal(8, 3, rng));
        const Matrix d = distance_matrix(bases);
        CHECK(d == distance_matrix_serial(bases));
        for (std::size_t i = 0; i < 7; ++i) {
            CHECK(d(i, i) == 0.0);
            for (std::size_t j = 0; j < 7; ++j) {
                double expected = 0.0;
                if (i != j) {
                    for (int l = 0; l < 3; ++l) {
                        const Eigen::MatrixXd g = test::to_eigen(bases[i][l]).transpose() * test::to_eigen(bases[j][l]);
                        expected += 1.0 - g.squaredNorm() / 3.0;
                    }
                    expected /= 3.0;
                }
                CHECK(d(i, j) == doctest::Approx(expected).epsilon(1e-12));
                CHECK(d(i, j) == d(j, i));
                CHECK(d(i, j) >= 0.0);
                CHECK(d(i, j) <= 1.0);
            }
        }
    }
    SUBCASE("ragged input") {
        const Matrix u = test::random_orthonormal(4, 1, rng);
        CHECK_THROWS_AS(distance_matrix({{u}, {u, u}}), ConfigError);
        CHECK_THROWS_AS(distance_matrix({}), ConfigError);
    }
}

TEST_CASE("affinity") {
    SUBCASE("kernel values") {
        // Off-diagonal entries 0, 0.4, 0.4: σ is 0.4.
        const Matrix d{{0, 0, 0.4}, {0, 0, 0.4}, {0.4, 0.4, 0}};
        const Affinity a = affinity(d);
        CHECK(a.sigma == doctest::Approx(0.4));
        CHECK_FALSE(a.degenerate);
        CHECK(a.s(0, 1) == 1.0);
        CHECK(a.s(0, 2) == doctest::Approx(std::exp(-0.5)).epsilon(1e-14));
        CHECK(a.s(2, 2) == 1.0);
    }
    SUBCASE("elementwise oracle") {
        std::mt19937_64 rng(9);
        std::uniform_real_distribution<double> unit(0.0, 1.0);
        Matrix d(5, 5);
        for (std::size_t i = 0; i < 5; ++i)
            for (std::size_t j = i + 1; j < 5; ++j) d(i, j) = d(j, i) = unit(rng);
        std::vector<double> off;
        for (std::size_t i = 0; i < 5; ++i)
            for (std::size_t j = i + 1; j < 5; ++j) off.push_back(d(i, j));
        std::nth_element(off.begin(), off.begin() + 5, off.end());
        const double hi = off[5];
        const double lo = *std::max_element(off.begin(), off.begin() + 5);
        const double sigma = 0.5 * (lo + hi);
        const Affinity a = affinity(d);
        CHECK(a.sigma == doctest::Approx(sigma).epsilon(1e-15));
        for (std::size_t i = 0; i < 5; ++i)
            for (std::size_t j = 0; j < 5; ++j) {
                const double expected = i == j ? 1.0 : std::exp(-d(i, j) * d(i, j) / (2 * sigma * sigma));
                CHECK(a.s(i, j) == doctest::Approx(expected).epsilon(1e-14));
                CHECK(a.s(i, j) > 0.0);
                CHECK(a.s(i, j) <= 1.0);
            }
    }
    SUBCASE("degenerate fallback") {
        const Affinity a = affinity(Matrix(4, 4));
        CHECK(a.degenerate);
        CHECK(a.sigma == 0.0);
        for (double v : a.s.values()) CHECK(v == 1.0);
    }
    SUBCASE("preconditions") {
        CHECK_THROWS_AS(affinity(Matrix(1, 1)), PreconditionError);
        CHECK_THROWS_AS(affinity(Matrix{{0, 1}, {0.5, 0}}), PreconditionError);
    }
}

TEST_CASE("normalized laplacian spectrum") {
    std::mt19937_64 rng(13);
    std::uniform_real_distribution<double> unit(0.01, 1.0);
    for (int t = 0; t < 20; ++t) {
        const std::size_t n = 3 + static_cast<std::size_t>(t % 6);
        Matrix s(n, n);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i; j < n; ++j) s(i, j) = s(j, i) = i == j ? 1.0 : unit(rng);
        const Matrix l = normalized_laplacian(s);
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> oracle(test::to_eigen(l));
        const auto& ev = oracle.eigenvalues();
        CHECK(std::abs(ev(0)) <= 1e-9);
        for (Eigen::Index k = 0; k < ev.size(); ++k) {
            CHECK(ev(k) >= -1e-9);
            CHECK(ev(k) <= 2.0 + 1e-9);
        }
    }
    CHECK_THROWS_AS(normalized_laplacian(Matrix(2, 2)), PreconditionError);
}

TEST_CASE("zero-eigenvalue multiplicity counts components") {
    for (std::size_t blocks = 2; blocks <= 5; ++blocks) {
        std::vector<std::size_t> sizes;
        for (std::size_t b = 0; b < blocks; ++b) sizes.push_back(2 + b % 3);
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> oracle(test::to_eigen(normalized_laplacian(block_affinity(sizes, 0.0))));
        std::size_t zeros = 0;
        for (Eigen::Index k = 0; k < oracle.eigenvalues().size(); ++k) zeros += std::abs(oracle.eigenvalues()(k)) <= 1e-9;
        CHECK(zeros == blocks);
    }
}

TEST_CASE("spectral clustering") {
    SUBCASE("two exact blocks") {
        CHECK(spectral_cluster(block_affinity({3, 4}, 0.0), 2) == block_labels({3, 4}));
    }
    SUBCASE("three blocks with tiny coupling") {
        CHECK(spectral_cluster(block_affinity({4, 3, 5}, 1e-6), 3) == block_labels({4, 3, 5}));
    }
    SUBCASE("k equals N") {
        std::mt19937_64 rng(4);
        std::uniform_real_distribution<double> unit(0.1, 1.0);
        Matrix s(5, 5);
        for (std::size_t i = 0; i < 5; ++i)
            for (std::size_t j = i; j < 5; ++j) s(i, j) = s(j, i) = i == j ? 1.0 : unit(rng);
        CHECK(spectral_cluster(s, 5) == std::vector<std::size_t>{0, 1, 2, 3, 4});
    }
    SUBCASE("deterministic per seed") {
        const Matrix s = block_affinity({3, 3, 3}, 0.2, 0.8);
        CHECK(spectral_cluster(s, 3, 7) == spectral_cluster(s, 3, 7));
    }
    SUBCASE("errors") {
        const Matrix s = block_affinity({2, 2}, 0.1);
        CHECK_THROWS_AS(spectral_cluster(s, 5), ConfigError);
        CHECK_THROWS_AS(spectral_cluster(s, 1), PreconditionError);
        Matrix neg = s;
        neg(0, 1) = neg(1, 0) = -0.1;
        CHECK_THROWS_AS(spectral_cluster(neg, 2), PreconditionError);
    }
}

TEST_CASE("eigengap selection") {
    SUBCASE("three exact blocks") {
        const auto sel = select_k(block_affinity({3, 3, 3}, 0.0), 2, 6);
        CHECK(sel.k_star == 3);
        CHECK(sel.gaps.size() == 5);
        CHECK(std::abs(sel.eigenvalues[2]) <= 1e-12);
        CHECK(sel.eigenvalues[3] > 0.5);
    }
    SUBCASE("two exact blocks") {
        CHECK(select_k(block_affinity({4, 5}, 0.0), 2, 6).k_star == 2);
    }
    SUBCASE("noisy three blocks") {
        int hits = 0;
        for (std::uint64_t seed = 0; seed < 10; ++seed) {
            std::mt19937_64 rng(seed);
            std::uniform_real_distribution<double> within(0.7, 1.0);
            const std::vector<std::size_t> sizes{4, 4, 4};
            const auto labels = block_labels(sizes);
            Matrix s = block_affinity(sizes, 0.05);
            for (std::size_t i = 0; i < 12; ++i)
                for (std::size_t j = i + 1; j < 12; ++j)
                    if (labels[i] == labels[j]) s(i, j) = s(j, i) = within(rng);
            hits += select_k(s, 2, 6).k_star == 3;
        }
        CHECK(hits >= 9);
    }
    SUBCASE("ties resolve to the smallest K") {
        // All-ones: λ = {0, 1, 1, 1, 1}; gaps at K=2.. are all zero.
        CHECK(select_k(Matrix(5, 5, 1.0), 2, 4).k_star == 2);
    }
    SUBCASE("range preconditions") {
        const Matrix s = block_affinity({2, 2}, 0.1);
        CHECK_THROWS_AS(select_k(s, 1, 2), PreconditionError);
        CHECK_THROWS_AS(select_k(s, 2, 4), PreconditionError);
        CHECK_THROWS_AS(select_k(s, 3, 2), PreconditionError);
    }
}

TEST_CASE("cluster_clients") {
    std::mt19937_64 rng(21);
    SUBCASE("shared basis falls back to a single cluster") {
        BasisTracker t;
        const Matrix b = test::random_matrix(6, 2, rng);
        for (std::size_t i = 0; i < 6; ++i) t.update(i, b);
        const auto a = cluster_clients(t, 6, 2, 2, 5);
        CHECK(a.degenerate);
        CHECK(a.sigma_used == 0.0);
        CHECK(a.k_star == 2);
        CHECK(a.cluster_count() == 1);
        CHECK(a.label_of == std::vector<std::size_t>(6, 0));
    }
    SUBCASE("three orthogonal families") {
        BasisTracker t;
        const std::size_t per_family = 4;
        for (std::size_t f = 0; f < 3; ++f) {
            for (std::size_t m = 0; m < per_family; ++m) {
                // Columns span {e_{2f}, e_{2f+1}}, mixed by a random invertible 2x2.
                const Matrix mix = test::random_matrix(2, 2, rng) + Matrix::identity(2) * 3.0;
                Matrix b(12, 2);
                for (std::size_t c = 0; c < 2; ++c) {
                    b(2 * f, c) = mix(0, c);
                    b(2 * f + 1, c) = mix(1, c);
                }
                t.update(f * per_family + m, b);
            }
        }
        const auto a = cluster_clients(t, 12, 2, 2, 8, 3);
        CHECK(a.k_star == 3);
        CHECK(a.label_of == block_labels({4, 4, 4}));
        CHECK(a.members(1) == std::vector<std::size_t>{4, 5, 6, 7});
    }
    SUBCASE("missing client") {
        BasisTracker t;
        t.update(0, test::random_matrix(4, 1, rng));
        CHECK_THROWS_AS(cluster_clients(t, 3, 1, 2, 2), PreconditionError);
    }
}
