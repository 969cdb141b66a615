// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Dense>

#include <random>
#include <vector>

#include "hilora/matrix.hpp"
#include "hilora/model.hpp"

namespace hilora::test {

inline Matrix random_matrix(std::size_t rows, std::size_t cols, std::mt19937_64& rng, double scale = 1.0) {
    std::normal_distribution<double> n(0.0, scale);
    Matrix m(rows, cols);
    for (double& v : m.values()) v = n(rng);
    return m;
}

inline Eigen::MatrixXd to_eigen(const Matrix& m) {
    Eigen::MatrixXd e(m.rows(), m.cols());
    for (std::size_t r = 0; r < m.rows(); ++r)
        for (std::size_t c = 0; c < m.cols(); ++c) e(r, c) = m(r, c);
    return e;
}

inline Matrix from_eigen(const Eigen::MatrixXd& e) {
    Matrix m(static_cast<std::size_t>(e.rows()), static_cast<std::size_t>(e.cols()));
    for (Eigen::Index r = 0; r < e.rows(); ++r)
        for (Eigen::Index c = 0; c < e.cols(); ++c) m(r, c) = e(r, c);
    return m;
}

/// Q factor of a Gaussian matrix.
inline Matrix random_orthonormal(std::size_t p, std::size_t r, std::mt19937_64& rng) {
    const Eigen::HouseholderQR<Eigen::MatrixXd> qr(to_eigen(random_matrix(p, r, rng)));
    return from_eigen(qr.householderQ() *
                      Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(r)));
}

/// Singular values (descending) from the eigenvalues of mᵀm or mmᵀ.
inline std::vector<double> oracle_singular_values(const Matrix& m) {
    const Eigen::MatrixXd e = to_eigen(m);
    const Eigen::MatrixXd g = e.rows() >= e.cols() ? Eigen::MatrixXd(e.transpose() * e) : Eigen::MatrixXd(e * e.transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(g);
    std::vector<double> out;
    for (Eigen::Index i = g.rows() - 1; i >= 0; --i) out.push_back(std::sqrt(std::max(solver.eigenvalues()(i), 0.0)));
    return out;
}

inline std::vector<Sample> random_samples(std::size_t n, std::size_t dim, std::size_t classes, std::mt19937_64& rng) {
    std::normal_distribution<double> x(0.0, 1.0);
    std::uniform_int_distribution<std::size_t> y(0, classes - 1);
    std::vector<Sample> out(n);
    for (Sample& s : out) {
        s.x.resize(dim);
        for (double& v : s.x) v = x(rng);
        s.y = y(rng);
    }
    return out;
}

}  // namespace hilora::test
