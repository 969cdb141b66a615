// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <vector>

#include "hilora/matrix.hpp"

namespace hilora {

/// Frobenius norms at or below this are treated as zero by normalization paths.
inline constexpr double kDegenerateNorm = 1e-300;

/// Top-k singular triplets of a matrix.
struct SvdFactors {
    Matrix u;                            // p x k, orthonormal columns
    std::vector<double> singular_values; // k values, non-increasing
    Matrix vt;                           // k x q, orthonormal rows

    /// u · diag(σ) · vt
    Matrix reconstruct() const;
};

/// Eigen-decomposition of a symmetric matrix, eigenvalues ascending.
struct SymmetricEigen {
    std::vector<double> values;
    Matrix vectors;  // column s pairs with values[s]
};

Matrix matmul(const Matrix& a, const Matrix& b);
Matrix matmul_at_b(const Matrix& a, const Matrix& b);
Matrix matmul_a_bt(const Matrix& a, const Matrix& b);

double frobenius_norm(const Matrix& m);
double frobenius_norm_sq(const Matrix& m);

/// Best rank-k factorization via one-sided Jacobi.
///
/// The Jacobi sweep runs on whichever orientation of `m` is taller, visiting
/// column pairs (i, j), i < j, in lexicographic order. A sweep with every
/// pair satisfying |cos| <= 1e-12 ends the iteration (at most 60 sweeps).
/// Singular values are stably sorted, so ties keep the lower column index.
/// Each left singular vector is flipped so its largest-magnitude entry is
/// positive (first such row on ties). Left vectors for zero singular values
/// are completed deterministically from the standard basis.
///
/// Throws ConfigError unless 1 <= k <= min(rows, cols).
SvdFactors truncated_svd(const Matrix& m, std::size_t k);

/// truncated_svd with k = min(rows, cols).
SvdFactors thin_svd(const Matrix& m);

/// Orthonormal basis (p x r) of the dominant r-dimensional left subspace.
Matrix orthonormal_columns(const Matrix& m, std::size_t r);

/// max |(uᵀu - I)_{ij}|
double orthonormality_defect(const Matrix& u);

/// ‖u1ᵀu2‖_F², the sum of squared cosines of the principal angles.
///
/// Throws PreconditionError when either argument is not orthonormal to 1e-8,
/// ConfigError on a row-count mismatch.
double subspace_overlap(const Matrix& u1, const Matrix& u2);

/// Cyclic Jacobi eigen-solver for symmetric matrices.
SymmetricEigen symmetric_eigen(const Matrix& s);

}  // namespace hilora
