// SPDX-License-Identifier: Apache-2.0

#include "hilora/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "hilora/errors.hpp"
#include "hilora/kernels.hpp"

namespace hilora {

namespace {

constexpr int kMaxSvdSweeps = 60;
constexpr double kSvdTolerance = 1e-12;
constexpr int kMaxEigenSweeps = 100;
constexpr double kOrthonormalTolerance = 1e-8;

double column_dot(const Matrix& w, std::size_t i, std::size_t j) {
    double acc = 0.0;
    for (std::size_t k = 0; k < w.rows(); ++k) acc += w(k, i) * w(k, j);
    return acc;
}

void rotate_columns(Matrix& w, std::size_t i, std::size_t j, double c, double s) {
    for (std::size_t k = 0; k < w.rows(); ++k) {
        const double wi = w(k, i);
        const double wj = w(k, j);
        w(k, i) = c * wi - s * wj;
        w(k, j) = s * wi + c * wj;
    }
}

// Orthonormal columns `basis[:, 0..filled)` are extended at column `target`
// by the first standard basis vector with a non-negligible residual after
// two Gram-Schmidt passes.
void complete_column(Matrix& basis, const std::vector<bool>& filled, std::size_t target) {
    const std::size_t p = basis.rows();
    for (std::size_t e = 0; e < p; ++e) {
        std::vector<double> v(p, 0.0);
        v[e] = 1.0;
        for (int pass = 0; pass < 2; ++pass) {
            for (std::size_t c = 0; c < basis.cols(); ++c) {
                if (!filled[c]) continue;
                double dot = 0.0;
                for (std::size_t k = 0; k < p; ++k) dot += basis(k, c) * v[k];
                for (std::size_t k = 0; k < p; ++k) v[k] -= dot * basis(k, c);
            }
        }
        double norm = 0.0;
        for (double x : v) norm += x * x;
        norm = std::sqrt(norm);
        if (norm > 1e-6) {
            for (std::size_t k = 0; k < p; ++k) basis(k, target) = v[k] / norm;
            return;
        }
    }
    throw Error("complete_column: could not extend orthonormal basis");
}

// True when the first largest-magnitude entry of column c is negative.
bool needs_flip(const Matrix& u, std::size_t c) {
    std::size_t best = 0;
    double best_abs = -1.0;
    for (std::size_t r = 0; r < u.rows(); ++r) {
        const double a = std::abs(u(r, c));
        if (a > best_abs) {
            best_abs = a;
            best = r;
        }
    }
    return u(best, c) < 0.0;
}

void flip_column(Matrix& u, std::size_t c) {
    for (std::size_t r = 0; r < u.rows(); ++r) u(r, c) = -u(r, c);
}

void apply_sign_convention(Matrix& u, Matrix& vt) {
    for (std::size_t c = 0; c < u.cols(); ++c) {
        if (!needs_flip(u, c)) continue;
        flip_column(u, c);
        for (std::size_t j = 0; j < vt.cols(); ++j) vt(c, j) = -vt(c, j);
    }
}

}  // namespace

Matrix SvdFactors::reconstruct() const {
    Matrix scaled = u;
    for (std::size_t r = 0; r < scaled.rows(); ++r)
        for (std::size_t c = 0; c < scaled.cols(); ++c) scaled(r, c) *= singular_values[c];
    return kernels::matmul(scaled, vt);
}

Matrix matmul(const Matrix& a, const Matrix& b) { return kernels::matmul(a, b); }
Matrix matmul_at_b(const Matrix& a, const Matrix& b) { return kernels::matmul_at_b(a, b); }
Matrix matmul_a_bt(const Matrix& a, const Matrix& b) { return kernels::matmul_a_bt(a, b); }

double frobenius_norm_sq(const Matrix& m) {
    double acc = 0.0;
    for (double v : m.values()) acc += v * v;
    return acc;
}

double frobenius_norm(const Matrix& m) { return std::sqrt(frobenius_norm_sq(m)); }

SvdFactors truncated_svd(const Matrix& m, std::size_t k) {
    const std::size_t min_dim = std::min(m.rows(), m.cols());
    if (k == 0 || k > min_dim) {
        throw ConfigError("truncated_svd: rank " + std::to_string(k) + " outside [1, " +
                          std::to_string(min_dim) + "]");
    }
    if (!m.all_finite()) throw PreconditionError("truncated_svd: non-finite input");

    const bool transposed = m.rows() < m.cols();
    Matrix work = transposed ? m.transposed() : m;
    const std::size_t n = work.cols();
    Matrix v = Matrix::identity(n);

    for (int sweep = 0; sweep < kMaxSvdSweeps; ++sweep) {
        bool rotated = false;
        for (std::size_t i = 0; i + 1 < n; ++i) {
            for (std::size_t j = i + 1; j < n; ++j) {
                const double alpha = column_dot(work, i, i);
                const double beta = column_dot(work, j, j);
                const double gamma = column_dot(work, i, j);
                if (gamma == 0.0 || std::abs(gamma) <= kSvdTolerance * std::sqrt(alpha * beta)) continue;
                rotated = true;
                const double zeta = (beta - alpha) / (2.0 * gamma);
                const double t = (zeta >= 0.0 ? 1.0 : -1.0) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                rotate_columns(work, i, j, c, s);
                rotate_columns(v, i, j, c, s);
            }
        }
        if (!rotated) break;
    }

    std::vector<double> sigma(n);
    for (std::size_t j = 0; j < n; ++j) sigma[j] = std::sqrt(column_dot(work, j, j));
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return sigma[a] > sigma[b]; });

    const double sigma_max = sigma[order[0]];
    const double zero_cut = std::max(kDegenerateNorm, sigma_max * 1e-13);

    // Columns of `work` normalized are the left vectors of the working
    // orientation; `v` holds its right vectors.
    Matrix work_left(work.rows(), k);
    Matrix work_right(n, k);
    std::vector<double> values(k);
    std::vector<bool> filled(k, false);
    for (std::size_t c = 0; c < k; ++c) {
        const std::size_t src = order[c];
        values[c] = sigma[src];
        for (std::size_t r = 0; r < n; ++r) work_right(r, c) = v(r, src);
        if (sigma[src] > zero_cut) {
            for (std::size_t r = 0; r < work.rows(); ++r) work_left(r, c) = work(r, src) / sigma[src];
            filled[c] = true;
        }
    }
    for (std::size_t c = 0; c < k; ++c) {
        if (filled[c]) continue;
        complete_column(work_left, filled, c);
        filled[c] = true;
    }

    SvdFactors out;
    out.singular_values = std::move(values);
    if (transposed) {
        out.u = std::move(work_right);
        out.vt = work_left.transposed();
    } else {
        out.u = std::move(work_left);
        out.vt = work_right.transposed();
    }
    apply_sign_convention(out.u, out.vt);
    return out;
}

SvdFactors thin_svd(const Matrix& m) { return truncated_svd(m, std::min(m.rows(), m.cols())); }

Matrix orthonormal_columns(const Matrix& m, std::size_t r) { return truncated_svd(m, r).u; }

double orthonormality_defect(const Matrix& u) {
    const Matrix g = kernels::matmul_at_b(u, u);
    double worst = 0.0;
    for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j)
            worst = std::max(worst, std::abs(g(i, j) - (i == j ? 1.0 : 0.0)));
    return worst;
}

double subspace_overlap(const Matrix& u1, const Matrix& u2) {
    if (u1.rows() != u2.rows()) {
        throw ConfigError("subspace_overlap: row mismatch " + std::to_string(u1.rows()) + " vs " +
                          std::to_string(u2.rows()));
    }
    if (orthonormality_defect(u1) > kOrthonormalTolerance || orthonormality_defect(u2) > kOrthonormalTolerance) {
        throw PreconditionError("subspace_overlap: arguments must have orthonormal columns");
    }
    return frobenius_norm_sq(kernels::matmul_at_b(u1, u2));
}

SymmetricEigen symmetric_eigen(const Matrix& s) {
    if (s.rows() != s.cols()) throw ConfigError("symmetric_eigen: matrix is not square");
    const std::size_t n = s.rows();
    Matrix a = s;
    Matrix v = Matrix::identity(n);

    const double scale = std::max(frobenius_norm(a), kDegenerateNorm);
    for (int sweep = 0; sweep < kMaxEigenSweeps; ++sweep) {
        double off = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j) off += a(i, j) * a(i, j);
        if (std::sqrt(off) <= 1e-15 * scale) break;

        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                const double apq = a(p, q);
                if (apq == 0.0) continue;
                const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
                const double t = (theta >= 0.0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double sn = t * c;
                // A <- Jᵀ A J with J the (p, q) rotation.
                for (std::size_t k = 0; k < n; ++k) {
                    const double akp = a(k, p);
                    const double akq = a(k, q);
                    a(k, p) = c * akp - sn * akq;
                    a(k, q) = sn * akp + c * akq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double apk = a(p, k);
                    const double aqk = a(q, k);
                    a(p, k) = c * apk - sn * aqk;
                    a(q, k) = sn * apk + c * aqk;
                }
                a(p, q) = 0.0;
                a(q, p) = 0.0;
                rotate_columns(v, p, q, c, sn);
            }
        }
    }

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return a(x, x) < a(y, y); });

    SymmetricEigen out;
    out.values.resize(n);
    out.vectors = Matrix(n, n);
    for (std::size_t c = 0; c < n; ++c) {
        out.values[c] = a(order[c], order[c]);
        for (std::size_t r = 0; r < n; ++r) out.vectors(r, c) = v(r, order[c]);
    }
    for (std::size_t c = 0; c < n; ++c)
        if (needs_flip(out.vectors, c)) flip_column(out.vectors, c);
    return out;
}

}  // namespace hilora
