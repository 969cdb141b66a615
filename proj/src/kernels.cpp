// SPDX-License-Identifier: Apache-2.0

#include "hilora/kernels.hpp"

#include <string>

#include "hilora/errors.hpp"

namespace hilora::kernels {

namespace {

// Below this many multiply-adds the fork/join cost dominates.
constexpr std::size_t kParallelWork = 1 << 15;

void check_inner(std::size_t lhs, std::size_t rhs, const char* op) {
    if (lhs != rhs) {
        throw ConfigError(std::string(op) + ": inner dimension mismatch (" + std::to_string(lhs) +
                          " vs " + std::to_string(rhs) + ")");
    }
}

inline void matmul_row(const Matrix& a, const Matrix& b, Matrix& c, std::size_t i) {
    auto out = c.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
        const double aik = a(i, k);
        const auto brow = b.row(k);
        for (std::size_t j = 0; j < out.size(); ++j) out[j] += aik * brow[j];
    }
}

inline void matmul_at_b_row(const Matrix& a, const Matrix& b, Matrix& c, std::size_t i) {
    auto out = c.row(i);
    for (std::size_t k = 0; k < a.rows(); ++k) {
        const double aki = a(k, i);
        const auto brow = b.row(k);
        for (std::size_t j = 0; j < out.size(); ++j) out[j] += aki * brow[j];
    }
}

inline void matmul_a_bt_row(const Matrix& a, const Matrix& b, Matrix& c, std::size_t i) {
    const auto arow = a.row(i);
    for (std::size_t j = 0; j < b.rows(); ++j) {
        const auto brow = b.row(j);
        double acc = 0.0;
        for (std::size_t k = 0; k < arow.size(); ++k) acc += arow[k] * brow[k];
        c(i, j) = acc;
    }
}

}  // namespace

Matrix matmul_serial(const Matrix& a, const Matrix& b) {
    check_inner(a.cols(), b.rows(), "matmul");
    Matrix c(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) matmul_row(a, b, c, i);
    return c;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
    check_inner(a.cols(), b.rows(), "matmul");
    Matrix c(a.rows(), b.cols());
    const auto n = static_cast<long>(a.rows());
    const bool big = a.rows() * a.cols() * b.cols() >= kParallelWork;
#pragma omp parallel for schedule(static) if (big)
    for (long i = 0; i < n; ++i) matmul_row(a, b, c, static_cast<std::size_t>(i));
    return c;
}

Matrix matmul_at_b_serial(const Matrix& a, const Matrix& b) {
    check_inner(a.rows(), b.rows(), "matmul_at_b");
    Matrix c(a.cols(), b.cols());
    for (std::size_t i = 0; i < a.cols(); ++i) matmul_at_b_row(a, b, c, i);
    return c;
}

Matrix matmul_at_b(const Matrix& a, const Matrix& b) {
    check_inner(a.rows(), b.rows(), "matmul_at_b");
    Matrix c(a.cols(), b.cols());
    const auto n = static_cast<long>(a.cols());
    const bool big = a.rows() * a.cols() * b.cols() >= kParallelWork;
#pragma omp parallel for schedule(static) if (big)
    for (long i = 0; i < n; ++i) matmul_at_b_row(a, b, c, static_cast<std::size_t>(i));
    return c;
}

Matrix matmul_a_bt_serial(const Matrix& a, const Matrix& b) {
    check_inner(a.cols(), b.cols(), "matmul_a_bt");
    Matrix c(a.rows(), b.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) matmul_a_bt_row(a, b, c, i);
    return c;
}

Matrix matmul_a_bt(const Matrix& a, const Matrix& b) {
    check_inner(a.cols(), b.cols(), "matmul_a_bt");
    Matrix c(a.rows(), b.rows());
    const auto n = static_cast<long>(a.rows());
    const bool big = a.rows() * a.cols() * b.rows() >= kParallelWork;
#pragma omp parallel for schedule(static) if (big)
    for (long i = 0; i < n; ++i) matmul_a_bt_row(a, b, c, static_cast<std::size_t>(i));
    return c;
}

}  // namespace hilora::kernels
