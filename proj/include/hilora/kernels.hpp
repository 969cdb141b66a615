// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "hilora/matrix.hpp"

namespace hilora::kernels {

// Every kernel here has a serial reference twin. The parallel variants split
// work by output row only, so each output entry is accumulated in the same
// order as in the reference and results are bitwise identical.

Matrix matmul_serial(const Matrix& a, const Matrix& b);
Matrix matmul(const Matrix& a, const Matrix& b);

/// aᵀ·b without materializing the transpose.
Matrix matmul_at_b_serial(const Matrix& a, const Matrix& b);
Matrix matmul_at_b(const Matrix& a, const Matrix& b);

/// a·bᵀ without materializing the transpose.
Matrix matmul_a_bt_serial(const Matrix& a, const Matrix& b);
Matrix matmul_a_bt(const Matrix& a, const Matrix& b);

}  // namespace hilora::kernels
