// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <random>
#include <variant>

#include "hilora/matrix.hpp"

namespace hilora {

/// One low-rank factor pair: ΔW = b · a with b (p x r) and a (r x q).
class LoraAdapter {
public:
    LoraAdapter() = default;
    LoraAdapter(Matrix b, Matrix a);

    /// b = 0 and a ~ N(0, (scale/√q)²); the delta is exactly zero.
    static LoraAdapter zero_b(std::size_t p, std::size_t q, std::size_t rank, std::mt19937_64& rng,
                              double scale = 0.01);

    const Matrix& b() const noexcept { return b_; }
    const Matrix& a() const noexcept { return a_; }
    Matrix& b() noexcept { return b_; }
    Matrix& a() noexcept { return a_; }

    std::size_t rank() const noexcept { return b_.cols(); }
    std::size_t p() const noexcept { return b_.rows(); }
    std::size_t q() const noexcept { return a_.cols(); }

    friend bool operator==(const LoraAdapter&, const LoraAdapter&) = default;

private:
    Matrix b_;
    Matrix a_;
};

namespace tier {
struct Root {};
struct Cluster {
    std::size_t index = 0;
};
struct Leaf {
    std::size_t index = 0;
};
}  // namespace tier

using TierId = std::variant<tier::Root, tier::Cluster, tier::Leaf>;

/// A client's root → cluster → leaf route.
struct AdapterPath {
    LoraAdapter root;
    LoraAdapter cluster;
    LoraAdapter leaf;
    std::size_t cluster_index = 0;
    std::size_t client_index = 0;

    /// Validates that all three adapters share p and q.
    void check() const;

    LoraAdapter& at(const TierId& t);
    const LoraAdapter& at(const TierId& t) const;
};

Matrix delta(const LoraAdapter& adapter);

/// Sum of the three tier deltas (the path's total update).
Matrix path_delta(const AdapterPath& path);

/// w0 + ΔW_root + ΔW_cluster + ΔW_leaf
Matrix compose_path(const AdapterPath& path, const Matrix& w0);

/// ‖b_frozenᵀ · b_active‖_F²
double orth_penalty(const Matrix& b_frozen, const Matrix& b_active);

/// ∂ orth_penalty / ∂ b_active = 2 · b_frozen · b_frozenᵀ · b_active
Matrix orth_penalty_grad(const Matrix& b_frozen, const Matrix& b_active);

// Checkpoint format (text, one token stream):
//   hilora-lora v1
//   p q r
//   <p*r entries of b, row-major, one row per line>
//   <r*q entries of a, row-major, one row per line>
// Entries use 17 significant digits so a round trip is exact.
void write_adapter(std::ostream& out, const LoraAdapter& adapter);
LoraAdapter read_adapter(std::istream& in);

}  // namespace hilora
