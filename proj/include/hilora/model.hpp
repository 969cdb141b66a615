// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "hilora/lora.hpp"
#include "hilora/matrix.hpp"

namespace hilora {

/// A labeled example. Labels are zero-based class indices.
struct Sample {
    std::vector<double> x;
    std::size_t y = 0;

    friend bool operator==(const Sample&, const Sample&) = default;
};

/// Fixed random-feature map φ(x) = tanh(projection · x + bias).
class FrozenBackbone {
public:
    FrozenBackbone(Matrix projection, std::vector<double> bias);

    std::size_t input_dim() const noexcept { return projection_.cols(); }
    std::size_t feature_dim() const noexcept { return projection_.rows(); }

    std::vector<double> features(std::span<const double> x) const;
    /// Row k holds φ(samples[k].x).
    Matrix features(std::span<const Sample> samples) const;

private:
    Matrix projection_;
    std::vector<double> bias_;
};

/// Predictor f(x; W) = (w0 + ΔW) · φ(x) over C classes; w0 and the backbone
/// never change after construction.
class HeadModel {
public:
    HeadModel(Matrix w0, FrozenBackbone backbone);

    /// Gaussian projection (std 1/√d), uniform bias in [-0.5, 0.5] and a
    /// Gaussian base head with std `w0_scale`/√h.
    static HeadModel random(std::size_t input_dim, std::size_t hidden, std::size_t classes, std::uint64_t seed,
                            double w0_scale = 0.1);

    const Matrix& w0() const noexcept { return w0_; }
    const FrozenBackbone& backbone() const noexcept { return backbone_; }
    std::size_t classes() const noexcept { return w0_.rows(); }
    std::size_t hidden() const noexcept { return w0_.cols(); }

private:
    Matrix w0_;
    FrozenBackbone backbone_;
};

/// An active-tier anchor: γ · ‖basisᵀ · B_active‖_F².
struct PenaltyTerm {
    Matrix basis;
    double gamma = 0.0;
};

struct TierGradient {
    Matrix d_b;
    Matrix d_a;
};

struct OptimizerConfig {
    double lr = 0.05;
    int epochs = 1;
    /// 0 selects deterministic full-batch descent.
    std::size_t batch_size = 0;
};

std::vector<double> forward(const HeadModel& model, const AdapterPath& path, std::span<const double> x);

/// Logits for an explicit total weight (w0 + ΔW already summed).
std::vector<double> logits_for_weight(const HeadModel& model, const Matrix& weight, std::span<const double> x);

/// Mean cross-entropy of the path's model; each per-sample probability is
/// clamped below at 1e-12 before the log.
double dataset_loss(const HeadModel& model, const AdapterPath& path, std::span<const Sample> data);

/// dataset_loss for w0 + delta.
double loss_for_delta(const HeadModel& model, const Matrix& delta, std::span<const Sample> data);

/// The smooth training objective of the active tier: unclamped mean
/// cross-entropy plus every penalty term on the active B.
double tier_objective(const HeadModel& model, const AdapterPath& path, std::span<const Sample> data,
                      const TierId& active, std::span<const PenaltyTerm> penalties);

/// Analytic gradient of tier_objective with respect to the active (B, A).
TierGradient tier_gradient(const HeadModel& model, const AdapterPath& path, std::span<const Sample> data,
                           const TierId& active, std::span<const PenaltyTerm> penalties);

/// Gradient descent on the active adapter only; other tiers are read, never
/// written. Mini-batch mode shuffles with `rng` once per epoch.
LoraAdapter local_update(const HeadModel& model, const AdapterPath& path, std::span<const Sample> data,
                         const TierId& active, std::span<const PenaltyTerm> penalties, const OptimizerConfig& opt,
                         std::mt19937_64& rng);

/// Full-batch variant used where no randomness is involved.
LoraAdapter local_update(const HeadModel& model, const AdapterPath& path, std::span<const Sample> data,
                         const TierId& active, std::span<const PenaltyTerm> penalties, const OptimizerConfig& opt);

}  // namespace hilora
