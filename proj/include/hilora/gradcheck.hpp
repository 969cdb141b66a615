// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace hilora {

struct GradcheckOptions {
    std::size_t configurations = 24;
    double step = 1e-5;
    std::size_t input_dim = 6;
    std::size_t hidden = 8;
    std::size_t classes = 5;
    std::size_t rank = 2;
    std::size_t samples = 12;
    std::uint64_t seed = 0;
};

struct GradcheckCase {
    std::string tier;
    double gamma = 0.0;
    double max_rel_error = 0.0;
};

struct GradcheckResult {
    std::vector<GradcheckCase> cases;
    double max_rel_error = 0.0;
};

/// Compares tier_gradient against central differences of tier_objective
/// over random models, data, adapters, tiers and penalty weights. The
/// per-entry error is |g − ĝ| / max(|g|, |ĝ|, 1e-6).
GradcheckResult run_gradcheck(const GradcheckOptions& options = {});

}  // namespace hilora
