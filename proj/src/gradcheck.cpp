// SPDX-License-Identifier: Apache-2.0

#include "hilora/gradcheck.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <random>

#include "hilora/errors.hpp"
#include "hilora/model.hpp"
#include "hilora/rng.hpp"

namespace hilora {

namespace {

constexpr double kRelFloor = 1e-6;

Matrix gaussian(std::size_t rows, std::size_t cols, double scale, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, scale);
    Matrix m(rows, cols);
    for (double& v : m.values()) v = dist(rng);
    return m;
}

LoraAdapter random_adapter(std::size_t p, std::size_t q, std::size_t r, std::mt19937_64& rng) {
    return LoraAdapter(gaussian(p, r, 0.5, rng), gaussian(r, q, 0.5, rng));
}

double rel_error(double analytic, double numeric) {
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), kRelFloor});
}

// Central difference of the objective along one entry of the active factor.
double central_difference(const HeadModel& model, AdapterPath path, const std::vector<Sample>& data,
                          const TierId& active, const std::vector<PenaltyTerm>& penalties, bool in_b, std::size_t row,
                          std::size_t col, double h) {
    LoraAdapter& adapter = path.at(active);
    Matrix b = adapter.b();
    Matrix a = adapter.a();
    Matrix& target = in_b ? b : a;
    const double x = target(row, col);
    target(row, col) = x + h;
    adapter = LoraAdapter(b, a);
    const double plus = tier_objective(model, path, data, active, penalties);
    target(row, col) = x - h;
    adapter = LoraAdapter(b, a);
    const double minus = tier_objective(model, path, data, active, penalties);
    return (plus - minus) / (2.0 * h);
}

}  // namespace

GradcheckResult run_gradcheck(const GradcheckOptions& o) {
    if (o.configurations == 0) throw ConfigError("gradcheck configurations: must be positive");
    if (!(o.step > 0.0)) throw ConfigError("gradcheck step: must be positive");
    static constexpr std::array<double, 4> kGammas{0.0, 0.1, 1.0, 10.0};

    GradcheckResult result;
    for (std::size_t c = 0; c < o.configurations; ++c) {
        auto rng = make_rng(o.seed, {c});
        const HeadModel model = HeadModel::random(o.input_dim, o.hidden, o.classes, rng(), 1.0);
        std::normal_distribution<double> feature(0.0, 1.0);
        std::uniform_int_distribution<std::size_t> label(0, o.classes - 1);
        std::vector<Sample> data(o.samples);
        for (Sample& s : data) {
            s.x.resize(o.input_dim);
            for (double& v : s.x) v = feature(rng);
            s.y = label(rng);
        }

        const std::size_t p = o.classes;
        const std::size_t q = o.hidden;
        AdapterPath path{random_adapter(p, q, o.rank, rng), random_adapter(p, q, o.rank, rng),
                         random_adapter(p, q, o.rank, rng), 0, 0};
        const double gamma = kGammas[c % kGammas.size()];
        const double gamma2 = kGammas[(c / kGammas.size()) % kGammas.size()];
        TierId active;
        std::vector<PenaltyTerm> penalties;
        GradcheckCase record;
        switch (c % 3) {
            case 0:
                active = tier::Root{};
                record.tier = "root";
                break;
            case 1:
                active = tier::Cluster{0};
                penalties = {{path.root.b(), gamma}};
                record.tier = "cluster";
                break;
            default:
                active = tier::Leaf{0};
                penalties = {{path.root.b(), gamma}, {path.cluster.b(), gamma2}};
                record.tier = "leaf";
                break;
        }
        if (!penalties.empty()) record.gamma = gamma;

        const TierGradient g = tier_gradient(model, path, data, active, penalties);
        for (std::size_t i = 0; i < p; ++i) {
            for (std::size_t k = 0; k < o.rank; ++k) {
                const double fd = central_difference(model, path, data, active, penalties, true, i, k, o.step);
                record.max_rel_error = std::max(record.max_rel_error, rel_error(g.d_b(i, k), fd));
            }
        }
        for (std::size_t k = 0; k < o.rank; ++k) {
            for (std::size_t j = 0; j < q; ++j) {
                const double fd = central_difference(model, path, data, active, penalties, false, k, j, o.step);
                record.max_rel_error = std::max(record.max_rel_error, rel_error(g.d_a(k, j), fd));
            }
        }
        result.max_rel_error = std::max(result.max_rel_error, record.max_rel_error);
        result.cases.push_back(std::move(record));
    }
    return result;
}

}  // namespace hilora
