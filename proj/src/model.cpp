// SPDX-License-Identifier: Apache-2.0

#include "hilora/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "hilora/errors.hpp"
#include "hilora/numerics.hpp"

namespace hilora {

namespace {

constexpr double kProbabilityFloor = 1e-12;

double log_sum_exp(std::span<const double> z) {
    const double top = *std::max_element(z.begin(), z.end());
    double acc = 0.0;
    for (double v : z) acc += std::exp(v - top);
    return top + std::log(acc);
}

void check_active(const AdapterPath& path, const TierId& active) {
    if (const auto* c = std::get_if<tier::Cluster>(&active); c && c->index != path.cluster_index) {
        throw ConfigError("active cluster tier " + std::to_string(c->index) + " is not on this path (cluster " +
                          std::to_string(path.cluster_index) + ")");
    }
    if (const auto* l = std::get_if<tier::Leaf>(&active); l && l->index != path.client_index) {
        throw ConfigError("active leaf tier " + std::to_string(l->index) + " is not on this path (client " +
                          std::to_string(path.client_index) + ")");
    }
}

void check_data(const HeadModel& model, std::span<const Sample> data, const char* op) {
    if (data.empty()) throw PreconditionError(std::string(op) + ": empty dataset");
    for (const Sample& s : data) {
        if (s.x.size() != model.backbone().input_dim()) {
            throw ConfigError(std::string(op) + ": sample has " + std::to_string(s.x.size()) +
                              " features, model expects " + std::to_string(model.backbone().input_dim()));
        }
        if (s.y >= model.classes()) throw ConfigError(std::string(op) + ": label out of range");
    }
}

Matrix total_weight(const HeadModel& model, const AdapterPath& path) { return compose_path(path, model.w0()); }

// Mean of (softmax(W φ_k) - e_{y_k}) φ_kᵀ over the selected rows, and the
// unclamped mean cross-entropy.
struct DeltaGradient {
    Matrix g;
    double loss = 0.0;
};

DeltaGradient delta_gradient(const Matrix& weight, const Matrix& phi, std::span<const Sample> data,
                             std::span<const std::size_t> rows) {
    const std::size_t classes = weight.rows();
    const std::size_t hidden = weight.cols();
    DeltaGradient out{Matrix(classes, hidden), 0.0};
    std::vector<double> z(classes);
    const double inv_n = 1.0 / static_cast<double>(rows.size());
    for (std::size_t k : rows) {
        const auto f = phi.row(k);
        for (std::size_t c = 0; c < classes; ++c) {
            const auto wr = weight.row(c);
            double acc = 0.0;
            for (std::size_t h = 0; h < hidden; ++h) acc += wr[h] * f[h];
            z[c] = acc;
        }
        const double lse = log_sum_exp(z);
        const std::size_t y = data[k].y;
        out.loss += (lse - z[y]) * inv_n;
        for (std::size_t c = 0; c < classes; ++c) {
            const double coeff = (std::exp(z[c] - lse) - (c == y ? 1.0 : 0.0)) * inv_n;
            auto gr = out.g.row(c);
            for (std::size_t h = 0; h < hidden; ++h) gr[h] += coeff * f[h];
        }
    }
    return out;
}

TierGradient active_gradient(const LoraAdapter& active, const Matrix& g_delta,
                             std::span<const PenaltyTerm> penalties) {
    TierGradient out{matmul_a_bt(g_delta, active.a()), matmul_at_b(active.b(), g_delta)};
    for (const PenaltyTerm& term : penalties) {
        if (term.gamma == 0.0) continue;
        Matrix pg = orth_penalty_grad(term.basis, active.b());
        pg *= term.gamma;
        out.d_b += pg;
    }
    return out;
}

}  // namespace

FrozenBackbone::FrozenBackbone(Matrix projection, std::vector<double> bias)
    : projection_(std::move(projection)), bias_(std::move(bias)) {
    if (bias_.size() != projection_.rows()) throw ConfigError("FrozenBackbone: bias length must equal hidden width");
}

std::vector<double> FrozenBackbone::features(std::span<const double> x) const {
    if (x.size() != input_dim()) {
        throw ConfigError("FrozenBackbone: input has " + std::to_string(x.size()) + " features, expected " +
                          std::to_string(input_dim()));
    }
    std::vector<double> out(feature_dim());
    for (std::size_t h = 0; h < out.size(); ++h) {
        const auto row = projection_.row(h);
        double acc = bias_[h];
        for (std::size_t j = 0; j < x.size(); ++j) acc += row[j] * x[j];
        out[h] = std::tanh(acc);
    }
    return out;
}

Matrix FrozenBackbone::features(std::span<const Sample> samples) const {
    Matrix phi(samples.size(), feature_dim());
    for (std::size_t k = 0; k < samples.size(); ++k) {
        const auto f = features(samples[k].x);
        std::copy(f.begin(), f.end(), phi.row(k).begin());
    }
    return phi;
}

HeadModel::HeadModel(Matrix w0, FrozenBackbone backbone) : w0_(std::move(w0)), backbone_(std::move(backbone)) {
    if (w0_.cols() != backbone_.feature_dim()) {
        throw ConfigError("HeadModel: w0 has " + std::to_string(w0_.cols()) + " columns, backbone emits " +
                          std::to_string(backbone_.feature_dim()) + " features");
    }
}

HeadModel HeadModel::random(std::size_t input_dim, std::size_t hidden, std::size_t classes, std::uint64_t seed,
                            double w0_scale) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> proj(0.0, 1.0 / std::sqrt(static_cast<double>(input_dim)));
    std::uniform_real_distribution<double> bias_dist(-0.5, 0.5);
    std::normal_distribution<double> head(0.0, w0_scale / std::sqrt(static_cast<double>(hidden)));

    Matrix projection(hidden, input_dim);
    for (double& v : projection.values()) v = proj(rng);
    std::vector<double> bias(hidden);
    for (double& v : bias) v = bias_dist(rng);
    Matrix w0(classes, hidden);
    for (double& v : w0.values()) v = head(rng);
    return HeadModel(std::move(w0), FrozenBackbone(std::move(projection), std::move(bias)));
}

std::vector<double> logits_for_weight(const HeadModel& model, const Matrix& weight, std::span<const double> x) {
    if (weight.rows() != model.classes() || weight.cols() != model.hidden()) {
        throw ConfigError("logits_for_weight: weight shape does not match the head");
    }
    const auto f = model.backbone().features(x);
    std::vector<double> z(weight.rows());
    for (std::size_t c = 0; c < z.size(); ++c) {
        const auto wr = weight.row(c);
        double acc = 0.0;
        for (std::size_t h = 0; h < f.size(); ++h) acc += wr[h] * f[h];
        z[c] = acc;
    }
    return z;
}

std::vector<double> forward(const HeadModel& model, const AdapterPath& path, std::span<const double> x) {
    return logits_for_weight(model, total_weight(model, path), x);
}

double loss_for_delta(const HeadModel& model, const Matrix& delta, std::span<const Sample> data) {
    check_data(model, data, "dataset_loss");
    Matrix weight = model.w0();
    weight += delta;
    double total = 0.0;
    for (const Sample& s : data) {
        const auto z = logits_for_weight(model, weight, s.x);
        const double log_p = z[s.y] - log_sum_exp(z);
        total += -std::max(log_p, std::log(kProbabilityFloor));
    }
    return total / static_cast<double>(data.size());
}

double dataset_loss(const HeadModel& model, const AdapterPath& path, std::span<const Sample> data) {
    return loss_for_delta(model, path_delta(path), data);
}

double tier_objective(const HeadModel& model, const AdapterPath& path, std::span<const Sample> data,
                      const TierId& active, std::span<const PenaltyTerm> penalties) {
    check_active(path, active);
    check_data(model, data, "tier_objective");
    const Matrix weight = total_weight(model, path);
    const Matrix phi = model.backbone().features(data);
    std::vector<std::size_t> rows(data.size());
    std::iota(rows.begin(), rows.end(), std::size_t{0});
    double value = delta_gradient(weight, phi, data, rows).loss;
    for (const PenaltyTerm& term : penalties) value += term.gamma * orth_penalty(term.basis, path.at(active).b());
    return value;
}

TierGradient tier_gradient(const HeadModel& model, const AdapterPath& path, std::span<const Sample> data,
                           const TierId& active, std::span<const PenaltyTerm> penalties) {
    check_active(path, active);
    check_data(model, data, "tier_gradient");
    const Matrix weight = total_weight(model, path);
    const Matrix phi = model.backbone().features(data);
    std::vector<std::size_t> rows(data.size());
    std::iota(rows.begin(), rows.end(), std::size_t{0});
    return active_gradient(path.at(active), delta_gradient(weight, phi, data, rows).g, penalties);
}

LoraAdapter local_update(const HeadModel& model, const AdapterPath& path, std::span<const Sample> data,
                         const TierId& active, std::span<const PenaltyTerm> penalties, const OptimizerConfig& opt,
                         std::mt19937_64& rng) {
    if (!(opt.lr > 0.0)) throw ConfigError("local_update: lr must be positive");
    if (opt.epochs < 0) throw ConfigError("local_update: epochs must be non-negative");
    check_active(path, active);
    check_data(model, data, "local_update");
    path.check();

    LoraAdapter current = path.at(active);
    if (opt.epochs == 0) return current;

    // The frozen tiers enter the logits only through their summed delta.
    Matrix frozen_weight = model.w0();
    for (const TierId t : {TierId{tier::Root{}}, TierId{tier::Cluster{path.cluster_index}},
                           TierId{tier::Leaf{path.client_index}}}) {
        if (t.index() != active.index()) frozen_weight += delta(path.at(t));
    }

    const Matrix phi = model.backbone().features(data);
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    const std::size_t batch = opt.batch_size == 0 ? data.size() : std::min(opt.batch_size, data.size());

    for (int epoch = 0; epoch < opt.epochs; ++epoch) {
        if (opt.batch_size != 0) std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t start = 0; start < order.size(); start += batch) {
            const std::size_t stop = std::min(order.size(), start + batch);
            const std::span<const std::size_t> rows(order.data() + start, stop - start);
            Matrix weight = frozen_weight;
            weight += delta(current);
            const DeltaGradient dg = delta_gradient(weight, phi, data, rows);
            const TierGradient grad = active_gradient(current, dg.g, penalties);
            current.b() -= opt.lr * grad.d_b;
            current.a() -= opt.lr * grad.d_a;
        }
    }
    if (!current.b().all_finite() || !current.a().all_finite()) {
        throw Error("local_update: diverged (non-finite adapter); reduce lr");
    }
    return current;
}

LoraAdapter local_update(const HeadModel& model, const AdapterPath& path, std::span<const Sample> data,
                         const TierId& active, std::span<const PenaltyTerm> penalties, const OptimizerConfig& opt) {
    if (opt.batch_size != 0) throw ConfigError("local_update: mini-batch mode needs an rng");
    std::mt19937_64 unused(0);
    return local_update(model, path, data, active, penalties, opt, unused);
}

}  // namespace hilora
