// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <numeric>

#include "hilora/errors.hpp"
#include "hilora/gradcheck.hpp"
#include "hilora/model.hpp"
#include "hilora/numerics.hpp"
#include "support.hpp"

using namespace hilora;

namespace {

LoraAdapter zeros(std::size_t p, std::size_t q, std::size_t r) { return LoraAdapter(Matrix(p, r), Matrix(r, q)); }

AdapterPath random_path(std::size_t p, std::size_t q, std::size_t r, std::mt19937_64& rng) {
    return {LoraAdapter(test::random_matrix(p, r, rng, 0.3), test::random_matrix(r, q, rng, 0.3)),
            LoraAdapter(test::random_matrix(p, r, rng, 0.3), test::random_matrix(r, q, rng, 0.3)),
            LoraAdapter(test::random_matrix(p, r, rng, 0.3), test::random_matrix(r, q, rng, 0.3)), 0, 0};
}

// −log softmax(z)[y] computed directly.
double hand_loss(const std::vector<double>& z, std::size_t y) {
    double denom = 0.0;
    for (double v : z) denom += std::exp(v);
    return -std::log(std::exp(z[y]) / denom);
}

}  // namespace

TEST_CASE("backbone features are tanh of an affine map") {
    const FrozenBackbone bb(Matrix{{1, 0}, {0, 2}, {1, 1}}, {0.0, 0.5, -1.0});
    const auto f = bb.features(std::vector<double>{0.3, -0.2});
    CHECK(f[0] == doctest::Approx(std::tanh(0.3)));
    CHECK(f[1] == doctest::Approx(std::tanh(-0.4 + 0.5)));
    CHECK(f[2] == doctest::Approx(std::tanh(0.1 - 1.0)));
    CHECK_THROWS_AS(bb.features(std::vector<double>{1.0}), ConfigError);
    CHECK_THROWS_AS(FrozenBackbone(Matrix(3, 2), {0.0}), ConfigError);
}

TEST_CASE("forward") {
    std::mt19937_64 rng(1);
    const HeadModel model = HeadModel::random(5, 7, 4, 42);
    const std::vector<double> x{0.1, -0.3, 0.7, 1.2, -2.0};
    const auto phi = model.backbone().features(x);

    const LoraAdapter z = zeros(4, 7, 2);
    const AdapterPath base{z, z, z, 0, 0};
    const auto logits = forward(model, base, x);
    for (std::size_t c = 0; c < 4; ++c) {
        double v = 0.0;
        for (std::size_t k = 0; k < 7; ++k) v += model.w0()(c, k) * phi[k];
        CHECK(logits[c] == doctest::Approx(v).epsilon(1e-14));
    }

    // ΔW = −w0 through a full-rank root adapter.
    const AdapterPath cancel{LoraAdapter(Matrix::identity(4), -1.0 * model.w0()), zeros(4, 7, 4), zeros(4, 7, 4), 0, 0};
    for (double v : forward(model, cancel, x)) CHECK(v == doctest::Approx(0.0).scale(1.0).epsilon(1e-14));
    CHECK(dataset_loss(model, cancel, {{Sample{x, 2}}}) == doctest::Approx(std::log(4.0)).epsilon(1e-14));

    const AdapterPath path = random_path(4, 7, 2, rng);
    const Matrix w = compose_path(path, model.w0());
    const auto got = forward(model, path, x);
    const Eigen::VectorXd oracle = test::to_eigen(w) * Eigen::Map<const Eigen::VectorXd>(phi.data(), 7);
    for (std::size_t c = 0; c < 4; ++c) CHECK(std::abs(got[c] - oracle(static_cast<Eigen::Index>(c))) <= 1e-12);

    CHECK_THROWS_AS(forward(model, path, std::vector<double>{1.0, 2.0}), ConfigError);
}

TEST_CASE("dataset_loss") {
    const std::size_t h = 3;
    const FrozenBackbone bb(Matrix(h, 2), std::vector<double>(h, 0.0));
    const HeadModel uniform(Matrix(4, h), bb);
    const LoraAdapter z = zeros(4, h, 1);
    const AdapterPath path{z, z, z, 0, 0};
    CHECK(dataset_loss(uniform, path, {{Sample{{1, 2}, 3}}}) == doctest::Approx(std::log(4.0)).epsilon(1e-15));
    CHECK_THROWS_AS(dataset_loss(uniform, path, {}), PreconditionError);

    // Correct-class logit +1000 via w0 and a constant feature.
    const FrozenBackbone one(Matrix(1, 1), {10.0});
    Matrix w0(3, 1);
    w0(1, 0) = 1000.0 / std::tanh(10.0);
    const HeadModel confident(w0, one);
    const LoraAdapter z1 = zeros(3, 1, 1);
    CHECK(dataset_loss(confident, {z1, z1, z1, 0, 0}, {{Sample{{0.0}, 1}}}) <= 1e-12);
    // A confidently wrong sample is clamped at −log(1e-12).
    CHECK(dataset_loss(confident, {z1, z1, z1, 0, 0}, {{Sample{{0.0}, 0}}}) ==
          doctest::Approx(-std::log(1e-12)).epsilon(1e-12));

    std::mt19937_64 rng(2);
    const HeadModel model = HeadModel::random(3, 5, 4, 7, 1.0);
    const AdapterPath p = random_path(4, 5, 2, rng);
    const auto data = test::random_samples(3, 3, 4, rng);
    double expected = 0.0;
    for (const auto& s : data) expected += hand_loss(forward(model, p, s.x), s.y);
    CHECK(dataset_loss(model, p, data) == doctest::Approx(expected / 3.0).epsilon(1e-13));
    CHECK(dataset_loss(model, p, data) >= 0.0);
}

TEST_CASE("tier_gradient at stationary points") {
    const std::size_t classes = 3;
    const std::size_t h = 4;
    std::mt19937_64 rng(3);
    const FrozenBackbone bb(test::random_matrix(h, 2, rng), std::vector<double>(h, 0.1));
    const HeadModel model(Matrix(classes, h), bb);
    // One input carrying every label once: uniform logits are the exact minimum.
    std::vector<Sample> data;
    for (std::size_t y = 0; y < classes; ++y) data.push_back({{0.4, -0.9}, y});

    const LoraAdapter z = zeros(classes, h, 1);
    const AdapterPath at_min{z, z, z, 0, 0};
    const TierGradient g = tier_gradient(model, at_min, data, tier::Root{}, {});
    CHECK(frobenius_norm(g.d_b) <= 1e-8);
    CHECK(frobenius_norm(g.d_a) <= 1e-8);

    // A cluster adapter whose rows of A annihilate φ leaves the logits uniform,
    // so only the penalty contributes to dB.
    const auto phi = bb.features(data[0].x);
    Matrix a(1, h);
    a(0, 0) = phi[1];
    a(0, 1) = -phi[0];
    const Matrix b{{0.3}, {-1.2}, {0.5}};
    const Matrix anchor{{1.0}, {0.0}, {0.0}};
    const AdapterPath pure{z, LoraAdapter(b, a), z, 0, 0};
    const std::vector<PenaltyTerm> pen{{anchor, 1.0}};
    const TierGradient pg = tier_gradient(model, pure, data, tier::Cluster{0}, pen);
    CHECK(max_abs_diff(pg.d_b, orth_penalty_grad(anchor, b)) <= 1e-14);

    CHECK_THROWS_AS(tier_gradient(model, pure, data, tier::Cluster{3}, pen), ConfigError);
}

TEST_CASE("analytic gradients agree with central differences") {
    const GradcheckResult r = run_gradcheck({});
    CHECK(r.cases.size() >= 20);
    CHECK(r.max_rel_error <= 1e-4);
    bool saw[3] = {false, false, false};
    for (const auto& c : r.cases) {
        saw[0] |= c.tier == "root";
        saw[1] |= c.tier == "cluster";
        saw[2] |= c.tier == "leaf";
    }
    CHECK((saw[0] && saw[1] && saw[2]));
}

TEST_CASE("local_update") {
    std::mt19937_64 rng(4);
    const HeadModel model = HeadModel::random(4, 6, 3, 9, 1.0);
    const auto data = test::random_samples(20, 4, 3, rng);
    const AdapterPath path = random_path(3, 6, 2, rng);
    const std::vector<PenaltyTerm> pen{{path.root.b(), 0.5}};

    CHECK(local_update(model, path, data, tier::Cluster{0}, pen, {0.05, 0, 0}) == path.cluster);
    CHECK_THROWS_AS(local_update(model, path, data, tier::Cluster{0}, pen, {0.0, 1, 0}), ConfigError);
    CHECK_THROWS_AS(local_update(model, path, data, tier::Cluster{0}, pen, {0.05, -1, 0}), ConfigError);

    // One full-batch step is exactly adapter − lr·gradient.
    const TierGradient g = tier_gradient(model, path, data, tier::Cluster{0}, pen);
    const LoraAdapter step = local_update(model, path, data, tier::Cluster{0}, pen, {0.05, 1, 0});
    CHECK(max_abs_diff(step.b(), path.cluster.b() - 0.05 * g.d_b) <= 1e-15);
    CHECK(max_abs_diff(step.a(), path.cluster.a() - 0.05 * g.d_a) <= 1e-15);

    // Frozen tiers are read only.
    const AdapterPath before = path;
    std::mt19937_64 shuffle(1);
    (void)local_update(model, path, data, tier::Cluster{0}, pen, {0.05, 3, 4}, shuffle);
    CHECK(path.root == before.root);
    CHECK(path.leaf == before.leaf);

    // Mini-batch mode is reproducible for a fixed stream.
    std::mt19937_64 s1(5);
    std::mt19937_64 s2(5);
    CHECK(local_update(model, path, data, tier::Leaf{0}, pen, {0.05, 2, 6}, s1) ==
          local_update(model, path, data, tier::Leaf{0}, pen, {0.05, 2, 6}, s2));
}

TEST_CASE("full-batch descent is monotone and fits a separable toy problem") {
    const HeadModel model = HeadModel::random(2, 8, 2, 11, 0.1);
    std::vector<Sample> data;
    for (int k = 0; k < 5; ++k) {
        data.push_back({{-2.0 - 0.1 * k, 0.3 * k - 0.6}, 0});
        data.push_back({{2.0 + 0.1 * k, 0.6 - 0.3 * k}, 1});
    }
    std::mt19937_64 rng(6);
    const LoraAdapter z = zeros(2, 8, 1);
    AdapterPath path{LoraAdapter::zero_b(2, 8, 1, rng, 1.0), z, z, 0, 0};

    double prev = dataset_loss(model, path, data);
    for (int step = 0; step < 200; ++step) {
        path.root = local_update(model, path, data, tier::Root{}, {}, {0.01, 1, 0});
        const double now = dataset_loss(model, path, data);
        CHECK(now <= prev + 1e-12);
        prev = now;
    }

    AdapterPath fit{LoraAdapter::zero_b(2, 8, 1, rng, 1.0), z, z, 0, 0};
    fit.root = local_update(model, fit, data, tier::Root{}, {}, {0.5, 200, 0});
    std::size_t correct = 0;
    for (const auto& s : data) {
        const auto logits = forward(model, fit, s.x);
        correct += (logits[1] > logits[0]) == (s.y == 1);
    }
    CHECK(correct == data.size());
}
