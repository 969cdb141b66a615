// SPDX-License-Identifier: Apache-2.0

#include "hilora/lora.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <iomanip>
#include <istream>
#include <limits>
#include <ostream>
#include <string>

#include "hilora/errors.hpp"
#include "hilora/numerics.hpp"

namespace hilora {

LoraAdapter::LoraAdapter(Matrix b, Matrix a) : b_(std::move(b)), a_(std::move(a)) {
    if (b_.cols() != a_.rows()) {
        throw ConfigError("LoraAdapter: b has " + std::to_string(b_.cols()) + " columns but a has " +
                          std::to_string(a_.rows()) + " rows");
    }
    if (b_.cols() == 0 || b_.cols() > std::min(b_.rows(), a_.cols())) {
        throw ConfigError("LoraAdapter: rank " + std::to_string(b_.cols()) + " must lie in [1, min(p, q)]");
    }
}

LoraAdapter LoraAdapter::zero_b(std::size_t p, std::size_t q, std::size_t rank, std::mt19937_64& rng,
                                double scale) {
    std::normal_distribution<double> normal(0.0, scale / std::sqrt(static_cast<double>(q)));
    Matrix a(rank, q);
    for (double& v : a.values()) v = normal(rng);
    return LoraAdapter(Matrix(p, rank), std::move(a));
}

void AdapterPath::check() const {
    for (const LoraAdapter* ad : {&cluster, &leaf}) {
        if (ad->p() != root.p() || ad->q() != root.q()) {
            throw ConfigError("AdapterPath: tiers disagree on (p, q)");
        }
    }
}

LoraAdapter& AdapterPath::at(const TierId& t) {
    if (std::holds_alternative<tier::Root>(t)) return root;
    if (std::holds_alternative<tier::Cluster>(t)) return cluster;
    return leaf;
}

const LoraAdapter& AdapterPath::at(const TierId& t) const {
    return const_cast<AdapterPath&>(*this).at(t);
}

Matrix delta(const LoraAdapter& adapter) { return matmul(adapter.b(), adapter.a()); }

Matrix path_delta(const AdapterPath& path) {
    path.check();
    Matrix d = delta(path.root);
    d += delta(path.cluster);
    d += delta(path.leaf);
    return d;
}

Matrix compose_path(const AdapterPath& path, const Matrix& w0) {
    path.check();
    if (w0.rows() != path.root.p() || w0.cols() != path.root.q()) {
        throw ConfigError("compose_path: w0 is " + std::to_string(w0.rows()) + "x" + std::to_string(w0.cols()) +
                          ", adapters expect " + std::to_string(path.root.p()) + "x" +
                          std::to_string(path.root.q()));
    }
    Matrix w = w0;
    w += delta(path.root);
    w += delta(path.cluster);
    w += delta(path.leaf);
    return w;
}

double orth_penalty(const Matrix& b_frozen, const Matrix& b_active) {
    return frobenius_norm_sq(matmul_at_b(b_frozen, b_active));
}

Matrix orth_penalty_grad(const Matrix& b_frozen, const Matrix& b_active) {
    Matrix g = matmul(b_frozen, matmul_at_b(b_frozen, b_active));
    g *= 2.0;
    return g;
}

namespace {

void write_matrix(std::ostream& out, const Matrix& m) {
    for (std::size_t r = 0; r < m.rows(); ++r) {
        for (std::size_t c = 0; c < m.cols(); ++c) out << (c ? " " : "") << m(r, c);
        out << '\n';
    }
}

Matrix read_matrix(std::istream& in, std::size_t rows, std::size_t cols) {
    Matrix m(rows, cols);
    std::string token;
    for (double& v : m.values()) {
        if (!(in >> token)) throw ConfigError("read_adapter: truncated entry list");
        char* end = nullptr;
        // strtod, unlike operator>>, accepts subnormal values.
        v = std::strtod(token.c_str(), &end);
        if (end != token.c_str() + token.size()) throw ConfigError("read_adapter: bad entry '" + token + "'");
    }
    return m;
}

}  // namespace

void write_adapter(std::ostream& out, const LoraAdapter& adapter) {
    const auto old_precision = out.precision(std::numeric_limits<double>::max_digits10);
    out << "hilora-lora v1\n" << adapter.p() << ' ' << adapter.q() << ' ' << adapter.rank() << '\n';
    write_matrix(out, adapter.b());
    write_matrix(out, adapter.a());
    out.precision(old_precision);
}

LoraAdapter read_adapter(std::istream& in) {
    std::string magic, version;
    if (!(in >> magic >> version) || magic != "hilora-lora" || version != "v1") {
        throw ConfigError("read_adapter: not a hilora-lora v1 checkpoint");
    }
    std::size_t p = 0, q = 0, r = 0;
    if (!(in >> p >> q >> r)) throw ConfigError("read_adapter: missing dimensions");
    Matrix b = read_matrix(in, p, r);
    Matrix a = read_matrix(in, r, q);
    return LoraAdapter(std::move(b), std::move(a));
}

}  // namespace hilora
