// SPDX-License-Identifier: Apache-2.0

#include "hilora/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>

#include "hilora/errors.hpp"
#include "hilora/rng.hpp"

namespace hilora {

namespace {

constexpr std::size_t kMinClientSamples = 10;
constexpr int kMaxPriorRedraws = 100;
constexpr int kMaxSplitAttempts = 1000;

std::size_t draw_weighted(const std::vector<double>& weights, std::mt19937_64& rng) {
    std::discrete_distribution<std::size_t> dist(weights.begin(), weights.end());
    return dist(rng);
}

// Per-class pools of not-yet-distributed samples.
class ClassQueues {
public:
    ClassQueues(const LabeledPool& pool, std::mt19937_64& rng) : queues_(pool.classes) {
        for (std::size_t k = 0; k < pool.samples.size(); ++k) queues_[pool.samples[k].y].push_back(k);
        for (auto& q : queues_) std::shuffle(q.begin(), q.end(), rng);
    }

    std::size_t available(std::size_t c) const { return queues_[c].size(); }
    std::size_t take(std::size_t c) {
        const std::size_t idx = queues_[c].back();
        queues_[c].pop_back();
        return idx;
    }

private:
    std::vector<std::vector<std::size_t>> queues_;
};

void split_train_test(ClientData& client, std::vector<Sample> samples, std::mt19937_64& rng) {
    std::shuffle(samples.begin(), samples.end(), rng);
    const std::size_t n_test = samples.size() / 5;
    const std::size_t n_train = samples.size() - n_test;
    client.train.assign(std::make_move_iterator(samples.begin()),
                        std::make_move_iterator(samples.begin() + static_cast<long>(n_train)));
    client.test.assign(std::make_move_iterator(samples.begin() + static_cast<long>(n_train)),
                       std::make_move_iterator(samples.end()));
}

double positive_or_throw(double v, const char* name) {
    if (!(v > 0.0) || !std::isfinite(v)) throw ConfigError(std::string(name) + " must be positive and finite");
    return v;
}

struct Draws {
    // Pool indices handed to each client.
    std::vector<std::vector<std::size_t>> picks;
    std::vector<std::optional<std::size_t>> group;
    std::vector<Matrix> rotations;
};

Draws draw_gl_dir(const partition_spec::GlDir& spec, const LabeledPool& pool, std::size_t n_clients,
                  std::size_t per_client, ClassQueues& queues, std::mt19937_64& label_rng) {
    positive_or_throw(spec.alpha, "GlDir.alpha");
    Draws d;
    d.picks.resize(n_clients);
    std::vector<double> w(pool.classes);
    for (std::size_t i = 0; i < n_clients; ++i) {
        auto prior = sample_dirichlet(pool.classes, spec.alpha, label_rng);
        int redraws = 0;
        while (d.picks[i].size() < per_client) {
            double mass = 0.0;
            for (std::size_t c = 0; c < pool.classes; ++c) {
                w[c] = queues.available(c) > 0 ? prior[c] : 0.0;
                mass += w[c];
            }
            if (mass <= 0.0) {
                if (++redraws > kMaxPriorRedraws) throw GenerationError("GlDir: label priors keep hitting exhausted classes");
                prior = sample_dirichlet(pool.classes, spec.alpha, label_rng);
                continue;
            }
            d.picks[i].push_back(queues.take(draw_weighted(w, label_rng)));
        }
    }
    d.group.assign(n_clients, std::nullopt);
    return d;
}

Draws draw_sc_dir(const partition_spec::ScDir& spec, const LabeledPool& pool, std::size_t n_clients,
                  std::size_t per_client, ClassQueues& queues, std::mt19937_64& label_rng) {
    positive_or_throw(spec.alpha, "ScDir.alpha");
    const auto superclass_of = spec.superclass_of.empty() ? default_superclasses(pool.classes) : spec.superclass_of;
    if (superclass_of.size() != pool.classes) throw ConfigError("ScDir.superclass_of must map every class");
    const std::size_t n_super = *std::max_element(superclass_of.begin(), superclass_of.end()) + 1;
    std::vector<std::vector<std::size_t>> members(n_super);
    for (std::size_t c = 0; c < pool.classes; ++c) members[superclass_of[c]].push_back(c);

    Draws d;
    d.picks.resize(n_clients);
    std::vector<double> w(n_super);
    std::vector<std::size_t> open;
    for (std::size_t i = 0; i < n_clients; ++i) {
        auto prior = sample_dirichlet(n_super, spec.alpha, label_rng);
        int redraws = 0;
        while (d.picks[i].size() < per_client) {
            double mass = 0.0;
            for (std::size_t s = 0; s < n_super; ++s) {
                const bool any = std::any_of(members[s].begin(), members[s].end(),
                                             [&](std::size_t c) { return queues.available(c) > 0; });
                w[s] = any ? prior[s] : 0.0;
                mass += w[s];
            }
            if (mass <= 0.0) {
                if (++redraws > kMaxPriorRedraws) throw GenerationError("ScDir: superclass priors keep hitting exhausted classes");
                prior = sample_dirichlet(n_super, spec.alpha, label_rng);
                continue;
            }
            const std::size_t s = draw_weighted(w, label_rng);
            open.clear();
            for (std::size_t c : members[s])
                if (queues.available(c) > 0) open.push_back(c);
            std::uniform_int_distribution<std::size_t> pick(0, open.size() - 1);
            d.picks[i].push_back(queues.take(open[pick(label_rng)]));
        }
    }
    d.group.assign(n_clients, std::nullopt);
    return d;
}

Draws draw_patho(const partition_spec::Patho& spec, const LabeledPool& pool, std::size_t n_clients,
                 std::size_t per_client, ClassQueues& queues, std::mt19937_64& label_rng) {
    const std::size_t k = spec.classes_per_client;
    if (k == 0 || k > pool.classes) throw ConfigError("Patho.classes_per_client must lie in [1, C]");
    std::vector<std::size_t> order(pool.classes);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), label_rng);

    std::vector<std::vector<std::size_t>> owned(n_clients);
    std::vector<std::size_t> share(pool.classes, 0);
    for (std::size_t i = 0; i < n_clients; ++i) {
        for (std::size_t t = 0; t < k; ++t) {
            const std::size_t c = order[(i * k + t) % pool.classes];
            owned[i].push_back(c);
            ++share[c];
        }
    }
    const std::size_t cap = (per_client + k - 1) / k;
    Draws d;
    d.picks.resize(n_clients);
    for (std::size_t i = 0; i < n_clients; ++i) {
        for (std::size_t c : owned[i]) {
            // Each remaining owner of class c receives an equal slice of it.
            const std::size_t slice = std::min(cap, queues.available(c) / std::max<std::size_t>(share[c], 1));
            if (slice == 0) throw GenerationError("Patho: class " + std::to_string(c) + " too small for its owners");
            for (std::size_t t = 0; t < slice; ++t) d.picks[i].push_back(queues.take(c));
            --share[c];
        }
    }
    d.group.assign(n_clients, std::nullopt);
    return d;
}

Draws draw_cluster_shift(const partition_spec::ClusterShift& spec, const LabeledPool& pool, std::size_t n_clients,
                         std::size_t per_client, ClassQueues& queues, std::mt19937_64& label_rng,
                         std::mt19937_64& rotation_rng) {
    if (spec.k_true == 0 || spec.k_true > n_clients) throw ConfigError("ClusterShift.k_true must lie in [1, N]");
    if (spec.label_subset_size == 0 || spec.label_subset_size > pool.classes) {
        throw ConfigError("ClusterShift.label_subset_size must lie in [1, C]");
    }
    if (!std::isfinite(spec.rotation_angle)) throw ConfigError("ClusterShift.rotation_angle must be finite");
    if (pool.feature_dim < 2) throw ConfigError("ClusterShift needs feature_dim >= 2");

    Draws d;
    d.picks.resize(n_clients);
    d.group.resize(n_clients);

    std::vector<std::size_t> clients(n_clients);
    std::iota(clients.begin(), clients.end(), std::size_t{0});
    std::shuffle(clients.begin(), clients.end(), label_rng);
    for (std::size_t k = 0; k < n_clients; ++k) d.group[clients[k]] = k % spec.k_true;

    std::vector<std::size_t> classes(pool.classes);
    std::iota(classes.begin(), classes.end(), std::size_t{0});
    std::shuffle(classes.begin(), classes.end(), label_rng);
    std::vector<std::vector<std::size_t>> subset(spec.k_true);
    for (std::size_t g = 0; g < spec.k_true; ++g)
        for (std::size_t t = 0; t < spec.label_subset_size; ++t)
            subset[g].push_back(classes[(g * spec.label_subset_size + t) % pool.classes]);

    std::normal_distribution<double> normal(0.0, 1.0);
    for (std::size_t g = 0; g < spec.k_true; ++g) {
        std::vector<double> u(pool.feature_dim), v(pool.feature_dim);
        double nu = 0.0;
        for (double& x : u) {
            x = normal(rotation_rng);
            nu += x * x;
        }
        for (double& x : u) x /= std::sqrt(nu);
        for (double& x : v) x = normal(rotation_rng);
        double dot = 0.0;
        for (std::size_t j = 0; j < v.size(); ++j) dot += u[j] * v[j];
        double nv = 0.0;
        for (std::size_t j = 0; j < v.size(); ++j) {
            v[j] -= dot * u[j];
            nv += v[j] * v[j];
        }
        for (double& x : v) x /= std::sqrt(nv);
        d.rotations.push_back(plane_rotation(u, v, spec.rotation_angle));
    }

    std::vector<std::size_t> open;
    for (std::size_t i = 0; i < n_clients; ++i) {
        const auto& labels = subset[*d.group[i]];
        while (d.picks[i].size() < per_client) {
            open.clear();
            for (std::size_t c : labels)
                if (queues.available(c) > 0) open.push_back(c);
            if (open.empty()) {
                throw GenerationError("ClusterShift: label subset of group " + std::to_string(*d.group[i]) +
                                      " exhausted; enlarge the pool");
            }
            std::uniform_int_distribution<std::size_t> pick(0, open.size() - 1);
            d.picks[i].push_back(queues.take(open[pick(label_rng)]));
        }
    }
    return d;
}

}  // namespace

bool FederationData::has_ground_truth() const {
    return !clients.empty() && std::all_of(clients.begin(), clients.end(),
                                           [](const ClientData& c) { return c.true_cluster.has_value(); });
}

std::vector<std::size_t> FederationData::true_cluster_of() const {
    if (!has_ground_truth()) throw ConfigError("federation has no ground-truth clusters");
    std::vector<std::size_t> out;
    out.reserve(clients.size());
    for (const auto& c : clients) out.push_back(*c.true_cluster);
    return out;
}

LabeledPool gen_pool(std::size_t classes, std::size_t dim, std::size_t per_class, double separation,
                     std::uint64_t seed) {
    if (classes == 0 || dim == 0 || per_class == 0) throw ConfigError("gen_pool: sizes must be positive");
    if (!(separation >= 0.0)) throw ConfigError("gen_pool: separation must be non-negative");
    std::mt19937_64 rng(derive_seed(seed, {0}));
    std::normal_distribution<double> normal(0.0, 1.0);

    LabeledPool pool;
    pool.classes = classes;
    pool.feature_dim = dim;
    pool.class_means.resize(classes, std::vector<double>(dim));
    for (auto& mean : pool.class_means) {
        double norm = 0.0;
        for (double& v : mean) {
            v = normal(rng);
            norm += v * v;
        }
        norm = std::sqrt(norm);
        for (double& v : mean) v = separation * v / norm;
    }
    pool.samples.reserve(classes * per_class);
    for (std::size_t c = 0; c < classes; ++c) {
        for (std::size_t k = 0; k < per_class; ++k) {
            Sample s{std::vector<double>(dim), c};
            for (std::size_t j = 0; j < dim; ++j) s.x[j] = pool.class_means[c][j] + normal(rng);
            pool.samples.push_back(std::move(s));
        }
    }
    return pool;
}

std::vector<std::size_t> default_superclasses(std::size_t classes, std::size_t groups) {
    groups = std::max<std::size_t>(1, std::min(groups, classes));
    std::vector<std::size_t> out(classes);
    for (std::size_t c = 0; c < classes; ++c) out[c] = c * groups / classes;
    return out;
}

std::vector<double> sample_dirichlet(std::size_t k, double alpha, std::mt19937_64& rng) {
    positive_or_throw(alpha, "Dirichlet alpha");
    std::gamma_distribution<double> gamma(alpha, 1.0);
    std::vector<double> p(k);
    double total = 0.0;
    for (double& v : p) {
        v = gamma(rng);
        total += v;
    }
    if (total <= 0.0) {
        std::uniform_int_distribution<std::size_t> pick(0, k - 1);
        std::fill(p.begin(), p.end(), 0.0);
        p[pick(rng)] = 1.0;
        return p;
    }
    for (double& v : p) v /= total;
    return p;
}

Matrix plane_rotation(std::span<const double> u, std::span<const double> v, double angle) {
    const std::size_t d = u.size();
    Matrix r = Matrix::identity(d);
    const double c = std::cos(angle) - 1.0;
    const double s = std::sin(angle);
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j < d; ++j) r(i, j) += c * (u[i] * u[j] + v[i] * v[j]) + s * (v[i] * u[j] - u[i] * v[j]);
    return r;
}

FederationData partition(const LabeledPool& pool, const PartitionSpec& spec, std::size_t n_clients,
                         std::uint64_t seed, std::size_t samples_per_client) {
    if (n_clients == 0) throw ConfigError("partition: N must be positive");
    const std::size_t per_client = samples_per_client == 0 ? pool.samples.size() / n_clients : samples_per_client;
    if (per_client < kMinClientSamples) {
        throw GenerationError("partition: only " + std::to_string(per_client) + " samples per client (need >= " +
                              std::to_string(kMinClientSamples) + ")");
    }
    if (per_client * n_clients > pool.samples.size()) throw GenerationError("partition: pool too small");

    auto label_rng = make_rng(seed, {1});
    auto pick_rng = make_rng(seed, {2});
    auto rotation_rng = make_rng(seed, {3});
    ClassQueues queues(pool, pick_rng);

    Draws draws = std::visit(
        [&](const auto& s) -> Draws {
            using T = std::decay_t<decltype(s)>;
            if constexpr (std::is_same_v<T, partition_spec::GlDir>)
                return draw_gl_dir(s, pool, n_clients, per_client, queues, label_rng);
            else if constexpr (std::is_same_v<T, partition_spec::ScDir>)
                return draw_sc_dir(s, pool, n_clients, per_client, queues, label_rng);
            else if constexpr (std::is_same_v<T, partition_spec::Patho>)
                return draw_patho(s, pool, n_clients, per_client, queues, label_rng);
            else
                return draw_cluster_shift(s, pool, n_clients, per_client, queues, label_rng, rotation_rng);
        },
        spec);

    FederationData data;
    data.classes = pool.classes;
    data.feature_dim = pool.feature_dim;
    data.clients.resize(n_clients);
    for (std::size_t i = 0; i < n_clients; ++i) {
        if (draws.picks[i].size() < kMinClientSamples) {
            throw GenerationError("partition: client " + std::to_string(i) + " received only " +
                                  std::to_string(draws.picks[i].size()) + " samples");
        }
        std::vector<Sample> samples;
        samples.reserve(draws.picks[i].size());
        for (std::size_t idx : draws.picks[i]) {
            Sample s = pool.samples[idx];
            if (draws.group[i]) {
                const Matrix& rot = draws.rotations[*draws.group[i]];
                std::vector<double> x(s.x.size(), 0.0);
                for (std::size_t a = 0; a < x.size(); ++a)
                    for (std::size_t b = 0; b < x.size(); ++b) x[a] += rot(a, b) * s.x[b];
                s.x = std::move(x);
            }
            samples.push_back(std::move(s));
        }
        data.distributed += samples.size();
        data.clients[i].id = i;
        data.clients[i].true_cluster = draws.group[i];
        split_train_test(data.clients[i], std::move(samples), pick_rng);
    }
    return data;
}

FederationData split_unseen(FederationData data, double fraction, std::uint64_t seed) {
    if (!(fraction > 0.0 && fraction < 1.0)) throw ConfigError("split_unseen: fraction must lie in (0, 1)");
    if (!data.unseen.empty()) throw ConfigError("split_unseen: federation already has unseen clients");
    const std::size_t n = data.clients.size();
    const auto n_unseen = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(n) - 1e-9));
    if (n_unseen == 0 || n_unseen >= n) throw ConfigError("split_unseen: fraction leaves no participating client");

    std::size_t groups = 0;
    if (data.has_ground_truth())
        for (const auto& c : data.clients) groups = std::max(groups, *c.true_cluster + 1);

    for (int attempt = 0; attempt < kMaxSplitAttempts; ++attempt) {
        std::mt19937_64 rng(derive_seed(seed + static_cast<std::uint64_t>(attempt), {4}));
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::shuffle(order.begin(), order.end(), rng);
        std::vector<bool> is_unseen(n, false);
        for (std::size_t k = 0; k < n_unseen; ++k) is_unseen[order[k]] = true;

        if (groups > 0) {
            std::vector<bool> kept(groups, false);
            for (std::size_t i = 0; i < n; ++i)
                if (!is_unseen[i]) kept[*data.clients[i].true_cluster] = true;
            if (!std::all_of(kept.begin(), kept.end(), [](bool b) { return b; })) continue;
        }

        FederationData out;
        out.classes = data.classes;
        out.feature_dim = data.feature_dim;
        out.distributed = data.distributed;
        out.unseen_split_attempts = static_cast<std::size_t>(attempt) + 1;
        for (std::size_t i = 0; i < n; ++i) (is_unseen[i] ? out.unseen : out.clients).push_back(std::move(data.clients[i]));
        return out;
    }
    throw GenerationError("split_unseen: no split keeps every true group represented");
}

FederationData load_csv(std::istream& in, std::uint64_t seed) {
    std::string line;
    if (!std::getline(in, line)) throw ConfigError("load_csv: missing header");
    std::vector<std::string> header;
    {
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) header.push_back(cell);
    }
    if (header.size() < 3 || header[0] != "client_id" || header[1] != "label") {
        throw ConfigError("load_csv: header must be client_id,label,f0..f{d-1}");
    }
    const std::size_t dim = header.size() - 2;
    for (std::size_t j = 0; j < dim; ++j) {
        if (header[j + 2] != "f" + std::to_string(j)) throw ConfigError("load_csv: expected column f" + std::to_string(j));
    }

    std::map<std::size_t, std::vector<Sample>> by_client;
    std::size_t max_label = 0;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string cell;
        std::vector<std::string> cells;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        if (cells.size() != dim + 2) throw ConfigError("load_csv: line " + std::to_string(line_no) + " has wrong arity");
        try {
            const auto client = static_cast<std::size_t>(std::stoull(cells[0]));
            Sample s{std::vector<double>(dim), static_cast<std::size_t>(std::stoull(cells[1]))};
            for (std::size_t j = 0; j < dim; ++j) s.x[j] = std::stod(cells[j + 2]);
            max_label = std::max(max_label, s.y);
            by_client[client].push_back(std::move(s));
        } catch (const std::logic_error&) {
            throw ConfigError("load_csv: line " + std::to_string(line_no) + " is not numeric");
        }
    }
    if (by_client.empty()) throw ConfigError("load_csv: no rows");

    FederationData data;
    data.classes = max_label + 1;
    data.feature_dim = dim;
    auto rng = make_rng(seed, {2});
    for (auto& [id, samples] : by_client) {
        if (samples.size() < kMinClientSamples) {
            throw GenerationError("load_csv: client " + std::to_string(id) + " has fewer than 10 samples");
        }
        ClientData client;
        client.id = id;
        data.distributed += samples.size();
        split_train_test(client, std::move(samples), rng);
        data.clients.push_back(std::move(client));
    }
    return data;
}

}  // namespace hilora
