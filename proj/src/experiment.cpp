// SPDX-License-Identifier: Apache-2.0

#include "hilora/experiment.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>
#include <type_traits>
#include <variant>

#include <json.hpp>

#include "hilora/errors.hpp"
#include "hilora/rng.hpp"
#include "parallel.hpp"

namespace hilora {

namespace fs = std::filesystem;
using json = nlohmann::json;
using ojson = nlohmann::ordered_json;

namespace {

enum : std::uint64_t { kModelSeed = 100, kPoolSeed = 101, kPartitionSeed = 102, kUnseenSeed = 103, kCsvSeed = 104 };

// Typed reads from one JSON object; every key must be consumed.
class Fields {
public:
    Fields(const json& obj, std::string prefix) : obj_(obj), prefix_(std::move(prefix)) {
        if (!obj_.is_object()) throw ConfigError(prefix_ + ": must be a JSON object");
    }

    void size(const char* key, std::size_t& dst) {
        if (const json* v = find(key)) {
            if (!v->is_number_unsigned()) fail(key, "must be a non-negative integer");
            dst = v->get<std::size_t>();
        }
    }
    void u64(const char* key, std::uint64_t& dst) {
        if (const json* v = find(key)) {
            if (!v->is_number_unsigned()) fail(key, "must be a non-negative integer");
            dst = v->get<std::uint64_t>();
        }
    }
    void integer(const char* key, int& dst) {
        if (const json* v = find(key)) {
            if (!v->is_number_integer()) fail(key, "must be an integer");
            dst = v->get<int>();
        }
    }
    void real(const char* key, double& dst) {
        if (const json* v = find(key)) {
            if (!v->is_number()) fail(key, "must be a number");
            dst = v->get<double>();
        }
    }
    void text(const char* key, std::string& dst) {
        if (const json* v = find(key)) {
            if (!v->is_string()) fail(key, "must be a string");
            dst = v->get<std::string>();
        }
    }
    void sizes(const char* key, std::vector<std::size_t>& dst) {
        if (const json* v = find(key)) {
            if (!v->is_array()) fail(key, "must be an array of non-negative integers");
            dst.clear();
            for (const auto& e : *v) {
                if (!e.is_number_unsigned()) fail(key, "must be an array of non-negative integers");
                dst.push_back(e.get<std::size_t>());
            }
        }
    }
    const json* child(const char* key) { return find(key); }
    std::string name(const std::string& key) const { return prefix_.empty() ? key : prefix_ + "." + key; }

    void finish() const {
        for (const auto& [key, _] : obj_.items())
            if (!seen_.contains(key)) throw ConfigError(name(key) + ": unknown field");
    }

private:
    const json* find(const char* key) {
        seen_.insert(key);
        const auto it = obj_.find(key);
        return it == obj_.end() ? nullptr : &*it;
    }
    [[noreturn]] void fail(const char* key, const char* rule) const { throw ConfigError(name(key) + ": " + rule); }

    const json& obj_;
    std::string prefix_;
    std::set<std::string> seen_;
};

void parse_federation(const json& j, FederationConfig& f) {
    Fields r(j, "federation");
    r.size("rank", f.rank);
    r.real("gamma_c", f.gamma_c);
    r.real("gamma_l", f.gamma_l);
    r.real("lambda", f.lambda);
    r.real("tau_rel", f.tau_rel);
    r.real("eps", f.eps);
    r.integer("t_root", f.t_root);
    r.integer("t_cluster", f.t_cluster);
    r.integer("t_leaf", f.t_leaf);
    r.integer("total_budget", f.total_budget);
    r.real("lr", f.lr);
    r.integer("local_epochs", f.local_epochs);
    r.size("batch_size", f.batch_size);
    r.size("k_min", f.k_min);
    r.size("k_max", f.k_max);
    std::string mode = f.aggregation == AggregationMode::ProductSvd ? "product_svd" : "separate_average";
    r.text("aggregation", mode);
    if (mode == "product_svd") {
        f.aggregation = AggregationMode::ProductSvd;
    } else if (mode == "separate_average") {
        f.aggregation = AggregationMode::SeparateAverage;
    } else {
        throw ConfigError("federation.aggregation: expected \"product_svd\" or \"separate_average\"");
    }
    r.u64("master_seed", f.master_seed);
    r.real("init_scale", f.init_scale);
    r.integer("workers", f.workers);
    r.finish();
}

PartitionSpec parse_partition(const json& j) {
    Fields r(j, "data.partition");
    std::string kind;
    r.text("kind", kind);
    PartitionSpec spec;
    if (kind == "cluster_shift") {
        partition_spec::ClusterShift s;
        r.size("k_true", s.k_true);
        r.real("rotation_angle", s.rotation_angle);
        r.size("label_subset_size", s.label_subset_size);
        spec = s;
    } else if (kind == "gl_dir") {
        partition_spec::GlDir s;
        r.real("alpha", s.alpha);
        spec = s;
    } else if (kind == "sc_dir") {
        partition_spec::ScDir s;
        r.real("alpha", s.alpha);
        r.sizes("superclass_of", s.superclass_of);
        spec = s;
    } else if (kind == "patho") {
        partition_spec::Patho s;
        r.size("classes_per_client", s.classes_per_client);
        spec = s;
    } else {
        throw ConfigError("data.partition.kind: expected cluster_shift, gl_dir, sc_dir or patho");
    }
    r.finish();
    return spec;
}

void parse_data(const json& j, DataSpec& d) {
    Fields r(j, "data");
    r.text("source", d.source);
    r.text("csv_path", d.csv_path);
    r.size("classes", d.classes);
    r.size("feature_dim", d.feature_dim);
    r.size("per_class", d.per_class);
    r.real("separation", d.separation);
    r.size("clients", d.clients);
    r.size("samples_per_client", d.samples_per_client);
    if (const json* p = r.child("partition")) d.partition = parse_partition(*p);
    r.real("unseen_fraction", d.unseen_fraction);
    r.finish();
}

ojson partition_json(const PartitionSpec& spec) {
    return std::visit(
        [](const auto& s) -> ojson {
            using T = std::decay_t<decltype(s)>;
            if constexpr (std::is_same_v<T, partition_spec::ClusterShift>) {
                return {{"kind", "cluster_shift"},
                        {"k_true", s.k_true},
                        {"rotation_angle", s.rotation_angle},
                        {"label_subset_size", s.label_subset_size}};
            } else if constexpr (std::is_same_v<T, partition_spec::GlDir>) {
                return {{"kind", "gl_dir"}, {"alpha", s.alpha}};
            } else if constexpr (std::is_same_v<T, partition_spec::ScDir>) {
                return {{"kind", "sc_dir"}, {"alpha", s.alpha}, {"superclass_of", s.superclass_of}};
            } else {
                return {{"kind", "patho"}, {"classes_per_client", s.classes_per_client}};
            }
        },
        spec);
}

ojson config_json(const ExperimentConfig& c) {
    const FederationConfig& f = c.federation;
    ojson j;
    j["federation"] = {{"rank", f.rank},
                       {"gamma_c", f.gamma_c},
                       {"gamma_l", f.gamma_l},
                       {"lambda", f.lambda},
                       {"tau_rel", f.tau_rel},
                       {"eps", f.eps},
                       {"t_root", f.t_root},
                       {"t_cluster", f.t_cluster},
                       {"t_leaf", f.t_leaf},
                       {"total_budget", f.total_budget},
                       {"lr", f.lr},
                       {"local_epochs", f.local_epochs},
                       {"batch_size", f.batch_size},
                       {"k_min", f.k_min},
                       {"k_max", f.k_max},
                       {"aggregation",
                        f.aggregation == AggregationMode::ProductSvd ? "product_svd" : "separate_average"},
                       {"master_seed", f.master_seed},
                       {"init_scale", f.init_scale},
                       {"workers", f.workers}};
    const DataSpec& d = c.data;
    j["data"] = {{"source", d.source},
                 {"csv_path", d.csv_path},
                 {"classes", d.classes},
                 {"feature_dim", d.feature_dim},
                 {"per_class", d.per_class},
                 {"separation", d.separation},
                 {"clients", d.clients},
                 {"samples_per_client", d.samples_per_client},
                 {"partition", partition_json(d.partition)},
                 {"unseen_fraction", d.unseen_fraction}};
    j["model"] = {{"hidden", c.model.hidden}, {"w0_scale", c.model.w0_scale}};
    j["adapt"] = {{"probe_steps", c.adapt.probe_steps}, {"probe_lr", c.adapt.probe_lr}, {"epochs", c.adapt.epochs}};
    const GradcheckOptions& g = c.gradcheck;
    j["gradcheck"] = {{"configurations", g.configurations},
                      {"step", g.step},
                      {"input_dim", g.input_dim},
                      {"hidden", g.hidden},
                      {"classes", g.classes},
                      {"rank", g.rank},
                      {"samples", g.samples},
                      {"seed", g.seed}};
    return j;
}

std::ofstream open_out(const fs::path& path) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path.string());
    return out;
}

std::ifstream open_in(const fs::path& path, const std::string& what) {
    std::ifstream in(path);
    if (!in) throw ConfigError("missing " + what + ": " + path.string());
    return in;
}

std::string cluster_file(std::size_t j) { return std::string(artifact::kCheckpoints) + "/cluster_" + std::to_string(j) + ".lora"; }
std::string leaf_file(std::size_t id) { return std::string(artifact::kCheckpoints) + "/leaf_" + std::to_string(id) + ".lora"; }
std::string root_file() { return std::string(artifact::kCheckpoints) + "/root.lora"; }

LoraAdapter read_checkpoint(const fs::path& out, const std::string& rel) {
    std::ifstream in = open_in(out / rel, "checkpoint");
    try {
        return read_adapter(in);
    } catch (const Error& e) {
        throw ConfigError("unreadable checkpoint " + (out / rel).string() + ": " + e.what());
    }
}

void write_config_file(const fs::path& out, const ExperimentConfig& config) {
    std::ofstream f = open_out(out / artifact::kConfig);
    write_config(f, config);
}

}  // namespace

void ExperimentConfig::validate() const {
    try {
        federation.validate();
    } catch (const ConfigError& e) {
        throw ConfigError(std::string("federation.") + e.what());
    }
    auto fail = [](const std::string& field, const std::string& rule) { throw ConfigError(field + ": " + rule); };
    if (data.source != "generator" && data.source != "csv") fail("data.source", "expected \"generator\" or \"csv\"");
    if (data.source == "csv" && data.csv_path.empty()) fail("data.csv_path", "required when data.source is csv");
    if (data.source == "generator") {
        if (data.classes < 2) fail("data.classes", "must be at least 2");
        if (data.feature_dim < 1) fail("data.feature_dim", "must be positive");
        if (data.per_class < 1) fail("data.per_class", "must be positive");
        if (data.clients < 1) fail("data.clients", "must be positive");
        if (federation.rank > data.classes) fail("federation.rank", "must not exceed data.classes");
        std::visit(
            [&](const auto& s) {
                using T = std::decay_t<decltype(s)>;
                if constexpr (std::is_same_v<T, partition_spec::GlDir> || std::is_same_v<T, partition_spec::ScDir>) {
                    if (!(s.alpha > 0.0)) fail("data.partition.alpha", "must be positive");
                } else if constexpr (std::is_same_v<T, partition_spec::Patho>) {
                    if (s.classes_per_client < 1 || s.classes_per_client > data.classes) {
                        fail("data.partition.classes_per_client", "must lie in [1, data.classes]");
                    }
                } else {
                    if (s.k_true < 1 || s.k_true > data.clients) fail("data.partition.k_true", "must lie in [1, data.clients]");
                    if (s.label_subset_size < 1 || s.label_subset_size > data.classes) {
                        fail("data.partition.label_subset_size", "must lie in [1, data.classes]");
                    }
                }
            },
            data.partition);
    }
    if (!(data.separation >= 0.0)) fail("data.separation", "must be non-negative");
    if (!(data.unseen_fraction >= 0.0 && data.unseen_fraction < 1.0)) fail("data.unseen_fraction", "must lie in [0, 1)");
    if (model.hidden < 1) fail("model.hidden", "must be positive");
    if (federation.rank > model.hidden) fail("federation.rank", "must not exceed model.hidden");
    if (!(model.w0_scale >= 0.0)) fail("model.w0_scale", "must be non-negative");
    if (adapt.probe_steps < 1) fail("adapt.probe_steps", "must be at least 1");
    if (!(adapt.probe_lr >= 0.0)) fail("adapt.probe_lr", "must be non-negative (0 uses federation.lr)");
    if (adapt.epochs < 0) fail("adapt.epochs", "must be non-negative");
    if (gradcheck.configurations < 1) fail("gradcheck.configurations", "must be positive");
    if (!(gradcheck.step > 0.0)) fail("gradcheck.step", "must be positive");
    if (gradcheck.classes < 2) fail("gradcheck.classes", "must be at least 2");
    if (gradcheck.rank < 1 || gradcheck.rank > std::min(gradcheck.classes, gradcheck.hidden)) {
        fail("gradcheck.rank", "must lie in [1, min(classes, hidden)]");
    }
    if (gradcheck.input_dim < 1 || gradcheck.samples < 1) fail("gradcheck.input_dim/samples", "must be positive");
}

ExperimentConfig parse_config(std::istream& in) {
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    ExperimentConfig c;
    Fields top(j, "");
    if (const json* v = top.child("federation")) parse_federation(*v, c.federation);
    if (const json* v = top.child("data")) parse_data(*v, c.data);
    if (const json* v = top.child("model")) {
        Fields r(*v, "model");
        r.size("hidden", c.model.hidden);
        r.real("w0_scale", c.model.w0_scale);
        r.finish();
    }
    if (const json* v = top.child("adapt")) {
        Fields r(*v, "adapt");
        r.integer("probe_steps", c.adapt.probe_steps);
        r.real("probe_lr", c.adapt.probe_lr);
        r.integer("epochs", c.adapt.epochs);
        r.finish();
    }
    if (const json* v = top.child("gradcheck")) {
        Fields r(*v, "gradcheck");
        r.size("configurations", c.gradcheck.configurations);
        r.real("step", c.gradcheck.step);
        r.size("input_dim", c.gradcheck.input_dim);
        r.size("hidden", c.gradcheck.hidden);
        r.size("classes", c.gradcheck.classes);
        r.size("rank", c.gradcheck.rank);
        r.size("samples", c.gradcheck.samples);
        r.u64("seed", c.gradcheck.seed);
        r.finish();
    }
    top.finish();
    c.validate();
    return c;
}

ExperimentConfig load_config(const fs::path& path) {
    std::ifstream in = open_in(path, "config file");
    return parse_config(in);
}

void write_config(std::ostream& out, const ExperimentConfig& config) { out << config_json(config).dump(2) << '\n'; }

Experiment build_experiment(const ExperimentConfig& config) {
    config.validate();
    const std::uint64_t seed = config.federation.master_seed;
    FederationData data;
    if (config.data.source == "csv") {
        std::ifstream in = open_in(config.data.csv_path, "dataset CSV");
        data = load_csv(in, derive_seed(seed, {kCsvSeed}));
    } else {
        const LabeledPool pool = gen_pool(config.data.classes, config.data.feature_dim, config.data.per_class,
                                          config.data.separation, derive_seed(seed, {kPoolSeed}));
        data = partition(pool, config.data.partition, config.data.clients, derive_seed(seed, {kPartitionSeed}),
                         config.data.samples_per_client);
    }
    if (config.data.unseen_fraction > 0.0) {
        data = split_unseen(std::move(data), config.data.unseen_fraction, derive_seed(seed, {kUnseenSeed}));
    }
    if (config.federation.rank > std::min(data.classes, config.model.hidden)) {
        throw ConfigError("federation.rank: must not exceed the dataset's class count");
    }
    HeadModel model = HeadModel::random(data.feature_dim, config.model.hidden, data.classes,
                                        derive_seed(seed, {kModelSeed}), config.model.w0_scale);
    return Experiment{std::move(model), std::move(data)};
}

void write_clustering_json(std::ostream& out, const ClusterAssignment& a) {
    ojson j;
    j["k_star"] = a.k_star;
    j["sigma"] = a.sigma_used;
    j["eigenvalues"] = a.eigenvalues;
    j["eigengaps"] = a.eigengaps;
    j["labels"] = a.label_of;
    ojson rows = ojson::array();
    for (std::size_t i = 0; i < a.distance.rows(); ++i) {
        const auto row = a.distance.row(i);
        rows.push_back(std::vector<double>(row.begin(), row.end()));
    }
    j["distance_matrix"] = std::move(rows);
    out << j.dump(2) << '\n';
}

ClusterAssignment read_clustering_json(std::istream& in) {
    json j;
    try {
        j = json::parse(in);
        ClusterAssignment a;
        a.k_star = j.at("k_star").get<std::size_t>();
        a.sigma_used = j.at("sigma").get<double>();
        a.eigenvalues = j.at("eigenvalues").get<std::vector<double>>();
        a.eigengaps = j.at("eigengaps").get<std::vector<double>>();
        a.label_of = j.at("labels").get<std::vector<std::size_t>>();
        const auto rows = j.at("distance_matrix").get<std::vector<std::vector<double>>>();
        a.distance = Matrix(rows.size(), rows.size());
        for (std::size_t r = 0; r < rows.size(); ++r) {
            if (rows[r].size() != rows.size()) throw ConfigError("clustering JSON: distance_matrix is not square");
            std::copy(rows[r].begin(), rows[r].end(), a.distance.row(r).begin());
        }
        a.degenerate = a.sigma_used == 0.0;
        return a;
    } catch (const json::exception& e) {
        throw ConfigError(std::string("clustering JSON: ") + e.what());
    }
}

std::vector<std::string> write_checkpoints(const fs::path& out, const TrainedFederation& fed) {
    std::vector<std::string> files;
    auto save = [&](const std::string& rel, const LoraAdapter& adapter) {
        std::ofstream f = open_out(out / rel);
        write_adapter(f, adapter);
        files.push_back(rel);
    };
    save(root_file(), fed.server.root);
    for (std::size_t j = 0; j < fed.server.clusters.size(); ++j) save(cluster_file(j), fed.server.clusters[j]);
    for (const auto& c : fed.clients) save(leaf_file(c.id), c.leaf);
    return files;
}

TrainedFederation load_trained(const fs::path& out, const ExperimentConfig& config, const FederationData& data) {
    TrainedFederation fed;
    fed.config = config.federation;
    std::ifstream cj = open_in(out / artifact::kClustering, "clustering JSON");
    fed.server.assignment = read_clustering_json(cj);
    fed.server.assignment.k_min = config.federation.k_min;
    if (fed.server.assignment.label_of.size() != data.clients.size()) {
        throw ConfigError("clustering JSON covers " + std::to_string(fed.server.assignment.label_of.size()) +
                          " clients but the config yields " + std::to_string(data.clients.size()));
    }
    fed.server.root = read_checkpoint(out, root_file());
    for (std::size_t j = 0; j < fed.server.assignment.cluster_count(); ++j) {
        fed.server.clusters.push_back(read_checkpoint(out, cluster_file(j)));
    }
    for (std::size_t i = 0; i < data.clients.size(); ++i) {
        fed.clients.push_back(ClientState{data.clients[i].id, fed.server.assignment.label_of[i],
                                          read_checkpoint(out, leaf_file(data.clients[i].id))});
    }
    return fed;
}

void update_manifest(const fs::path& out, const ExperimentConfig& config, const std::string& command,
                     const std::vector<std::string>& files) {
    std::set<std::string> all(files.begin(), files.end());
    all.insert(artifact::kManifest);
    const fs::path path = out / artifact::kManifest;
    if (std::ifstream in(path); in) {
        try {
            const json old = json::parse(in);
            for (const auto& f : old.at("files")) all.insert(f.get<std::string>());
        } catch (const json::exception&) {
            // A corrupt manifest is rebuilt from this command's files.
        }
    }
    ojson j;
    j["command"] = command;
    j["config"] = config_json(config);
    j["files"] = std::vector<std::string>(all.begin(), all.end());
    std::ofstream f = open_out(path);
    f << j.dump(2) << '\n';
}

std::vector<std::string> command_run(const ExperimentConfig& config, const fs::path& out) {
    const Experiment ex = build_experiment(config);
    const TrainedFederation fed = run_protocol(config.federation, ex.model, ex.data);
    const MetricsReport metrics = evaluate(ex.model, fed, ex.data, config.federation.workers);

    std::vector<std::string> files{artifact::kConfig, artifact::kRoundLog, artifact::kMetricsJson,
                                   artifact::kMetricsCsv, artifact::kClustering};
    write_config_file(out, config);
    {
        std::ofstream f = open_out(out / artifact::kRoundLog);
        write_round_log(f, fed);
    }
    {
        std::ofstream f = open_out(out / artifact::kMetricsJson);
        write_metrics_json(f, metrics);
    }
    {
        std::ofstream f = open_out(out / artifact::kMetricsCsv);
        write_metrics_csv(f, metrics);
    }
    {
        std::ofstream f = open_out(out / artifact::kClustering);
        write_clustering_json(f, fed.server.assignment);
    }
    const auto checkpoints = write_checkpoints(out, fed);
    files.insert(files.end(), checkpoints.begin(), checkpoints.end());
    update_manifest(out, config, "run", files);
    return files;
}

std::vector<std::string> command_cluster_diag(const ExperimentConfig& config, const fs::path& out) {
    const Experiment ex = build_experiment(config);
    RootStageResult root;
    try {
        root = run_root_stage(config.federation, ex.model, ex.data);
    } catch (const Error& e) {
        throw StageError("root", e.what());
    }
    const ClusterAssignment assignment = assign_clusters(config.federation, root.tracker, ex.data.clients.size());
    write_config_file(out, config);
    std::ofstream f = open_out(out / artifact::kClustering);
    write_clustering_json(f, assignment);
    f.close();
    std::vector<std::string> files{artifact::kConfig, artifact::kClustering};
    update_manifest(out, config, "cluster-diag", files);
    return files;
}

std::vector<std::string> command_adapt(const ExperimentConfig& config, const fs::path& out) {
    const Experiment ex = build_experiment(config);
    const TrainedFederation fed = load_trained(out, config, ex.data);
    std::vector<AdaptationResult> results(ex.data.unseen.size());
    detail::parallel_for(results.size(), config.federation.workers,
                         [&](std::size_t u) { results[u] = adapt_unseen(ex.model, ex.data.unseen[u], fed, config.adapt); });
    std::ofstream f = open_out(out / artifact::kAdaptCsv);
    f << "client_id,assigned_cluster,epoch,test_accuracy\n";
    char buf[32];
    for (const auto& r : results) {
        for (std::size_t e = 0; e < r.accuracy.size(); ++e) {
            std::snprintf(buf, sizeof buf, "%.17g", r.accuracy[e]);
            f << r.client_id << ',' << r.assigned_cluster << ',' << e << ',' << buf << '\n';
        }
    }
    f.close();
    std::vector<std::string> files{artifact::kAdaptCsv};
    update_manifest(out, config, "adapt", files);
    return files;
}

std::vector<std::string> command_report(const ExperimentConfig& config, const fs::path& out) {
    const Experiment ex = build_experiment(config);
    const TrainedFederation fed = load_trained(out, config, ex.data);
    const MetricsReport metrics = evaluate(ex.model, fed, ex.data, config.federation.workers);
    {
        std::ofstream f = open_out(out / artifact::kMetricsJson);
        write_metrics_json(f, metrics);
    }
    {
        std::ofstream f = open_out(out / artifact::kMetricsCsv);
        write_metrics_csv(f, metrics);
    }
    std::vector<std::string> files{artifact::kMetricsJson, artifact::kMetricsCsv};
    update_manifest(out, config, "report", files);
    return files;
}

}  // namespace hilora
