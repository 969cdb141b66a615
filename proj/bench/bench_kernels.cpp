// SPDX-License-Identifier: Apache-2.0

// Serial reference kernels against their OpenMP counterparts.

#include <benchmark/benchmark.h>

#include <random>

#include "hilora/clustering.hpp"
#include "hilora/federation.hpp"
#include "hilora/kernels.hpp"
#include "hilora/numerics.hpp"

namespace {

using namespace hilora;

Matrix random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    Matrix m(rows, cols);
    for (double& v : m.values()) v = normal(rng);
    return m;
}

std::vector<std::vector<Matrix>> random_bases(std::size_t clients, std::size_t p, std::size_t r) {
    std::vector<std::vector<Matrix>> bases(clients);
    for (std::size_t i = 0; i < clients; ++i) bases[i].push_back(orthonormal_columns(random_matrix(p, r, i), r));
    return bases;
}

void BM_matmul_serial(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const Matrix a = random_matrix(n, n, 1), b = random_matrix(n, n, 2);
    for (auto _ : state) benchmark::DoNotOptimize(kernels::matmul_serial(a, b));
}
BENCHMARK(BM_matmul_serial)->Arg(64)->Arg(256)->Unit(benchmark::kMicrosecond);

void BM_matmul_parallel(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const Matrix a = random_matrix(n, n, 1), b = random_matrix(n, n, 2);
    for (auto _ : state) benchmark::DoNotOptimize(kernels::matmul(a, b));
}
BENCHMARK(BM_matmul_parallel)->Arg(64)->Arg(256)->Unit(benchmark::kMicrosecond);

void BM_distance_matrix_serial(benchmark::State& state) {
    const auto bases = random_bases(static_cast<std::size_t>(state.range(0)), 100, 4);
    for (auto _ : state) benchmark::DoNotOptimize(distance_matrix_serial(bases));
}
BENCHMARK(BM_distance_matrix_serial)->Arg(32)->Arg(128)->Unit(benchmark::kMicrosecond);

void BM_distance_matrix_parallel(benchmark::State& state) {
    const auto bases = random_bases(static_cast<std::size_t>(state.range(0)), 100, 4);
    for (auto _ : state) benchmark::DoNotOptimize(distance_matrix(bases));
}
BENCHMARK(BM_distance_matrix_parallel)->Arg(32)->Arg(128)->Unit(benchmark::kMicrosecond);

void BM_root_stage(benchmark::State& state) {
    const auto pool = gen_pool(12, 10, 400, 3.0, 1);
    const FederationData data = partition(pool, partition_spec::ClusterShift{}, 38, 2, 100);
    const HeadModel model = HeadModel::random(10, 32, 12, 3);
    FederationConfig config;
    config.t_root = 5;
    config.t_cluster = 0;
    config.t_leaf = 0;
    config.total_budget = 5;
    config.local_epochs = 5;
    config.workers = static_cast<int>(state.range(0));
    for (auto _ : state) benchmark::DoNotOptimize(run_root_stage(config, model, data));
}
BENCHMARK(BM_root_stage)->Arg(1)->Arg(2)->Arg(4)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
