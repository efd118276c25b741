#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "bidiseq/kernels.hpp"
#include "bidiseq/model.hpp"

using namespace bidiseq;

namespace {

std::vector<float> random_vector(std::size_t n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> u(-1.0f, 1.0f);
    std::vector<float> v(n);
    for (auto& x : v) x = u(rng);
    return v;
}

// Shapes of the preset-S layers: rows x 64 times 64 x {64, 256}.
void gemm_args(benchmark::internal::Benchmark* b) {
    for (long m : {64, 1024, 8192}) {
        for (long n : {64, 256}) b->Args({m, 64, n});
    }
}

void BM_gemm_serial(benchmark::State& state) {
    const auto m = static_cast<std::size_t>(state.range(0));
    const auto k = static_cast<std::size_t>(state.range(1));
    const auto n = static_cast<std::size_t>(state.range(2));
    const auto a = random_vector(m * k, 1), b = random_vector(k * n, 2);
    std::vector<float> c(m * n);
    for (auto _ : state) {
        kernels::gemm_serial(a.data(), b.data(), c.data(), m, k, n, false);
        benchmark::DoNotOptimize(c.data());
    }
    state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * m * k * n));
}
BENCHMARK(BM_gemm_serial)->Apply(gemm_args);

void BM_gemm(benchmark::State& state) {
    const auto m = static_cast<std::size_t>(state.range(0));
    const auto k = static_cast<std::size_t>(state.range(1));
    const auto n = static_cast<std::size_t>(state.range(2));
    const auto a = random_vector(m * k, 1), b = random_vector(k * n, 2);
    std::vector<float> c(m * n);
    for (auto _ : state) {
        kernels::gemm(a.data(), b.data(), c.data(), m, k, n, false);
        benchmark::DoNotOptimize(c.data());
    }
    state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * m * k * n));
}
BENCHMARK(BM_gemm)->Apply(gemm_args);

void BM_gemm_tn(benchmark::State& state) {
    const auto m = static_cast<std::size_t>(state.range(0));
    const auto k = static_cast<std::size_t>(state.range(1));
    const auto n = static_cast<std::size_t>(state.range(2));
    const auto a = random_vector(m * k, 1), d = random_vector(m * n, 2);
    std::vector<float> c(k * n);
    for (auto _ : state) {
        kernels::gemm_tn(a.data(), d.data(), c.data(), m, k, n);
        benchmark::DoNotOptimize(c.data());
    }
    state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * m * k * n));
}
BENCHMARK(BM_gemm_tn)->Apply(gemm_args);

// One xH loss-and-gradient step of a preset-S model on 16 examples.
void BM_train_step(benchmark::State& state) {
    kernels::tune_allocator();
    std::vector<RawExample> raw;
    std::mt19937_64 rng(3);
    std::uniform_int_distribution<int> letter(0, 25), len(3, 8);
    for (int k = 0; k < 16; ++k) {
        std::string stem(static_cast<std::size_t>(len(rng)), 'a');
        for (char& c : stem) c = static_cast<char>('a' + letter(rng));
        raw.push_back({stem, k % 2 ? "A" : "B", stem + (k % 2 ? "ed" : "ing")});
    }
    const auto vocab = build_vocab(raw, false);
    std::vector<Example> batch;
    for (const auto& r : raw) batch.push_back(apply_unk_policy(r, vocab, {}, false).example);
    const model::Transformer<float> net(model::ModelConfig::from_preset(model::SizePreset::S), vocab.size(), 1);
    model::BatchObjective objective;
    objective.objective = static_cast<losses::Objective>(state.range(0));
    objective.order_head = model::default_order_head(objective.objective);
    std::vector<Matrix<float>> grads;
    std::uint64_t step = 0;
    for (auto _ : state) {
        benchmark::DoNotOptimize(model::loss_and_gradients(net, std::span<const Example>(batch), objective, ++step, 1,
                                                           true, grads));
    }
}
BENCHMARK(BM_train_step)->Arg(0)->Arg(2)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
