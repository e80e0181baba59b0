#include <benchmark/benchmark.h>

#include <random>

#include "caqa/adaptation.hpp"
#include "caqa/datagen.hpp"
#include "caqa/eval.hpp"
#include "caqa/pipeline.hpp"

using namespace caqa;

namespace {

Tensor random_points(std::size_t n, std::size_t h, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d(0.0, 1.0);
  std::vector<double> v(n * h);
  for (auto& x : v) x = d(rng);
  return Tensor::from({n, h}, std::move(v), true);
}

EncoderConfig bench_encoder(std::size_t hidden) {
  EncoderConfig c;
  c.vocab_size = 128;
  c.hidden_dim = hidden;
  c.num_layers = 1;
  c.num_heads = 2;
  c.ffn_dim = 2 * hidden;
  c.max_seq_len = 128;
  return c;
}

const DomainDataset& toy_source() {
  static const DomainDataset d = [] {
    DomainShiftSpec spec;
    spec.source_samples = 64;
    spec.target_samples = 1;
    return make_synthetic_domains(spec, 1).source;
  }();
  return d;
}

}  // namespace

static void BM_KernelMatrix(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Tensor x = random_points(n, 32, 1), y = random_points(n, 32, 2);
  const std::vector<double> g = {0.5, 1.0, 2.0, 4.0, 8.0};
  NoGradGuard ng;
  for (auto _ : state) benchmark::DoNotOptimize(kernel_matrix(x, y, g));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * n));
}
BENCHMARK(BM_KernelMatrix)->Arg(8)->Arg(32)->Arg(128);

static void BM_MmdForwardBackward(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Tensor x = random_points(n, 32, 3), y = random_points(n, 32, 4);
  const std::vector<double> g = {0.5, 1.0, 2.0, 4.0, 8.0};
  for (auto _ : state) {
    x.zero_grad();
    y.zero_grad();
    mmd_squared(x, y, g).backward();
  }
}
BENCHMARK(BM_MmdForwardBackward)->Arg(8)->Arg(32);

static void BM_Encode(benchmark::State& state) {
  QAModel m(bench_encoder(static_cast<std::size_t>(state.range(0))));
  const auto s = to_tokenized(toy_source().samples[0], DomainTag::Source, 128);
  NoGradGuard ng;
  for (auto _ : state) benchmark::DoNotOptimize(m.encode(s));
  state.counters["tokens"] = static_cast<double>(s.length());
}
BENCHMARK(BM_Encode)->Arg(16)->Arg(32)->Arg(64);

static void BM_TrainStep(benchmark::State& state) {
  const auto batch = static_cast<std::size_t>(state.range(0));
  QAModel m(bench_encoder(32));
  const auto data = tokenize_dataset(toy_source(), DomainTag::Source, 128);
  std::vector<const TokenizedSample*> ptrs;
  for (std::size_t i = 0; i < batch; ++i) ptrs.push_back(&data[i]);
  ContrastiveConfig cfg;
  cfg.beta = 0.001;
  cfg.noise_sigma = 0.01;
  std::vector<Tensor> params;
  for (auto& p : m.parameters()) params.push_back(p.value);
  std::uint64_t step = 0;
  for (auto _ : state) {
    for (auto& p : params) p.zero_grad();
    batch_loss(m, ptrs, cfg, step++).qa.backward();
    benchmark::DoNotOptimize(clip_gradients(params, 1.0));
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(batch));
}
BENCHMARK(BM_TrainStep)->Arg(4)->Arg(8)->Unit(benchmark::kMillisecond);

static void BM_PcaProject(benchmark::State& state) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> d(0.0, 1.0);
  std::vector<std::vector<double>> x(static_cast<std::size_t>(state.range(0)), std::vector<double>(32));
  for (auto& r : x)
    for (auto& v : r) v = d(rng);
  for (auto _ : state) benchmark::DoNotOptimize(pca_project(x));
}
BENCHMARK(BM_PcaProject)->Arg(256)->Arg(2048);

static void BM_SyntheticDataset(benchmark::State& state) {
  DomainShiftSpec spec;
  spec.source_samples = 1;
  spec.target_samples = static_cast<std::size_t>(state.range(0));
  const auto d = make_synthetic_domains(spec, 2);
  const auto gen = ToyGenerator::fit(d.target_contexts, NgramOrder::Bigram, 2);
  for (auto _ : state) benchmark::DoNotOptimize(build_synthetic_dataset(gen, d.target_contexts, 3));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_SyntheticDataset)->Arg(100);

BENCHMARK_MAIN();
