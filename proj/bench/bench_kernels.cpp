// Serial reference kernels against their OpenMP counterparts, plus one
// training step of the desk model.

#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "twopass/io.hpp"
#include "twopass/kernels.hpp"
#include "twopass/model.hpp"
#include "twopass/trainer.hpp"

namespace {

using namespace twopass;
using kernels::Backend;

std::vector<float> random_floats(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> d(0.0f, 1.0f);
  std::vector<float> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

Backend backend(const benchmark::State& state) {
  return state.range(0) == 0 ? Backend::serial : Backend::parallel;
}

void label(benchmark::State& state) { state.SetLabel(state.range(0) == 0 ? "serial" : "parallel"); }

// Output projection shape: [tokens, hidden] x [vocab, hidden]^T.
void BM_GemmNT(benchmark::State& state) {
  const std::size_t m = state.range(1), n = 2000, k = 64;
  const auto a = random_floats(m * k, 1);
  const auto b = random_floats(n * k, 2);
  std::vector<float> c(m * n);
  for (auto _ : state) {
    kernels::gemm<float>(backend(state), kernels::GemmOp::nt, 1, m, n, k, a, b, c, false);
    benchmark::DoNotOptimize(c.data());
  }
  state.counters["GFLOP/s"] = benchmark::Counter(2.0 * m * n * k, benchmark::Counter::kIsIterationInvariantRate, benchmark::Counter::kIs1000);
  label(state);
}
BENCHMARK(BM_GemmNT)->ArgsProduct({{0, 1}, {256, 1024}})->Unit(benchmark::kMillisecond);

// Feed-forward shape: [tokens, hidden] x [hidden, filter].
void BM_GemmNN(benchmark::State& state) {
  const std::size_t m = state.range(1), n = 256, k = 64;
  const auto a = random_floats(m * k, 3);
  const auto b = random_floats(k * n, 4);
  std::vector<float> c(m * n);
  for (auto _ : state) {
    kernels::gemm<float>(backend(state), kernels::GemmOp::nn, 1, m, n, k, a, b, c, false);
    benchmark::DoNotOptimize(c.data());
  }
  state.counters["GFLOP/s"] = benchmark::Counter(2.0 * m * n * k, benchmark::Counter::kIsIterationInvariantRate, benchmark::Counter::kIs1000);
  label(state);
}
BENCHMARK(BM_GemmNN)->ArgsProduct({{0, 1}, {256, 4096}})->Unit(benchmark::kMillisecond);

// Weight gradient shape: [tokens, hidden]^T x [tokens, filter].
void BM_GemmTN(benchmark::State& state) {
  const std::size_t m = 64, n = 256, k = state.range(1);
  const auto a = random_floats(k * m, 5);
  const auto b = random_floats(k * n, 6);
  std::vector<float> c(m * n);
  for (auto _ : state) {
    kernels::gemm<float>(backend(state), kernels::GemmOp::tn, 1, m, n, k, a, b, c, false);
    benchmark::DoNotOptimize(c.data());
  }
  label(state);
}
BENCHMARK(BM_GemmTN)->ArgsProduct({{0, 1}, {4096}})->Unit(benchmark::kMillisecond);

void BM_LogSoftmax(benchmark::State& state) {
  const std::size_t rows = state.range(1), cols = 2000;
  const auto x = random_floats(rows * cols, 7);
  std::vector<float> y(x.size());
  for (auto _ : state) {
    kernels::log_softmax_rows<float>(backend(state), rows, cols, x, y);
    benchmark::DoNotOptimize(y.data());
  }
  label(state);
}
BENCHMARK(BM_LogSoftmax)->ArgsProduct({{0, 1}, {1024}})->Unit(benchmark::kMillisecond);

void BM_LayerNorm(benchmark::State& state) {
  const std::size_t rows = state.range(1), cols = 64;
  const auto x = random_floats(rows * cols, 8);
  const std::vector<float> gain(cols, 1.0f), bias(cols, 0.0f);
  std::vector<float> y(x.size()), mean(rows), rstd(rows);
  for (auto _ : state) {
    kernels::layer_norm_rows<float>(backend(state), rows, cols, x, gain, bias, 1e-6f, y, mean, rstd);
    benchmark::DoNotOptimize(y.data());
  }
  label(state);
}
BENCHMARK(BM_LayerNorm)->ArgsProduct({{0, 1}, {4096}})->Unit(benchmark::kMicrosecond);

// Forward, backward and ADAM update on ~4096 padded tokens.
void BM_TrainStep(benchmark::State& state) {
  const std::size_t vocab = 2000;
  std::vector<std::uint8_t> first(vocab, 0);
  first[kEos] = 1;
  for (std::size_t i = kNumSpecials; i < vocab; i += 2) first[i] = 1;
  const VocabPartition part(Strategy::odd_first, first);
  TwoPassModel<float> model(ModelConfig::desk(vocab), part, SupportMode::full, 1);
  std::mt19937_64 rng(9);
  std::vector<TemplatedSentence> data;
  for (int i = 0; i < 160; ++i) {
    Sentence s;
    for (int j = 0; j < 24; ++j) s.ids.push_back(static_cast<TokenId>(kNumSpecials + rng() % (vocab - kNumSpecials)));
    s.ids.push_back(kEos);
    data.push_back(split_sentence(s, part));
  }
  const Batch batch = make_batch(data);
  AdamState<float> adam;
  for (auto _ : state) {
    for (auto& p : model.parameters()) p.tensor.zero_grad();
    Tape<float> tape;
    auto r = model.forward(tape, batch);
    tape.backward(r.loss);
    adam_step(model.parameters(), adam, 1e-4);
  }
}
BENCHMARK(BM_TrainStep)->Unit(benchmark::kMillisecond)->Iterations(3);

}  // namespace

int main(int argc, char** argv) {
  twopass::retain_large_allocations();
  benchmark::Initialize(&argc, argv);
  if (benchmark::ReportUnrecognizedArguments(argc, argv)) return 1;
  benchmark::RunSpecifiedBenchmarks();
  benchmark::Shutdown();
  return 0;
}
