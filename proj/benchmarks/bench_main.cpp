#include <benchmark/benchmark.h>

#include <numeric>
#include <random>
#include <vector>

#include "ctrace/analytics.hpp"
#include "ctrace/model.hpp"
#include "ctrace/rng.hpp"
#include "ctrace/trace.hpp"

namespace {

ctrace::ModelConfig bench_config(int d_model, int n_layers) {
  ctrace::ModelConfig config;
  config.n_layers = n_layers;
  config.n_heads = 2;
  config.d_model = d_model;
  config.d_ff = 4 * d_model;
  config.vocab_size = 128;
  config.max_context = 32;
  config.seed = 1;
  return config;
}

std::vector<int> bench_tokens(int count) {
  std::vector<int> tokens(count);
  std::mt19937_64 rng(3);
  for (int& t : tokens) t = static_cast<int>(rng() % 128);
  return tokens;
}

void BM_Forward(benchmark::State& state) {
  ctrace::Model model(bench_config(static_cast<int>(state.range(0)), 2));
  auto tokens = bench_tokens(16);
  ctrace::Matrix x0 = model.embed(tokens);
  for (auto _ : state) {
    auto logits = model.forward(x0);
    benchmark::DoNotOptimize(logits);
  }
}
BENCHMARK(BM_Forward)->Arg(32)->Arg(64)->Arg(128);

void BM_ForwardRecorded(benchmark::State& state) {
  ctrace::Model model(bench_config(64, static_cast<int>(state.range(0))));
  auto tokens = bench_tokens(16);
  ctrace::Matrix x0 = model.embed(tokens);
  for (auto _ : state) {
    ctrace::ActivationRecord record;
    auto logits = model.forward(x0, &record);
    benchmark::DoNotOptimize(record);
    benchmark::DoNotOptimize(logits);
  }
}
BENCHMARK(BM_ForwardRecorded)->Arg(2)->Arg(4);

void BM_PatchedForward(benchmark::State& state) {
  ctrace::Model model(bench_config(64, 2));
  auto tokens = bench_tokens(16);
  ctrace::Matrix x0 = model.embed(tokens);
  ctrace::ActivationRecord clean;
  (void)model.forward(x0, &clean);

  std::vector<int> positions(8);
  std::iota(positions.begin(), positions.end(), 0);
  double sigma = ctrace::embedding_std(model.params());
  ctrace::Matrix xc = ctrace::corrupt(x0, positions, 8, 3.0, sigma, 5);

  ctrace::PatchSpec patch;
  patch.kind = ctrace::StateKind::kMlp;
  patch.source = &clean;
  patch.cells = {{7, 0}, {7, 1}};
  for (auto _ : state) {
    auto logits = model.forward_patched(xc, patch);
    benchmark::DoNotOptimize(logits);
  }
}
BENCHMARK(BM_PatchedForward);

// one full trace cell sweep: T x L cells, S restorations each
void BM_TraceSweep(benchmark::State& state) {
  ctrace::Model model(bench_config(32, 2));
  auto tokens = bench_tokens(static_cast<int>(state.range(0)));
  ctrace::Matrix x0 = model.embed(tokens);
  ctrace::ActivationRecord clean;
  (void)model.forward(x0, &clean);
  const int S = 4;
  const int T = static_cast<int>(tokens.size());
  const int L = model.config().n_layers;

  std::vector<int> positions(T / 2);
  std::iota(positions.begin(), positions.end(), 0);
  double sigma = ctrace::embedding_std(model.params());
  std::vector<ctrace::Matrix> corrupted;
  for (int s = 0; s < S; ++s)
    corrupted.push_back(ctrace::corrupt(x0, positions, T / 2, 3.0, sigma,
                                        ctrace::derive_seed(9, s)));

  for (auto _ : state) {
    double total = 0;
    for (int t = 0; t < T; ++t)
      for (int l = 0; l < L; ++l) {
        ctrace::PatchSpec patch;
        patch.kind = ctrace::StateKind::kHidden;
        patch.source = &clean;
        patch.cells = {{t, l}};
        for (const auto& xc : corrupted) {
          auto logits = model.forward_patched(xc, patch);
          total += logits(T - 1, 0);
        }
      }
    benchmark::DoNotOptimize(total);
  }
  state.SetItemsProcessed(state.iterations() * T * L * S);
}
BENCHMARK(BM_TraceSweep)->Arg(8)->Arg(16);

void BM_TopK(benchmark::State& state) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(0, 1);
  Eigen::MatrixXd m(static_cast<int>(state.range(0)), 28);
  for (int t = 0; t < m.rows(); ++t)
    for (int l = 0; l < m.cols(); ++l) m(t, l) = u(rng);
  for (auto _ : state) {
    auto summary = ctrace::top_k(m, 50);
    benchmark::DoNotOptimize(summary);
  }
}
BENCHMARK(BM_TopK)->Arg(16)->Arg(64);

}  // namespace

BENCHMARK_MAIN();
