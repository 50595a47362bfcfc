#include "sdmlm/training.hpp"

#include <benchmark/benchmark.h>

#include <random>

using namespace sdmlm;

namespace {

ModelConfig bench_model() {
  ModelConfig mc;
  mc.vocab_size = 300;
  mc.d_model = 128;
  mc.n_layers = 2;
  mc.n_heads = 4;
  mc.d_ff = 512;
  mc.max_seq_len = 160;
  return mc;
}

std::vector<TokenId> random_tokens(std::size_t n, int vocab, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<TokenId> out(n);
  for (auto& t : out) t = static_cast<TokenId>(rng() % static_cast<unsigned>(vocab));
  return out;
}

void BM_Forward(benchmark::State& state) {
  const TransformerLM<float> model(bench_model());
  const auto tokens = random_tokens(static_cast<std::size_t>(state.range(0)), 300, 1);
  for (auto _ : state) benchmark::DoNotOptimize(model.forward(tokens).logits.data());
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_Forward)->Arg(32)->Arg(128);

void BM_ForwardBackward(benchmark::State& state) {
  TransformerLM<float> model(bench_model());
  EncodedExample doc;
  doc.tokens = random_tokens(static_cast<std::size_t>(state.range(0)), 300, 2);
  doc.loss_mask.assign(doc.tokens.size(), 1);
  doc.loss_mask[0] = 0;
  for (auto _ : state) {
    model.zero_grad();
    Tape<float> tape;
    auto out = model.forward(tape, doc.tokens);
    auto loss = document_loss(tape, out.logits, doc, 2.5f);
    tape.backward(loss);
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_ForwardBackward)->Arg(32)->Arg(128);

void BM_GreedyDecode(benchmark::State& state) {
  const TransformerLM<float> model(bench_model());
  const auto prompt = random_tokens(80, 300, 3);
  const std::vector<TokenId> no_stop;
  for (auto _ : state) benchmark::DoNotOptimize(greedy_decode(model, prompt, 32, no_stop));
}
BENCHMARK(BM_GreedyDecode);

void BM_KnnQD(benchmark::State& state) {
  std::mt19937_64 rng(4);
  std::normal_distribution<float> n(0, 1);
  SupportIndex support;
  const auto rows = state.range(0);
  support.features.resize(rows, 1000);
  for (Eigen::Index i = 0; i < support.features.size(); ++i) support.features.data()[i] = n(rng);
  for (Eigen::Index i = 0; i < rows; ++i) {
    support.labels.push_back(static_cast<int>(rng() % 2));
    support.ids.push_back(std::to_string(i));
  }
  std::vector<float> query(1000);
  for (auto& x : query) x = n(rng);
  for (auto _ : state) benchmark::DoNotOptimize(knn_q_d(query, support, 1));
}
BENCHMARK(BM_KnnQD)->Arg(1000)->Arg(4000);

void BM_FitThresholds(benchmark::State& state) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0, 1);
  const auto n = static_cast<std::size_t>(state.range(0));
  std::vector<SdmVerdict> v(n);
  std::vector<int> y(n);
  for (std::size_t i = 0; i < n; ++i) {
    v[i].y_hat = static_cast<int>(rng() % 2);
    v[i].q_tilde = std::floor(u(rng) * 40) / 4;
    v[i].p[v[i].y_hat] = 0.5 + 0.5 * u(rng);
    v[i].p[1 - v[i].y_hat] = 1 - v[i].p[v[i].y_hat];
    y[i] = u(rng) < 0.5 + 0.5 * v[i].p[v[i].y_hat] ? v[i].y_hat : 1 - v[i].y_hat;
  }
  for (auto _ : state) benchmark::DoNotOptimize(fit_thresholds(v, y, 0.95, 20));
}
BENCHMARK(BM_FitThresholds)->Arg(200)->Arg(1000);

}  // namespace

BENCHMARK_MAIN();
