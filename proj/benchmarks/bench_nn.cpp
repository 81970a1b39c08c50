#include <benchmark/benchmark.h>

#include <array>
#include <vector>

#include "taxidest/nn.hpp"
#include "taxidest/rng.hpp"

namespace {

using taxidest::Rng;
namespace nn = taxidest::nn;

void BM_Matvec(benchmark::State& state) {
  Rng rng(5);
  const int n = static_cast<int>(state.range(0));
  nn::Tensor w = nn::glorot_uniform(n, n, rng);
  nn::Tensor x = nn::uniform_init({n}, 1.0, rng);
  for (auto _ : state) {
    nn::Tensor y = nn::matvec(w, x);
    benchmark::DoNotOptimize(y);
  }
  state.SetItemsProcessed(state.iterations() * n * n);
}
BENCHMARK(BM_Matvec)->Arg(128)->Arg(256);

void BM_LstmStepForward(benchmark::State& state) {
  Rng rng(7);
  const int hidden = static_cast<int>(state.range(0));
  nn::LstmParams lstm = nn::make_lstm(64, hidden, rng);
  nn::Tensor x = nn::uniform_init({64}, 1.0, rng);
  for (auto _ : state) {
    nn::LstmState st = nn::lstm_initial_state(hidden);
    st = nn::lstm_step(lstm, x, st, nn::Activation::kRelu);
    benchmark::DoNotOptimize(st.h);
  }
}
BENCHMARK(BM_LstmStepForward)->Arg(64)->Arg(128);

// Nine recurrent steps with attention plus a full backward pass: one
// training sample at the default sequence length and hidden size.
void BM_SequenceBackward(benchmark::State& state) {
  Rng rng(9);
  const int hidden = static_cast<int>(state.range(0));
  nn::LstmParams lstm = nn::make_lstm(48, hidden, rng);
  nn::Tensor att_w = nn::uniform_init({48}, 0.5, rng);
  std::vector<nn::Tensor> steps;
  for (int t = 0; t < 9; ++t) steps.push_back(nn::uniform_init({48}, 1.0, rng, false));
  std::vector<double> target(static_cast<std::size_t>(hidden), 0.1);
  std::vector<nn::Tensor> params = lstm.parameters();
  params.push_back(att_w);

  for (auto _ : state) {
    const std::vector<nn::Tensor> weighted = nn::attention_reweight(att_w, steps);
    nn::LstmState st = nn::lstm_initial_state(hidden);
    for (const nn::Tensor& s : weighted) st = nn::lstm_step(lstm, s, st, nn::Activation::kRelu);
    nn::Tensor loss = nn::mse_loss(st.h, target);
    loss.backward();
    for (nn::Tensor& p : params) p.zero_grad();
    benchmark::DoNotOptimize(loss);
  }
}
BENCHMARK(BM_SequenceBackward)->Arg(64)->Arg(128)->Unit(benchmark::kMicrosecond);

void BM_AdamStep(benchmark::State& state) {
  Rng rng(11);
  const int hidden = static_cast<int>(state.range(0));
  nn::LstmParams lstm = nn::make_lstm(64, hidden, rng);
  nn::Tensor x = nn::uniform_init({64}, 1.0, rng);
  std::vector<double> target(static_cast<std::size_t>(hidden), 0.1);
  std::vector<nn::Tensor> params = lstm.parameters();
  nn::Adam opt(params, 1e-3);

  // Populate gradients once; step() reuses whatever is on the parameters.
  nn::LstmState st = nn::lstm_initial_state(hidden);
  st = nn::lstm_step(lstm, x, st, nn::Activation::kTanh);
  nn::mse_loss(st.h, target).backward();

  for (auto _ : state) {
    opt.step();
  }
}
BENCHMARK(BM_AdamStep)->Arg(128);

}  // namespace

BENCHMARK_MAIN();
