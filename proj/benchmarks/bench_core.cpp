// SPDX-License-Identifier: Apache-2.0
#include <benchmark/benchmark.h>

#include "vtr/metrics.hpp"
#include "vtr/model.hpp"
#include "vtr/nn.hpp"
#include "vtr/objectives.hpp"
#include "vtr/tensor.hpp"

namespace {

using namespace vtr;

Tensor random_tensor(Shape shape, Rng& rng, bool requires_grad = false) {
  std::vector<double> v(shape_size(shape));
  for (double& x : v) x = rng.uniform(-1.0, 1.0);
  return Tensor::leaf(std::move(shape), std::move(v), requires_grad);
}

void BM_matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(1);
  Tensor a = random_tensor({n, n}, rng);
  Tensor b = random_tensor({n, n}, rng);
  for (auto _ : state) {
    Tensor c = matmul(a, b);
    benchmark::DoNotOptimize(c.values().data());
  }
  state.SetItemsProcessed(state.iterations() * 2 * n * n * n);
}
BENCHMARK(BM_matmul)->Arg(32)->Arg(128);

void BM_transformer_forward(benchmark::State& state) {
  Rng rng(2);
  nn::StackConfig cfg{32, 4, 2, 4, 16, true};
  nn::StackParams params = nn::init_stack(cfg, 7);
  Tensor x = random_tensor({16, 32}, rng);
  const auto mask = nn::AttentionMask::all(16);
  for (auto _ : state) {
    Tensor y = nn::transformer_forward(x, params, mask);
    benchmark::DoNotOptimize(y.values().data());
  }
}
BENCHMARK(BM_transformer_forward);

void BM_encode_video(benchmark::State& state) {
  ModelConfig cfg;  // desk-scale defaults
  ModelState model = ModelState::init(cfg, 3);
  Rng rng(4);
  std::vector<double> pixels(cfg.n_frames * cfg.frame_h * cfg.frame_w);
  for (double& p : pixels) p = rng.uniform(0.0, 1.0);
  Tensor frames =
      Tensor::leaf({cfg.n_frames, cfg.frame_h, cfg.frame_w}, pixels);
  for (auto _ : state) {
    Tensor v = encode_video_embeddings(frames, model, true);
    benchmark::DoNotOptimize(v.values().data());
  }
}
BENCHMARK(BM_encode_video);

void BM_contrastive_step(benchmark::State& state) {
  // forward + backward of the in-batch alignment loss on unit rows
  const std::size_t b = 16, d = 32;
  Rng rng(5);
  for (auto _ : state) {
    state.PauseTiming();
    Tensor v = l2_normalize(random_tensor({b, d}, rng, true), 1);
    Tensor w = l2_normalize(random_tensor({b, d}, rng, true), 1);
    state.ResumeTiming();
    Tensor loss = contrastive_loss(cosine_sim_matrix(v, w), 0.07);
    backward(loss);
    benchmark::DoNotOptimize(loss.value());
  }
}
BENCHMARK(BM_contrastive_step);

void BM_dual_softmax(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(6);
  SimMatrix s = SimMatrix::zeros(n, n);
  for (double& v : s.values) v = rng.uniform(-1.0, 1.0);
  for (auto _ : state) {
    SimMatrix d = dual_softmax(s);
    benchmark::DoNotOptimize(d.values.data());
  }
}
BENCHMARK(BM_dual_softmax)->Arg(100)->Arg(1000);

}  // namespace

BENCHMARK_MAIN();
