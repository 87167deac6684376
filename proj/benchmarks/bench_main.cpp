#include <benchmark/benchmark.h>

#include <random>

#include "tubelet/classifier.hpp"
#include "tubelet/metrics.hpp"
#include "tubelet/ops.hpp"
#include "tubelet/random.hpp"
#include "tubelet/tracker.hpp"
#include "tubelet/tubelet.hpp"

using namespace tubelet;

namespace {

// Batched 3x3 stride-2 convolution, forward and backward; args: batch, C_in, C_out, H.
void BM_Conv2dStep(benchmark::State& state) {
  const int n = state.range(0), cin = state.range(1), cout = state.range(2), h = state.range(3);
  std::mt19937_64 rng(1);
  const Tensor x = uniform_tensor({n, cin, h, h}, 1.0, rng);
  const Tensor w = uniform_tensor({cout, cin, 3, 3}, 0.1, rng);
  const Tensor b = uniform_tensor({cout}, 0.1, rng);
  for (auto _ : state) {
    Graph<float> g;
    Var xv = g.input(x, true);
    g.backward(sum(g, conv2d(g, xv, g.input(w, true), g.input(b, true), 2, 1)));
    benchmark::DoNotOptimize(g.grad(xv).data().data());
  }
  state.SetItemsProcessed(state.iterations() * n);
}
BENCHMARK(BM_Conv2dStep)->Args({10, 32, 8, 32})->Args({10, 64, 128, 16})->Unit(benchmark::kMicrosecond);

void BM_RoiAlign(benchmark::State& state) {
  const int res = state.range(0);
  std::mt19937_64 rng(2);
  const Tensor map = uniform_tensor({32, 16, 16}, 1.0, rng);
  const UnionBox box{5.3, 7.1, 41.9, 50.2, 0.9};
  for (auto _ : state) benchmark::DoNotOptimize(roi_align(map, 4.0, box, res));
}
BENCHMARK(BM_RoiAlign)->Arg(8)->Arg(32);

// One Adam step on a 10-frame tubelet with the default F4 classifier.
void BM_TrainStep(benchmark::State& state) {
  ClassifierConfig cfg = default_classifier_config(LayerTag::F4, static_cast<EmbedMode>(state.range(0)));
  cfg.epochs = 1;
  std::mt19937_64 rng(3);
  Tubelet tb;
  tb.features = uniform_tensor({10, cfg.in_channels, cfg.roi_res, cfg.roi_res}, 1.0, rng);
  for (int t = 0; t < 10; ++t) {
    tb.frames.push_back(t);
    tb.instance_labels.push_back(t % 3 == 0);
  }
  tb.context = {0.5f, 0.5f, 0.2f, 0.3f, 0.9f};
  tb.label = 1;
  const std::vector<Tubelet> one{tb};
  for (auto _ : state) benchmark::DoNotOptimize(train(one, cfg).params.size());
}
BENCHMARK(BM_TrainStep)->Arg(static_cast<int>(EmbedMode::None))->Arg(static_cast<int>(EmbedMode::EmbedLast))
    ->Arg(static_cast<int>(EmbedMode::EmbedAll))->Unit(benchmark::kMillisecond);

void BM_SolveAssignment(benchmark::State& state) {
  const int n = state.range(0);
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0, 1);
  Eigen::MatrixXd cost(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) cost(i, j) = u(rng);
  for (auto _ : state) benchmark::DoNotOptimize(solve_assignment(cost));
}
BENCHMARK(BM_SolveAssignment)->Arg(4)->Arg(32)->Arg(128);

// Objects drifting in disjoint cells for 100 frames.
void BM_TrackVideo(benchmark::State& state) {
  const int objects = state.range(0);
  std::vector<std::vector<BoundingBox>> frames(100);
  for (int t = 0; t < 100; ++t)
    for (int k = 0; k < objects; ++k) {
      const double x = k * 60 + 0.4 * t, y = 20 + 0.2 * t;
      frames[t].push_back({x, y, x + 20, y + 20, 0.9});
    }
  for (auto _ : state) benchmark::DoNotOptimize(track_video(frames));
  state.SetItemsProcessed(state.iterations() * 100);
}
BENCHMARK(BM_TrackVideo)->Arg(1)->Arg(10);

void BM_Auroc(benchmark::State& state) {
  const int n = state.range(0);
  std::mt19937_64 rng(5);
  std::normal_distribution<double> z(0, 1);
  std::vector<double> s(n);
  std::vector<int> y(n);
  for (int i = 0; i < n; ++i) {
    y[i] = i % 2;
    s[i] = z(rng) + y[i];
  }
  for (auto _ : state) benchmark::DoNotOptimize(auroc(s, y));
}
BENCHMARK(BM_Auroc)->Arg(100)->Arg(10000);

}  // namespace

BENCHMARK_MAIN();
