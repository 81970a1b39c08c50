#include <benchmark/benchmark.h>

#include <vector>

#include "taxidest/clustering.hpp"
#include "taxidest/geo.hpp"
#include "taxidest/rng.hpp"

namespace {

using taxidest::Rng;
using taxidest::geo::Coordinate;

std::vector<Coordinate> city_dropoffs(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Coordinate> pts;
  pts.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    pts.emplace_back(rng.uniform(40.9, 41.4), rng.uniform(-8.9, -8.3));
  }
  return pts;
}

void BM_KmeansFit(benchmark::State& state) {
  const auto pts = city_dropoffs(static_cast<std::size_t>(state.range(0)), 3);
  taxidest::clustering::KmeansOptions opt;
  opt.n_init = 2;
  for (auto _ : state) {
    auto result = taxidest::clustering::fit_kmeans(pts, static_cast<int>(state.range(1)), 17, opt);
    benchmark::DoNotOptimize(result.inertia);
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_KmeansFit)->Args({512, 8})->Args({2048, 16})->Unit(benchmark::kMillisecond);

void BM_ClusterAssign(benchmark::State& state) {
  const auto pts = city_dropoffs(4096, 5);
  const auto fitted =
      taxidest::clustering::fit_kmeans(city_dropoffs(1024, 9), static_cast<int>(state.range(0)),
                                       23, {});
  std::size_t i = 0;
  for (auto _ : state) {
    benchmark::DoNotOptimize(fitted.model.assign(pts[i]));
    i = (i + 1) % pts.size();
  }
}
BENCHMARK(BM_ClusterAssign)->Arg(16)->Arg(64);

}  // namespace

BENCHMARK_MAIN();
