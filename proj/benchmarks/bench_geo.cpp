#include <benchmark/benchmark.h>

#include <vector>

#include "taxidest/geo.hpp"
#include "taxidest/rng.hpp"

namespace {

using taxidest::Rng;
using taxidest::geo::Coordinate;

std::vector<Coordinate> random_points(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Coordinate> pts;
  pts.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    pts.emplace_back(rng.uniform(-90.0, 90.0), rng.uniform(-180.0, 180.0));
  }
  return pts;
}

void BM_HaversinePair(benchmark::State& state) {
  const Coordinate a(41.1579, -8.6291);
  const Coordinate b(38.7223, -9.1393);
  for (auto _ : state) {
    benchmark::DoNotOptimize(taxidest::geo::haversine_km(a, b));
  }
}
BENCHMARK(BM_HaversinePair);

// Pairwise sweep over a fixed batch; items_processed counts distances.
void BM_HaversineBatch(benchmark::State& state) {
  const auto pts = random_points(static_cast<std::size_t>(state.range(0)), 7);
  for (auto _ : state) {
    double sum = 0.0;
    for (std::size_t i = 1; i < pts.size(); ++i) {
      sum += taxidest::geo::haversine_km(pts[i - 1], pts[i]);
    }
    benchmark::DoNotOptimize(sum);
  }
  state.SetItemsProcessed(state.iterations() * (state.range(0) - 1));
}
BENCHMARK(BM_HaversineBatch)->Arg(1024)->Arg(8192);

void BM_ErrorDistanceScore(benchmark::State& state) {
  const auto truth = random_points(1024, 11);
  const auto pred = random_points(1024, 13);
  for (auto _ : state) {
    double sum = 0.0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
      sum += taxidest::geo::eds_km(pred[i], truth[i]);
    }
    benchmark::DoNotOptimize(sum);
  }
  state.SetItemsProcessed(state.iterations() * 1024);
}
BENCHMARK(BM_ErrorDistanceScore);

}  // namespace

BENCHMARK_MAIN();
