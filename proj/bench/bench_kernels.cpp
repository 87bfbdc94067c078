// OpenMP kernels against their serial references.

#include <benchmark/benchmark.h>

#include <random>

#include "gsh/interp.hpp"

using namespace gsh;

namespace {

Lattice lattice_of(const benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  return state.range(1) == 3 ? Lattice({n, n, n}) : Lattice({n, n});
}

Field random_field(const Lattice& lat, int channels, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n;
  Field f(lat, channels);
  for (double& x : f.storage()) x = n(rng);
  return f;
}

Field random_coords(const Lattice& lat, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-3, 3);
  Field c = identity_coords(lat);
  for (double& x : c.storage()) x += u(rng);
  return c;
}

template <Field (*Pull)(const Field&, const Field&)>
void BM_pull(benchmark::State& state) {
  const Lattice lat = lattice_of(state);
  const Field src = random_field(lat, lat.ndim, 1);
  const Field coords = random_coords(lat, 2);
  for (auto _ : state) benchmark::DoNotOptimize(Pull(src, coords));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(lat.size()));
}

template <Field (*Push)(const Field&, const Field&, const Lattice&)>
void BM_push(benchmark::State& state) {
  const Lattice lat = lattice_of(state);
  const Field src = random_field(lat, lat.ndim, 1);
  const Field coords = random_coords(lat, 2);
  for (auto _ : state) benchmark::DoNotOptimize(Push(src, coords, lat));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(lat.size()));
}

template <Field (*Grad)(const Field&)>
void BM_gradient(benchmark::State& state) {
  const Lattice lat = lattice_of(state);
  const Field src = random_field(lat, 3, 1);
  for (auto _ : state) benchmark::DoNotOptimize(Grad(src));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(lat.size()));
}

void sizes(benchmark::internal::Benchmark* b) {
  b->Args({128, 2})->Args({512, 2})->Args({64, 3})->Unit(benchmark::kMillisecond);
}

}  // namespace

BENCHMARK(BM_pull<pull>)->Name("pull/openmp")->Apply(sizes);
BENCHMARK(BM_pull<serial::pull>)->Name("pull/serial")->Apply(sizes);
BENCHMARK(BM_push<push>)->Name("push/openmp")->Apply(sizes);
BENCHMARK(BM_push<serial::push>)->Name("push/serial")->Apply(sizes);
BENCHMARK(BM_gradient<spatial_gradient>)->Name("gradient/openmp")->Apply(sizes);
BENCHMARK(BM_gradient<serial::spatial_gradient>)->Name("gradient/serial")->Apply(sizes);

BENCHMARK_MAIN();
