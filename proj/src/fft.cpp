#include "fft.hpp"

#include <fftw3.h>

#include <map>
#include <mutex>
#include <tuple>

#include "gsh/error.hpp"

namespace gsh::detail {
namespace {

using PlanKey = std::tuple<int, int, int, int, int, int>;

std::mutex& plan_mutex() {
  static std::mutex m;
  return m;
}

fftw_plan get_plan(const Lattice& lat, int howmany, int sign) {
  static std::map<PlanKey, fftw_plan> cache;
  const PlanKey key{lat.ndim, lat.dims[0], lat.dims[1], lat.dims[2], howmany, sign};
  std::lock_guard<std::mutex> lock(plan_mutex());
  auto it = cache.find(key);
  if (it != cache.end()) return it->second;

  // FFTW wants the slowest axis first.
  int n[3];
  for (int k = 0; k < lat.ndim; ++k) n[k] = lat.dims[lat.ndim - 1 - k];
  const std::size_t total = lat.size() * static_cast<std::size_t>(howmany);
  auto* buf = fftw_alloc_complex(total);
  fftw_plan plan = fftw_plan_many_dft(lat.ndim, n, howmany, buf, nullptr, howmany, 1, buf,
                                      nullptr, howmany, 1, sign,
                                      FFTW_ESTIMATE | FFTW_UNALIGNED);
  fftw_free(buf);
  if (!plan) throw NumericalError("FFTW failed to create a plan for lattice " + lat.describe());
  cache.emplace(key, plan);
  return plan;
}

void run(std::vector<cplx>& data, const Lattice& lat, int howmany, int sign) {
  if (data.size() != lat.size() * static_cast<std::size_t>(howmany)) {
    throw DataError("fft: buffer size does not match lattice");
  }
  fftw_plan plan = get_plan(lat, howmany, sign);
  auto* p = reinterpret_cast<fftw_complex*>(data.data());
  fftw_execute_dft(plan, p, p);
}

}  // namespace

void fft_forward(std::vector<cplx>& data, const Lattice& lattice, int howmany) {
  run(data, lattice, howmany, FFTW_FORWARD);
}

void fft_backward(std::vector<cplx>& data, const Lattice& lattice, int howmany) {
  run(data, lattice, howmany, FFTW_BACKWARD);
}

}  // namespace gsh::detail
