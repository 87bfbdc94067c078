#pragma once

#include <cmath>
#include <random>

#include "gsh/field.hpp"
#include "gsh/metric.hpp"

namespace gsh::test {

inline Field random_field(const Lattice& lat, int channels, std::mt19937_64& rng,
                          double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Field f(lat, channels);
  for (double& x : f.storage()) x = n(rng);
  return f;
}

/// Random smooth vector field with a smooth momentum: K^2 applied to white
/// noise, rescaled so the largest displacement component equals `max_abs`.
inline Field smooth_velocity(const SpectralKernel& kern, std::mt19937_64& rng, double max_abs) {
  Field v = kern.apply_inverse(kern.apply_inverse(random_field(kern.lattice(), kern.ndim(), rng)));
  double m = 0;
  for (double x : v.values()) m = std::max(m, std::abs(x));
  v *= max_abs / m;
  return v;
}

/// Random transform: identity plus a random displacement of given amplitude.
inline Field random_coords(const Lattice& lat, std::mt19937_64& rng, double amplitude) {
  std::uniform_real_distribution<double> u(-amplitude, amplitude);
  Field c(lat, lat.ndim);
  for (std::size_t i = 0; i < lat.size(); ++i) {
    const auto x = lat.coords(i);
    for (int k = 0; k < lat.ndim; ++k) c(i, k) = x[k] + u(rng);
  }
  return c;
}

inline double rel_err(const Field& a, const Field& b) {
  return norm(a - b) / std::max(norm(b), 1e-300);
}

}  // namespace gsh::test
