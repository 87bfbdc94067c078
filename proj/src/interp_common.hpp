#pragma once

#include <cmath>
#include <cstddef>

#include "gsh/error.hpp"
#include "gsh/field.hpp"

namespace gsh::detail {

/// Multilinear stencil of one sampling point: up to 8 wrapped corners.
struct Stencil {
  std::size_t index[8];
  double weight[8];
  int count;
};

struct CellPos {
  int base[3];
  double frac[3];
};

inline CellPos locate(const double* p, const Lattice& lat) {
  CellPos c{};
  for (int k = 0; k < 3; ++k) {
    if (k < lat.ndim) {
      const double f = std::floor(p[k]);
      c.frac[k] = p[k] - f;
      const double n = lat.dims[k];
      double m = std::fmod(f, n);
      if (m < 0) m += n;
      c.base[k] = static_cast<int>(m);
    } else {
      c.base[k] = 0;
      c.frac[k] = 0.0;
    }
  }
  return c;
}

inline Stencil stencil(const CellPos& c, const Lattice& lat) {
  Stencil s{};
  const int nx = lat.dims[0], ny = lat.dims[1], nz = lat.dims[2];
  const int x0 = c.base[0], x1 = x0 + 1 == nx ? 0 : x0 + 1;
  const int y0 = c.base[1], y1 = y0 + 1 == ny ? 0 : y0 + 1;
  const double tx = c.frac[0], ty = c.frac[1];
  if (lat.ndim == 2) {
    s.count = 4;
    s.index[0] = lat.index(x0, y0);
    s.weight[0] = (1 - tx) * (1 - ty);
    s.index[1] = lat.index(x1, y0);
    s.weight[1] = tx * (1 - ty);
    s.index[2] = lat.index(x0, y1);
    s.weight[2] = (1 - tx) * ty;
    s.index[3] = lat.index(x1, y1);
    s.weight[3] = tx * ty;
  } else {
    const int z0 = c.base[2], z1 = z0 + 1 == nz ? 0 : z0 + 1;
    const double tz = c.frac[2];
    s.count = 8;
    int q = 0;
    for (int dz = 0; dz < 2; ++dz) {
      for (int dy = 0; dy < 2; ++dy) {
        for (int dx = 0; dx < 2; ++dx) {
          s.index[q] = lat.index(dx ? x1 : x0, dy ? y1 : y0, dz ? z1 : z0);
          s.weight[q] = (dx ? tx : 1 - tx) * (dy ? ty : 1 - ty) * (dz ? tz : 1 - tz);
          ++q;
        }
      }
    }
  }
  return s;
}

inline void check_coords(const Field& src, const Field& coords) {
  if (src.lattice().ndim != coords.lattice().ndim) {
    throw DataError("pull/push: lattice dimensionality mismatch between field and transform");
  }
  if (coords.channels() != coords.lattice().ndim) {
    throw DataError("pull/push: transform must carry one coordinate channel per axis");
  }
}

}  // namespace gsh::detail
