// OpenMP kernels. Every output element is produced by exactly one thread
// with a fixed summation order, so results are independent of thread count.

#include <vector>

#include "gsh/interp.hpp"
#include "interp_common.hpp"

namespace gsh {

Field pull(const Field& src, const Field& coords) {
  detail::check_coords(src, coords);
  const Lattice& lat = src.lattice();
  const int nc = src.channels();
  Field out(coords.lattice(), nc);
  const auto n = static_cast<std::ptrdiff_t>(coords.voxels());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    const auto s = detail::stencil(detail::locate(coords.voxel(i).data(), lat), lat);
    double* o = out.voxel(i).data();
    for (int q = 0; q < s.count; ++q) {
      const double* v = src.voxel(s.index[q]).data();
      for (int c = 0; c < nc; ++c) o[c] += s.weight[q] * v[c];
    }
  }
  return out;
}

Field push(const Field& src, const Field& coords, const Lattice& target) {
  detail::check_coords(src, coords);
  if (src.lattice() != coords.lattice()) {
    throw DataError("push: source field and transform must share a lattice");
  }
  if (target.ndim != coords.lattice().ndim) {
    throw DataError("push: target lattice dimensionality differs from the transform");
  }
  const int nc = src.channels();
  const std::size_t nsrc = coords.voxels();
  const std::size_t ncell = target.size();

  // Bucket source samples by the cell holding their lower corner.
  std::vector<detail::CellPos> pos(nsrc);
  std::vector<std::size_t> cell_of(nsrc);
  std::vector<std::size_t> start(ncell + 1, 0);
  for (std::size_t i = 0; i < nsrc; ++i) {
    pos[i] = detail::locate(coords.voxel(i).data(), target);
    cell_of[i] = target.index(pos[i].base[0], pos[i].base[1], pos[i].base[2]);
    ++start[cell_of[i] + 1];
  }
  for (std::size_t c = 0; c < ncell; ++c) start[c + 1] += start[c];
  std::vector<std::size_t> order(nsrc);
  {
    std::vector<std::size_t> fill(start.begin(), start.end() - 1);
    for (std::size_t i = 0; i < nsrc; ++i) order[fill[cell_of[i]]++] = i;
  }

  Field out(target, nc);
  const int nd = target.ndim;
  const int ncorner = nd == 2 ? 4 : 8;
  const auto n = static_cast<std::ptrdiff_t>(ncell);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t j = 0; j < n; ++j) {
    const auto xj = target.coords(static_cast<std::size_t>(j));
    double* o = out.voxel(j).data();
    for (int q = 0; q < ncorner; ++q) {
      const int ox = q & 1, oy = (q >> 1) & 1, oz = (q >> 2) & 1;
      const std::size_t cell = target.index(wrap_index(xj[0] - ox, target.dims[0]),
                                            wrap_index(xj[1] - oy, target.dims[1]),
                                            nd == 3 ? wrap_index(xj[2] - oz, target.dims[2]) : 0);
      for (std::size_t b = start[cell]; b < start[cell + 1]; ++b) {
        const std::size_t i = order[b];
        const auto& p = pos[i];
        double w = (ox ? p.frac[0] : 1 - p.frac[0]) * (oy ? p.frac[1] : 1 - p.frac[1]);
        if (nd == 3) w *= oz ? p.frac[2] : 1 - p.frac[2];
        const double* v = src.voxel(i).data();
        for (int c = 0; c < nc; ++c) o[c] += w * v[c];
      }
    }
  }
  return out;
}

Field spatial_gradient(const Field& src) {
  const Lattice& lat = src.lattice();
  const int nd = lat.ndim;
  const int nc = src.channels();
  Field out(lat, nc * nd);
  const auto n = static_cast<std::ptrdiff_t>(lat.size());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    const auto x = lat.coords(static_cast<std::size_t>(i));
    for (int k = 0; k < nd; ++k) {
      auto up = x, dn = x;
      up[k] = wrap_index(x[k] + 1, lat.dims[k]);
      dn[k] = wrap_index(x[k] - 1, lat.dims[k]);
      const std::size_t iu = lat.index(up[0], up[1], up[2]);
      const std::size_t id = lat.index(dn[0], dn[1], dn[2]);
      for (int c = 0; c < nc; ++c) out(i, c * nd + k) = 0.5 * (src(iu, c) - src(id, c));
    }
  }
  return out;
}

}  // namespace gsh

namespace gsh {
namespace {

inline void keys_weights(double t, double w[4]) {
  // taps at offsets -1, 0, 1, 2
  const double a = -0.5;
  auto far = [a](double x) { return a * (((x - 5) * x + 8) * x - 4); };   // 1 <= x < 2
  auto near = [a](double x) { return ((a + 2) * x - (a + 3)) * x * x + 1; };  // 0 <= x < 1
  w[0] = far(1 + t);
  w[1] = near(t);
  w[2] = near(1 - t);
  w[3] = far(2 - t);
}

}  // namespace

Field pull_cubic(const Field& src, const Field& coords) {
  detail::check_coords(src, coords);
  const Lattice& lat = src.lattice();
  const int nc = src.channels();
  const int nd = lat.ndim;
  Field out(coords.lattice(), nc);
  const auto n = static_cast<std::ptrdiff_t>(coords.voxels());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    const auto c = detail::locate(coords.voxel(i).data(), lat);
    double w[3][4];
    int idx[3][4];
    for (int k = 0; k < 3; ++k) {
      if (k < nd) {
        keys_weights(c.frac[k], w[k]);
        for (int q = 0; q < 4; ++q) idx[k][q] = wrap_index(c.base[k] - 1 + q, lat.dims[k]);
      } else {
        for (int q = 0; q < 4; ++q) {
          w[k][q] = q == 0 ? 1.0 : 0.0;
          idx[k][q] = 0;
        }
      }
    }
    double* o = out.voxel(i).data();
    const int qz_end = nd == 3 ? 4 : 1;
    for (int qz = 0; qz < qz_end; ++qz) {
      for (int qy = 0; qy < 4; ++qy) {
        const double wyz = w[1][qy] * w[2][qz];
        for (int qx = 0; qx < 4; ++qx) {
          const double wt = w[0][qx] * wyz;
          const double* v = src.voxel(lat.index(idx[0][qx], idx[1][qy], idx[2][qz])).data();
          for (int ch = 0; ch < nc; ++ch) o[ch] += wt * v[ch];
        }
      }
    }
  }
  return out;
}

}  // namespace gsh
