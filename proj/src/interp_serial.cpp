// Reference kernels: straightforward single-threaded loops.

#include "gsh/interp.hpp"
#include "interp_common.hpp"

namespace gsh {

Field identity_coords(const Lattice& lattice) {
  Field out(lattice, lattice.ndim);
  for (std::size_t i = 0; i < lattice.size(); ++i) {
    const auto c = lattice.coords(i);
    for (int k = 0; k < lattice.ndim; ++k) out(i, k) = c[k];
  }
  return out;
}

namespace serial {

Field pull(const Field& src, const Field& coords) {
  detail::check_coords(src, coords);
  const Lattice& lat = src.lattice();
  const int nc = src.channels();
  Field out(coords.lattice(), nc);
  for (std::size_t i = 0; i < coords.voxels(); ++i) {
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
  Field out(target, nc);
  for (std::size_t i = 0; i < coords.voxels(); ++i) {
    const auto s = detail::stencil(detail::locate(coords.voxel(i).data(), target), target);
    const double* v = src.voxel(i).data();
    for (int q = 0; q < s.count; ++q) {
      double* o = out.voxel(s.index[q]).data();
      for (int c = 0; c < nc; ++c) o[c] += s.weight[q] * v[c];
    }
  }
  return out;
}

Field spatial_gradient(const Field& src) {
  const Lattice& lat = src.lattice();
  const int nd = lat.ndim;
  const int nc = src.channels();
  Field out(lat, nc * nd);
  for (std::size_t i = 0; i < lat.size(); ++i) {
    const auto x = lat.coords(i);
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

}  // namespace serial
}  // namespace gsh
