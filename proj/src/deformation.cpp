#include "gsh/deformation.hpp"

namespace gsh {

Deformation Deformation::identity(const Lattice& lattice, DeformationKind kind) {
  return {identity_coords(lattice), kind};
}

Field Deformation::displacement() const {
  Field d = map;
  const Lattice& lat = map.lattice();
  for (std::size_t i = 0; i < lat.size(); ++i) {
    const auto x = lat.coords(i);
    for (int k = 0; k < lat.ndim; ++k) d(i, k) -= x[k];
  }
  return d;
}

Field pull(const Field& src, const Deformation& phi) { return pull(src, phi.map); }

Field push(const Field& src, const Deformation& phi) {
  return push(src, phi.map, phi.map.lattice());
}

Deformation compose(const Deformation& outer, const Deformation& inner) {
  Field out = pull(outer.displacement(), inner.map);
  out += inner.map;
  return {std::move(out), outer.kind};
}

}  // namespace gsh
