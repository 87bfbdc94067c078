#pragma once

#include "gsh/field.hpp"
#include "gsh/interp.hpp"

namespace gsh {

enum class DeformationKind { forward, inverse };

/// Dense transform sampled on a lattice: absolute sample coordinates in
/// voxel units, one channel per axis.
struct Deformation {
  Field map;
  DeformationKind kind = DeformationKind::forward;

  static Deformation identity(const Lattice& lattice,
                              DeformationKind kind = DeformationKind::forward);

  const Lattice& lattice() const { return map.lattice(); }
  /// map - identity
  Field displacement() const;
};

Field pull(const Field& src, const Deformation& phi);
Field push(const Field& src, const Deformation& phi);

/// (outer o inner)(x) = outer(inner(x)), interpolating outer's displacement
/// with wrap-around.
Deformation compose(const Deformation& outer, const Deformation& inner);

}  // namespace gsh
