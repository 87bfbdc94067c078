#pragma once

#include "gsh/field.hpp"

namespace gsh {

// Multilinear sample-and-interpolate under circulant boundaries.
//
// `coords` lives on the output lattice and holds, per voxel, the absolute
// sampling position (voxel units of the source lattice, one channel per
// axis). pull is the sparse matrix Phi applied to `src`; push is Phi^T.
//
// The default entry points are the OpenMP kernels. Results do not depend on
// the number of threads: pull is a pure gather, and push is evaluated as a
// gather over target voxels from buckets sorted by source index. The
// reference versions in `serial` are kept for testing and benchmarking.

Field pull(const Field& src, const Field& coords);
Field push(const Field& src, const Field& coords, const Lattice& target);

/// Cubic-convolution (Keys, a = -1/2) sampling with wrap-around. Used for
/// momentum transport inside geodesic shooting, where multilinear damping of
/// the momentum would bias the conserved energy.
Field pull_cubic(const Field& src, const Field& coords);

/// Central differences with wrap-around, in voxel units. Channel c of `src`
/// maps to output channels c*ndim .. c*ndim + ndim - 1.
Field spatial_gradient(const Field& src);

namespace serial {
Field pull(const Field& src, const Field& coords);
Field push(const Field& src, const Field& coords, const Lattice& target);
Field spatial_gradient(const Field& src);
}  // namespace serial

/// Absolute coordinates of every voxel (the identity transform).
Field identity_coords(const Lattice& lattice);

}  // namespace gsh
