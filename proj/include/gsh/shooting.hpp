#pragma once

#include <vector>

#include "gsh/deformation.hpp"
#include "gsh/metric.hpp"

namespace gsh {

struct ShootingResult {
  Deformation forward;   // phi: flow of the velocity over unit time
  Deformation inverse;   // phi^-1, integrated alongside phi
  Field initial_momentum;
  int steps = 0;
  std::vector<double> energies;  // <u_t, v_t> for t = 0, 1/T, ..., 1
  Field final_velocity;          // v_1
};

/// Geodesic shooting from an initial velocity. The momentum is transported
/// as u_t = |D phi_t^-1| (D phi_t^-1)^T (u_0 o phi_t^-1) and v_t = K u_t;
/// both maps are advanced by semi-Lagrangian steps of size 1/steps. Each
/// step composes with the flow of a midpoint velocity, extrapolated from the
/// two latest velocity levels (plain Euler on the first step), so no extra
/// K solves are needed over the first-order scheme.
ShootingResult shoot(const Field& v0, const SpectralKernel& kernel, int steps);

/// Per-voxel Jacobian matrix of the map, d*d channels, row-major
/// (entry r*d + c is d phi_r / d x_c). Central differences, wrap-around.
Field jacobian(const Deformation& phi);
Field jacobian_determinant(const Deformation& phi);

}  // namespace gsh
