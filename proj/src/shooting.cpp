#include "gsh/shooting.hpp"

#include <string>

#include "gsh/error.hpp"

namespace gsh {

Field jacobian(const Deformation& phi) {
  const Lattice& lat = phi.lattice();
  const int d = lat.ndim;
  const Field grad = spatial_gradient(phi.displacement());  // channel r*d + c
  Field out = grad;
  for (std::size_t i = 0; i < lat.size(); ++i) {
    for (int r = 0; r < d; ++r) out(i, r * d + r) += 1.0;
  }
  return out;
}

namespace {

double det_block(const double* j, int d) {
  if (d == 2) return j[0] * j[3] - j[1] * j[2];
  return j[0] * (j[4] * j[8] - j[5] * j[7]) - j[1] * (j[3] * j[8] - j[5] * j[6]) +
         j[2] * (j[3] * j[7] - j[4] * j[6]);
}

/// u(x) = |J(x)| J(x)^T m(x), with J the Jacobian of phi^-1.
Field transport_momentum(const Field& u0, const Deformation& inv) {
  const Lattice& lat = inv.lattice();
  const int d = lat.ndim;
  const Field jac = jacobian(inv);
  const Field warped = pull_cubic(u0, inv.map);
  Field out(lat, d);
  const auto n = static_cast<std::ptrdiff_t>(lat.size());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    const double* j = jac.voxel(i).data();
    const double* m = warped.voxel(i).data();
    const double det = det_block(j, d);
    for (int c = 0; c < d; ++c) {
      double acc = 0;
      for (int r = 0; r < d; ++r) acc += j[r * d + c] * m[r];
      out(i, c) = det * acc;
    }
  }
  return out;
}

}  // namespace

Field jacobian_determinant(const Deformation& phi) {
  const Field jac = jacobian(phi);
  const int d = phi.lattice().ndim;
  Field out(phi.lattice(), 1);
  for (std::size_t i = 0; i < out.voxels(); ++i) out(i, 0) = det_block(jac.voxel(i).data(), d);
  return out;
}

ShootingResult shoot(const Field& v0, const SpectralKernel& kernel, int steps) {
  if (steps < 1) throw DataError("shoot: number of steps must be at least 1");
  const Lattice& lat = kernel.lattice();
  if (v0.lattice() != lat || v0.channels() != lat.ndim) {
    throw DataError("shoot: velocity does not match the kernel lattice");
  }
  if (!v0.all_finite()) throw NumericalError("shoot: initial velocity is not finite");

  ShootingResult res;
  res.steps = steps;
  res.initial_momentum = kernel.apply(v0);
  res.forward = Deformation::identity(lat, DeformationKind::forward);
  res.inverse = Deformation::identity(lat, DeformationKind::inverse);
  res.energies.push_back(dot(res.initial_momentum, v0));

  const Field id = identity_coords(lat);
  const double dt = 1.0 / steps;
  Field v = v0;
  Field v_prev = v0;
  for (int t = 0; t < steps; ++t) {
    // Velocity at the middle of the step, extrapolated from the last two
    // levels; the first step falls back to plain Euler.
    Field v_mid = v;
    if (t > 0) {
      v_mid *= 1.5;
      axpy(-0.5, v_prev, v_mid);
    }

    // phi^-1 <- phi^-1 o X, X the backward characteristic through x:
    // X = x - dt v_mid(x - dt/2 v_mid(x))
    Field half = id;
    axpy(-0.5 * dt, v_mid, half);
    Field pts = id;
    axpy(-dt, pull(v_mid, half), pts);
    Field inv = pull(res.inverse.displacement(), pts);
    inv += pts;
    res.inverse.map = std::move(inv);

    // phi <- phi + dt v_mid(phi + dt/2 v_mid(phi))
    Field fhalf = res.forward.map;
    axpy(0.5 * dt, pull(v_mid, res.forward.map), fhalf);
    axpy(dt, pull(v_mid, fhalf), res.forward.map);

    Field u = transport_momentum(res.initial_momentum, res.inverse);
    v_prev = std::move(v);
    v = kernel.apply_inverse(u);
    res.energies.push_back(dot(u, v));
    if (!v.all_finite() || !res.inverse.map.all_finite() || !res.forward.map.all_finite()) {
      throw NumericalError("shoot: non-finite state at step " + std::to_string(t + 1) +
                           " (velocity too rough or step too large)");
    }
  }
  res.final_velocity = std::move(v);
  return res;
}

}  // namespace gsh
