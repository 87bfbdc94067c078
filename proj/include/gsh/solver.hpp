#pragma once

#include <functional>

#include "gsh/field.hpp"

namespace gsh {

struct SolverReport {
  int iterations = 0;
  double relative_residual = 0;
  bool converged = false;
};

using LinearOp = std::function<Field(const Field&)>;

/// Preconditioned conjugate gradients for an SPD operator. `x` holds the
/// initial guess on entry and the solution on exit. Stops once
/// ||b - Ax|| <= tol ||b|| or after max_iter iterations; non-convergence is
/// reported, not thrown.
SolverReport pcg(const LinearOp& A, const LinearOp& precond, const Field& b, Field& x,
                 double tol, int max_iter);

/// Per-voxel d x d block (d*d channels, row-major) times a d-channel field.
Field apply_blocks(const Field& blocks, const Field& v);

}  // namespace gsh
