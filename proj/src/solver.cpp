#include "gsh/solver.hpp"

#include <cmath>

#include "gsh/error.hpp"

namespace gsh {

SolverReport pcg(const LinearOp& A, const LinearOp& precond, const Field& b, Field& x,
                 double tol, int max_iter) {
  require_same_shape(b, x, "pcg");
  SolverReport rep;
  const double bnorm = norm(b);
  if (bnorm == 0) {
    x.fill(0.0);
    rep.converged = true;
    return rep;
  }
  Field r = b - A(x);
  Field z = precond(r);
  Field p = z;
  double rz = dot(r, z);
  rep.relative_residual = norm(r) / bnorm;
  while (rep.relative_residual > tol && rep.iterations < max_iter) {
    const Field Ap = A(p);
    const double pAp = dot(p, Ap);
    if (!(pAp > 0)) throw NumericalError("pcg: operator is not positive definite");
    const double alpha = rz / pAp;
    axpy(alpha, p, x);
    axpy(-alpha, Ap, r);
    ++rep.iterations;
    rep.relative_residual = norm(r) / bnorm;
    if (rep.relative_residual <= tol) break;
    z = precond(r);
    const double rz_new = dot(r, z);
    const double beta = rz_new / rz;
    rz = rz_new;
    p *= beta;
    p += z;
  }
  rep.converged = rep.relative_residual <= tol;
  if (!x.all_finite()) throw NumericalError("pcg: non-finite iterate");
  return rep;
}

Field apply_blocks(const Field& blocks, const Field& v) {
  const int d = v.channels();
  if (blocks.channels() != d * d || blocks.lattice() != v.lattice()) {
    throw DataError("apply_blocks: block field does not match the vector field");
  }
  Field out(v.lattice(), d);
  const auto n = static_cast<std::ptrdiff_t>(v.voxels());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    const double* b = blocks.voxel(i).data();
    const double* x = v.voxel(i).data();
    double* y = out.voxel(i).data();
    for (int r = 0; r < d; ++r) {
      double acc = 0;
      for (int c = 0; c < d; ++c) acc += b[r * d + c] * x[c];
      y[r] = acc;
    }
  }
  return out;
}

}  // namespace gsh
