#pragma once

#include <complex>
#include <vector>

#include <Eigen/Dense>

#include "gsh/field.hpp"

namespace gsh {

/// Weights of the regularisation energy defining the metric L.
///
/// 0.5 <Lv, v> = absolute/2 |v|^2
///             + membrane/2 sum_j |D_j v|^2
///             + bending/2 |Lap v|^2
///             + shear sum_jk |(D_j v_k + D_k v_j) / 2|^2
///             + divergence/2 |div v|^2
/// with forward differences D_j scaled by the voxel size.
struct MetricParams {
  double membrane = 0.001;
  double bending = 0.02;
  double elastic_div = 0.0025;
  double elastic_shear = 0.005;
  double absolute = 1e-4;

  /// Throws ConfigError on negative weights or an identically zero operator.
  void validate() const;
};

/// Frequency-domain representation of L under circulant boundaries: one
/// Hermitian d x d matrix per frequency, together with its inverse (the
/// Green's function K). Immutable once built and safe to share.
class SpectralKernel {
 public:
  using Block = Eigen::Matrix<std::complex<double>, Eigen::Dynamic, Eigen::Dynamic, 0, 3, 3>;

  SpectralKernel() = default;
  SpectralKernel(const Lattice& lattice, const MetricParams& params);

  const Lattice& lattice() const { return lattice_; }
  const MetricParams& params() const { return params_; }
  int ndim() const { return lattice_.ndim; }

  /// L-hat at flat frequency index f (same indexing as voxels).
  Block symbol(std::size_t f) const;
  Block inverse_symbol(std::size_t f) const;

  /// All eigenvalues of L, sorted ascending (size d * I).
  std::vector<double> eigenvalues() const;

  /// Voxelwise diagonal d x d block of the dense operator (identical at every
  /// voxel because L is circulant).
  const Eigen::Matrix3d& diagonal_block() const { return diag_block_; }

  Field apply(const Field& v) const;
  Field apply_inverse(const Field& u) const;
  /// L^{-1/2} applied to a real field (used to draw samples from N(0, L^-1)).
  Field apply_inverse_sqrt(const Field& x) const;

 private:
  Field multiply(const Field& v, const std::vector<std::complex<double>>& mats) const;

  Lattice lattice_;
  MetricParams params_;
  std::vector<std::complex<double>> symbol_;
  std::vector<std::complex<double>> inverse_;
  Eigen::Matrix3d diag_block_ = Eigen::Matrix3d::Zero();
};

SpectralKernel build_kernel(const Lattice& lattice, const MetricParams& params);

/// Momentum u = L v.
Field apply_L(const Field& v, const SpectralKernel& kernel);
/// Velocity v = K u.
Field apply_K(const Field& u, const SpectralKernel& kernel);
/// 0.5 <L v, v>
double metric_energy(const Field& v, const SpectralKernel& kernel);

}  // namespace gsh
