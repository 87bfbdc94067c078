#pragma once

#include <vector>

#include <Eigen/Dense>

#include "gsh/field.hpp"
#include "gsh/metric.hpp"

namespace gsh {

/// Weights of the two prior formulations on the reconstructed velocities:
/// gamma1 for the separate priors on z and r (and W), gamma2 for the joint
/// smoothness prior on Wz + r.
struct MixtureWeights {
  double gamma1 = 1.0;
  double gamma2 = 1.0;
  void validate() const;
};

enum class ResidualUncertainty { none, diagonal };

/// Principal subspace: M velocity fields w_1..w_M on one lattice.
class Subspace {
 public:
  Subspace() = default;
  Subspace(const Lattice& lattice, int modes);
  explicit Subspace(std::vector<Field> modes);

  int size() const { return static_cast<int>(modes_.size()); }
  const Lattice& lattice() const { return modes_.front().lattice(); }
  Field& mode(int m) { return modes_[m]; }
  const Field& mode(int m) const { return modes_[m]; }
  std::vector<Field>& modes() { return modes_; }
  const std::vector<Field>& modes() const { return modes_; }

  /// W z
  Field combine(const Eigen::VectorXd& z) const;
  /// W^T x (Euclidean)
  Eigen::VectorXd project(const Field& x) const;
  /// W^T L W
  Eigen::MatrixXd gram(const SpectralKernel& kernel) const;
  /// W <- W R  (R is M x M', new modes are combinations of the old)
  Subspace transformed(const Eigen::MatrixXd& R) const;

 private:
  std::vector<Field> modes_;
};

struct LatentPosterior {
  Eigen::VectorXd z;
  Eigen::MatrixXd S;
  static LatentPosterior prior_mean(int M);
};

struct ResidualPosterior {
  Field r;
  Field cov;                    // d*d per voxel; empty when uncertainty is ignored
  double expected_energy = 0;   // E[r^T L r]
  static ResidualPosterior zero(const Lattice& lattice);
};

/// q(lambda) = Gamma(alpha, beta) (rate parameterisation).
struct NoisePrecisionPosterior {
  double alpha = 1;
  double beta = 1;
  double nu0 = 10;
  double lambda0 = 17;
  double dim = 1;  // d * I
  double mean() const { return alpha / beta; }
  double mean_log() const;
  static NoisePrecisionPosterior prior(double nu0, double lambda0, double dim);
  double prior_alpha() const { return nu0 * dim / 2; }
  double prior_beta() const { return nu0 * dim / (2 * lambda0); }
};

/// q(A) = Wishart(V, dof); E[A] = dof * V.
struct LatentPrecisionPosterior {
  Eigen::MatrixXd V;
  double dof = 1;
  Eigen::MatrixXd mean() const { return dof * V; }
  double mean_logdet() const;
  /// Wishart(I/M, M): expected value I.
  static LatentPrecisionPosterior prior(int M);
};

/// Everything the variational scheme estimates.
struct ModelState {
  Field templ;  // log-template a (K channels)
  Subspace W;
  std::vector<LatentPosterior> latents;
  std::vector<ResidualPosterior> residuals;
  NoisePrecisionPosterior lambda;
  LatentPrecisionPosterior A;
};

}  // namespace gsh
