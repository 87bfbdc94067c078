#pragma once

#include <functional>
#include <vector>

#include "gsh/model.hpp"
#include "gsh/solver.hpp"
#include "gsh/template.hpp"

namespace gsh {

/// A data term as a function of the initial velocity v. When `with_derivs`
/// is false only `energy` needs to be filled.
using DataTerm = std::function<DataTermDerivs(const Field& v, bool with_derivs)>;

/// Categorical image f against template a, warped by shooting v.
DataTerm categorical_term(const Field& f, const Field& a, const SpectralKernel& kernel,
                          int steps);

/// Read-only view of the global state used by the per-subject updates.
struct GlobalSnapshot {
  const SpectralKernel* kernel = nullptr;
  const Subspace* W = nullptr;
  Eigen::MatrixXd G;          // W^T L W
  std::vector<Field> LW;      // L w_m
  Eigen::MatrixXd A;          // E[A]
  double lambda = 1;          // E[lambda]
  MixtureWeights weights;
  ResidualUncertainty uncertainty = ResidualUncertainty::diagonal;
  double pcg_tol = 1e-6;
  int pcg_max_iter = 64;

  static GlobalSnapshot make(const SpectralKernel& kernel, const Subspace& W,
                             const Eigen::MatrixXd& A, double lambda, const MixtureWeights& w);
  /// gamma1 lambda + gamma2: prior precision of r relative to L.
  double residual_precision() const { return weights.gamma1 * lambda + weights.gamma2; }
  /// gamma1 A + gamma2 W^T L W
  Eigen::MatrixXd latent_precision() const { return weights.gamma1 * A + weights.gamma2 * G; }
};

/// F(z, r) = E(Wz + r) + gamma1/2 z^T A z + gamma1 lambda/2 r^T L r
///          + gamma2/2 (Wz + r)^T L (Wz + r)
/// (negative log joint of one subject up to constants, at point estimates).
double subject_objective(const GlobalSnapshot& g, const DataTerm& data, const Eigen::VectorXd& z,
                         const Field& r);

/// Gradients of F with respect to z and r given data derivatives at Wz + r.
Eigen::VectorXd latent_gradient(const GlobalSnapshot& g, const DataTermDerivs& d,
                                const Eigen::VectorXd& z, const Field& r);
Field residual_gradient(const GlobalSnapshot& g, const DataTermDerivs& d,
                        const Eigen::VectorXd& z, const Field& r);

/// W^T H_v W for a voxelwise block Hessian.
Eigen::MatrixXd project_hessian(const Subspace& W, const Field& hess_v);

/// Laplace covariances at a mode.
Eigen::MatrixXd latent_covariance(const GlobalSnapshot& g, const Field& hess_v);
Field residual_covariance(const GlobalSnapshot& g, const Field& hess_v);
/// r^T L r + sum_i tr(S_i L_ii)
double expected_residual_energy(const SpectralKernel& kernel, const Field& r, const Field& cov);

struct StepReport {
  double before = 0;
  double after = 0;
  int halvings = 0;
  bool accepted = false;
  SolverReport solver;
};

/// One Gauss-Newton step on F in z with backtracking (at most 6 halvings),
/// then the Laplace covariance at the resulting point. `current` holds data
/// derivatives at the starting point on entry and at the returned point on
/// exit. Throws NumericalError when the Gauss-Newton system is singular.
LatentPosterior update_latent(const GlobalSnapshot& g, const DataTerm& data,
                              const LatentPosterior& post, const Field& r,
                              DataTermDerivs& current, StepReport* report = nullptr);
LatentPosterior update_latent(const GlobalSnapshot& g, const DataTerm& data,
                              const LatentPosterior& post, const Field& r,
                              StepReport* report = nullptr);

/// One Gauss-Newton step on F in r. The system (H_v + c L) d = -grad is
/// solved by PCG preconditioned with K / c. Solver non-convergence is
/// recorded in the report.
ResidualPosterior update_residual(const GlobalSnapshot& g, const DataTerm& data,
                                  const ResidualPosterior& post, const Eigen::VectorXd& z,
                                  DataTermDerivs& current, StepReport* report = nullptr);
ResidualPosterior update_residual(const GlobalSnapshot& g, const DataTerm& data,
                                  const ResidualPosterior& post, const Eigen::VectorXd& z,
                                  StepReport* report = nullptr);

/// Conjugate updates. `post` supplies the prior parameters.
NoisePrecisionPosterior update_noise_precision(const NoisePrecisionPosterior& post,
                                               const std::vector<ResidualPosterior>& residuals,
                                               const MixtureWeights& w);
LatentPrecisionPosterior update_latent_precision(int M,
                                                 const std::vector<LatentPosterior>& latents,
                                                 const MixtureWeights& w);

/// KL(q || p) for Gamma (shape/rate) and Wishart (scale/dof) distributions.
double kl_gamma(double alpha_q, double beta_q, double alpha_p, double beta_p);
double kl_wishart(const Eigen::MatrixXd& V_q, double n_q, const Eigen::MatrixXd& V_p, double n_p);

/// Contribution of one subject to the lower bound, given data derivatives at
/// its posterior mean. The expected data term is taken to second order:
/// E(v*) + 1/2 tr(H_z S_z) + 1/2 sum_i tr(H_i S_i).
double subject_bound(const GlobalSnapshot& g, const DataTermDerivs& at_mode,
                     const LatentPosterior& z, const ResidualPosterior& r);

/// Terms that involve only global quantities (W prior, expected log
/// normalisers of the z and r priors over N subjects, KL of q(lambda) and
/// q(A), template log-prior).
double global_bound(const ModelState& s, const SpectralKernel& kernel, const MixtureWeights& w,
                    double dirichlet_eps);

/// Full variational objective (to be maximised), up to an additive constant.
struct BoundInputs {
  const std::vector<const Field*>* images = nullptr;
  const SpectralKernel* kernel = nullptr;
  MixtureWeights weights;
  ResidualUncertainty uncertainty = ResidualUncertainty::diagonal;
  int steps = 8;
  double dirichlet_eps = 1e-3;
};
double lower_bound(const ModelState& s, const BoundInputs& in,
                   std::vector<double>* per_subject = nullptr);

}  // namespace gsh
