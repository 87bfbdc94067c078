#pragma once

#include <vector>

#include "gsh/latent.hpp"

namespace gsh {

/// Per-subject inputs to the subspace update: data derivatives evaluated at
/// the posterior mean v_n = W z_n + r_n, and the posteriors themselves.
struct SubspaceSubject {
  const DataTerm* data;
  const LatentPosterior* latent;
  const ResidualPosterior* residual;
};

/// Objective in W (to be minimised), with q(z), q(r) held fixed:
///   sum_n [ E_n(W z_n + r_n) + gamma2/2 ((W z_n + r_n)^T L (W z_n + r_n)
///                                       + tr(W^T L W S_n)) ]
///   + gamma1/2 tr(W^T L W)
double subspace_objective(const Subspace& W, const std::vector<SubspaceSubject>& subjects,
                          const SpectralKernel& kernel, const MixtureWeights& w);

/// Gradient of subspace_objective with respect to every mode, given the data
/// derivatives of each subject at its current velocity.
std::vector<Field> subspace_gradient(const Subspace& W, const std::vector<SubspaceSubject>& subjects,
                                     const std::vector<DataTermDerivs>& derivs,
                                     const SpectralKernel& kernel, const MixtureWeights& w);

struct SubspaceUpdateReport {
  double before = 0;
  double after = 0;
  int halvings = 0;
  bool accepted = false;
  std::vector<SolverReport> solver;  // one per mode
};

/// One Gauss-Newton step per mode, solving
///   (sum_n E[z_nm^2] H_n + (gamma1 + gamma2 sum_n E[z_nm^2]) L) dw_m = -g_m
/// by PCG (preconditioner K / c), modes in parallel. The cross-mode terms
/// vanish once E[ZZ^T] is diagonal. A single backtracking line search on the
/// joint step follows (at most 6 halvings).
Subspace update_subspace(const Subspace& W, const std::vector<SubspaceSubject>& subjects,
                         const SpectralKernel& kernel, const MixtureWeights& w, double pcg_tol,
                         int pcg_max_iter, SubspaceUpdateReport* report = nullptr);

/// Re-fits W with every velocity v_n = W z_n + r_n held fixed, moving the
/// difference into the residuals (r_n <- v_n - W' z_n). The data energies do
/// not change, so W' minimises the remaining W-dependent part of the bound:
///   sum_n [ g1 lambda/2 |v_n - W z_n|_L^2 + g2/2 tr(W^T L W S_n)
///           + 1/2 tr(W^T H_n W S_n) ] + g1/2 tr(W^T L W)
/// solved by PCG over all modes at once (H_n are the voxelwise Gauss-Newton
/// blocks at v_n; pass none to drop that term). Single-mode Gauss-Newton
/// steps in W barely move once the residuals explain the data, since any
/// change of W z_n is then fought by the data term; this step is what lets
/// W take over. Residual expected energies are refreshed.
Subspace exchange_subspace(const Subspace& W, const std::vector<LatentPosterior>& latents,
                           std::vector<ResidualPosterior>& residuals,
                           const std::vector<Field>& hessians, const SpectralKernel& kernel,
                           double lambda, const MixtureWeights& w, double pcg_tol,
                           int pcg_max_iter, SolverReport* report = nullptr);

/// sum_n (z_n z_n^T + S_n)
Eigen::MatrixXd latent_second_moment(const std::vector<LatentPosterior>& latents);

struct OrthoResult {
  Eigen::MatrixXd T;       // z <- T z, W <- W T^-1
  Eigen::MatrixXd T_inv;
  double condition = 1;    // of T
};

/// Makes T E[ZZ^T] T^T diagonal (decreasing) and T^-T W^T L W T^-1 = I, and
/// applies the transform to W and every latent posterior. Throws
/// RankDeficiencyError (with the most collapsed mode) when W^T L W is
/// numerically singular.
OrthoResult orthogonalise(Subspace& W, std::vector<LatentPosterior>& latents,
                          const SpectralKernel& kernel);
/// The transform alone, from the two Gram matrices.
OrthoResult orthogonal_transform(const Eigen::MatrixXd& WtLW, const Eigen::MatrixXd& ZZt);

/// Stationary q minimising 1/2 (q^2 d a + g / q^2) - c ln q.
/// With c = 0 this is q^4 = g / (d a).
double optimal_scale(double d, double a, double g, double c);

struct RescaleResult {
  Eigen::VectorXd q;
  LatentPrecisionPosterior A;
  int iterations = 0;
  std::vector<double> objective;  // E_Q after every q update
};

/// Alternates the A update (from the scaled moments diag(q) D diag(q)) with
/// the optimal diagonal scaling, until max |dq| < tol or max_iter. D and g are
/// the diagonals of T E[ZZ^T] T^T and T^-T W^T L W T^-1. `entropy_weight`
/// adds -c sum ln q (the Gaussian entropy of the scaled latents; N for a
/// population of N subjects); 0 gives the plain trace objective.
/// Scales are floored at 1e-8.
RescaleResult rescale(const Eigen::VectorXd& D, const Eigen::VectorXd& g, int subjects,
                      const MixtureWeights& w, double entropy_weight = 0.0, double tol = 1e-6,
                      int max_iter = 32);

/// W <- W Q^-1, z <- Q z, S <- Q S Q.
void apply_scaling(Subspace& W, std::vector<LatentPosterior>& latents, const Eigen::VectorXd& q);

}  // namespace gsh
