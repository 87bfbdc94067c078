#pragma once

#include <string>
#include <vector>

#include "gsh/shooting.hpp"

namespace gsh {

/// Log-template values are clamped to this range before any softmax.
inline constexpr double kLogClamp = 30.0;

/// Voxelwise softmax of a K-channel log-field (values clamped first).
Field softmax(const Field& a);

/// mu = softmax(a o phi^-1): interpolate the log-template, then normalise.
Field warp_template(const Field& a, const Deformation& phi_inv);

/// -sum_i sum_k f_k ln mu_k. Classes with f_k = 0 never contribute.
double data_energy(const Field& f, const Field& mu);

/// Voxelwise derivatives of the categorical term with respect to the
/// warped log-template: g_k = mu_k S - f_k, H_km = S mu_k (delta_km - mu_m),
/// S = sum_l f_l. `hess` stores the full K x K block (K*K channels).
struct CategoricalDerivs {
  Field grad;
  Field hess;
};
CategoricalDerivs categorical_derivs(const Field& f, const Field& mu);

/// Data term and its Gauss-Newton derivatives with respect to the initial
/// velocity. grad_v is d channels; hess_v stores a symmetric d x d block per
/// voxel (d*d channels, row-major).
struct DataTermDerivs {
  double energy = 0;
  Field grad_v;
  Field hess_v;
};

/// The derivatives treat the warp as phi^-1 ~ (id - dv) o phi^-1, i.e. the
/// sensitivity is taken at the current transform; they are exact for v = 0.
DataTermDerivs data_derivs(const Field& f, const Field& a, const ShootingResult& shot);
/// Energy only (one warp, no pushes).
double data_energy(const Field& f, const Field& a, const Deformation& phi_inv);

/// One subject's contribution to the template update.
struct TemplateSubject {
  const Field* image;
  const Deformation* inverse;
};

/// -eps sum_i sum_k ln softmax(a)_k: a symmetric log-Dirichlet prior with
/// eps pseudo-counts per class. Returned as an energy (to be minimised).
double template_prior_energy(const Field& a, double eps);

/// sum_n C(f_n, Phi_n a) + prior energy.
double template_objective(const Field& a, const std::vector<TemplateSubject>& subjects,
                          double eps);

struct TemplateUpdateReport {
  double before = 0;
  double after = 0;
  int halvings = 0;
  bool accepted = false;
};

/// One Gauss-Newton step on the MAP objective with backtracking (at most 6
/// halvings). Pushed gradients and voxelwise K x K Hessians are summed over
/// subjects in list order. Returns `a` unchanged if no step decreases the
/// objective.
Field update_template(const Field& a, const std::vector<TemplateSubject>& subjects,
                      double eps, TemplateUpdateReport* report = nullptr);

/// Initial log-template: softmax-inverse of the voxelwise mean image, with an
/// eps floor on the probabilities. Channels are centred to sum to zero.
Field initial_template(const std::vector<const Field*>& images, double eps);

/// 8-bit binary PGM of one channel of a probability field (0..1 -> 0..255).
/// Only the first z-slice of a 3D field is written.
void write_pgm(const std::string& path, const Field& prob, int channel);

}  // namespace gsh
