#pragma once

#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "gsh/config.hpp"
#include "gsh/latent.hpp"
#include "gsh/subspace.hpp"

namespace gsh {

// ---- datasets -------------------------------------------------------------

struct Subject {
  std::string id;
  std::string split;  // "train" or "test"
  Field image;
};

/// A directory holding `manifest.json` ({"subjects": [{"id", "path", "split"}]})
/// and one GSHFLD01 categorical image per subject. Missing voxels are
/// all-zero responsibilities.
struct Dataset {
  std::vector<Subject> subjects;
  std::vector<const Subject*> split(const std::string& name) const;
};

Dataset load_dataset(const std::filesystem::path& dir);
void save_dataset(const std::filesystem::path& dir, const Dataset& data,
                  StorageType dtype = StorageType::f64);

// ---- checkpoints ----------------------------------------------------------

struct Checkpoint {
  PipelineConfig config;
  ModelState state;
  std::vector<std::string> ids;
  int iteration = 0;
  std::vector<double> bound_trace;
};

/// model.json (config snapshot, scalars, small matrices, trace) plus one
/// GSHFLD01 file per field. Doubles are written in shortest round-trip form,
/// so save/load is exact for 64-bit storage.
void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& dir);

// ---- synthetic populations ------------------------------------------------

struct SyntheticTruth {
  Field templ;      // log-template
  Subspace W;       // L-orthonormal true modes
  Eigen::MatrixXd A;
  double lambda = 1;
  std::vector<Eigen::VectorXd> z;
  std::vector<Field> r;
};

/// Blob template and analytic modes w_m = K (c_m(theta) grad p), where p is
/// the blob probability and c_m an angular harmonic of order m + 2. Modes are
/// L-orthonormalised; A is chosen so that each mode's largest displacement
/// has standard deviation synth.mode_sd[m] voxels.
SyntheticTruth synthetic_truth(const PipelineConfig& cfg);

/// Draws train + test subjects: z ~ N(0, A^-1), r ~ N(0, (lambda L)^-1),
/// v = W z + r, then one class per voxel from the warped template.
Dataset synthesise(const PipelineConfig& cfg, SyntheticTruth& truth, std::uint64_t seed);
void save_truth(const std::filesystem::path& dir, const SyntheticTruth& truth,
                const Dataset& data);

Eigen::VectorXd sample_latent(const Eigen::MatrixXd& A, std::mt19937_64& rng);
Field sample_residual(const SpectralKernel& kernel, double lambda, std::mt19937_64& rng);
Field sample_categorical(const Field& prob, std::mt19937_64& rng);

// ---- training -------------------------------------------------------------

struct IterationReport {
  int iteration = 0;
  double bound_before = 0;
  double bound_after = 0;
  std::vector<std::string> rejected;  // phases undone because the bound dropped
  int reinitialised_modes = 0;
};

/// Outer variational loop. Every phase is followed by a bound evaluation and
/// undone when the bound went down, which makes the trace non-decreasing.
class Trainer {
 public:
  /// Fresh model from the training images.
  Trainer(PipelineConfig cfg, std::vector<std::string> ids, std::vector<Field> images);
  /// Resume from a checkpoint; the images must be those it was trained on.
  Trainer(Checkpoint ckpt, std::vector<Field> images);
  Trainer(const Trainer&) = delete;  // holds pointers into its own images
  Trainer& operator=(const Trainer&) = delete;

  IterationReport iterate();
  /// Iterates until max_iter or a relative bound change below bound_tol.
  void run(const std::function<void(const IterationReport&)>& progress = {});
  bool converged() const { return converged_; }

  const Checkpoint& checkpoint() const { return ckpt_; }
  const SpectralKernel& kernel() const { return kernel_; }
  double bound() const;
  std::vector<double> subject_bounds() const;

 private:
  void check_images();
  void initialise();
  void refresh_covariances();
  bool subject_phase();
  void orthogonalise_and_rescale(std::mt19937_64& rng, IterationReport& rep);

  Checkpoint ckpt_;
  std::vector<Field> images_;
  std::vector<const Field*> image_ptrs_;
  SpectralKernel kernel_;
  bool converged_ = false;
};

// ---- registration and export ----------------------------------------------

struct Registration {
  LatentPosterior z;
  ResidualPosterior r;
  double loglik = 0;     // sum_i sum_k f_ik log mu_ik at the mode
  double objective = 0;  // negative log joint at the mode
  int sweeps = 0;
};

/// Per-subject inference with W, a, lambda and A frozen. Starts at z = 0,
/// r = 0 unless an initial posterior is given.
Registration register_subject(const Checkpoint& ckpt, const SpectralKernel& kernel,
                              const Field& image, const LatentPosterior* z0 = nullptr,
                              const ResidualPosterior* r0 = nullptr);

/// Categorical log-likelihood of a training subject at its stored posterior.
double training_loglik(const Checkpoint& ckpt, const SpectralKernel& kernel, const Field& image,
                       std::size_t subject);

void export_template(const Checkpoint& ckpt, const std::filesystem::path& dir);
/// Template shot along +-s sigma of each listed mode (sigma from E[A]^-1).
void export_modes(const Checkpoint& ckpt, const SpectralKernel& kernel,
                  const std::filesystem::path& dir, const std::vector<int>& modes,
                  const std::vector<double>& sigmas);
/// Template pushed through a single velocity, as class probabilities.
Field shot_template(const Checkpoint& ckpt, const SpectralKernel& kernel, const Field& v);
void export_latents(const Checkpoint& ckpt, const std::filesystem::path& path);
/// subject_id, split, loglik for every subject of the dataset (registered
/// from scratch, so train and test rows are computed the same way).
void export_fits(const Checkpoint& ckpt, const SpectralKernel& kernel, const Dataset& data,
                 const std::filesystem::path& path);

/// Principal angles (degrees, ascending) between span(A) and span(B), in
/// the L inner product or the plain Euclidean one over all voxels.
std::vector<double> principal_angles(const std::vector<Field>& A, const std::vector<Field>& B,
                                     const SpectralKernel& kernel);
std::vector<double> principal_angles(const std::vector<Field>& A, const std::vector<Field>& B);

}  // namespace gsh
