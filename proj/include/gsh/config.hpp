#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "gsh/field_io.hpp"
#include "gsh/lattice.hpp"
#include "gsh/metric.hpp"
#include "gsh/model.hpp"

namespace gsh {

/// Ground truth for the synthetic population generator.
struct SyntheticSpec {
  std::vector<int> dims{32, 32};
  int modes = 2;                      // M_true
  double lambda = 1000;               // true residual precision
  std::vector<double> mode_sd{3.0, 2.0};  // displacement sd (voxels) along each true mode
  double blob_radius = 9;             // voxels
  double blob_sharpness = 1.5;        // logit slope per voxel at the boundary
  int steps = 64;                     // shooting steps used to warp the truth
  int train = 20;
  int test = 20;
};

/// Everything a run needs. Keys in the file are the field names below
/// (nested ones as `metric.bending`, `synth.lambda`, ...).
struct PipelineConfig {
  std::vector<int> dims;  // empty: take the lattice from the data
  int K = 2;
  int M = 32;
  MetricParams metric;
  MixtureWeights weights;
  double lambda0 = 17;
  double nu0 = 10;
  double dirichlet_eps = 1e-3;
  int steps = 8;
  int max_iter = 32;
  double bound_tol = 1e-6;
  int subject_sweeps = 2;
  int register_sweeps = 30;
  double register_tol = 1e-10;
  double pcg_tol = 1e-6;
  int pcg_max_iter = 64;
  std::uint64_t seed = 0;
  ResidualUncertainty uncertainty = ResidualUncertainty::diagonal;
  StorageType storage = StorageType::f64;
  SyntheticSpec synth;

  void validate() const;
};

/// Flat `key = value` text. `#` starts a comment; lists are space separated.
/// Unknown or repeated keys, and unparsable values, raise ConfigError.
PipelineConfig parse_config(const std::string& text);
PipelineConfig load_config(const std::filesystem::path& path);
/// Every key, with values printed so that parsing gives back identical bits.
std::string format_config(const PipelineConfig& cfg);

std::map<std::string, std::string> config_entries(const PipelineConfig& cfg);

}  // namespace gsh
