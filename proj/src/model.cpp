#include "gsh/model.hpp"

#include <cmath>

#include <boost/math/special_functions/digamma.hpp>

#include "gsh/error.hpp"

namespace gsh {

void MixtureWeights::validate() const {
  if (!(gamma1 >= 0) || !(gamma2 >= 0) || !(gamma1 + gamma2 > 0)) {
    throw ConfigError("mixture weights must be nonnegative with a positive sum");
  }
}

Subspace::Subspace(const Lattice& lattice, int modes) {
  if (modes < 1) throw ConfigError("subspace needs at least one mode");
  modes_.assign(modes, Field(lattice, lattice.ndim));
}

Subspace::Subspace(std::vector<Field> modes) : modes_(std::move(modes)) {
  if (modes_.empty()) throw ConfigError("subspace needs at least one mode");
  for (const Field& w : modes_) require_same_shape(w, modes_.front(), "Subspace");
}

Field Subspace::combine(const Eigen::VectorXd& z) const {
  if (z.size() != size()) throw DataError("Subspace::combine: latent size mismatch");
  Field out(modes_.front().lattice(), modes_.front().channels());
  for (int m = 0; m < size(); ++m) axpy(z[m], modes_[m], out);
  return out;
}

Eigen::VectorXd Subspace::project(const Field& x) const {
  Eigen::VectorXd out(size());
  for (int m = 0; m < size(); ++m) out[m] = dot(modes_[m], x);
  return out;
}

Eigen::MatrixXd Subspace::gram(const SpectralKernel& kernel) const {
  const int M = size();
  Eigen::MatrixXd G(M, M);
  for (int m = 0; m < M; ++m) {
    const Field lw = kernel.apply(modes_[m]);
    for (int l = 0; l <= m; ++l) G(l, m) = G(m, l) = dot(modes_[l], lw);
  }
  return G;
}

Subspace Subspace::transformed(const Eigen::MatrixXd& R) const {
  if (R.rows() != size()) throw DataError("Subspace::transformed: size mismatch");
  std::vector<Field> out;
  out.reserve(R.cols());
  for (int c = 0; c < R.cols(); ++c) out.push_back(combine(R.col(c)));
  return Subspace(std::move(out));
}

LatentPosterior LatentPosterior::prior_mean(int M) {
  return {Eigen::VectorXd::Zero(M), Eigen::MatrixXd::Identity(M, M)};
}

ResidualPosterior ResidualPosterior::zero(const Lattice& lattice) {
  ResidualPosterior p;
  p.r = Field(lattice, lattice.ndim);
  return p;
}

double NoisePrecisionPosterior::mean_log() const {
  return boost::math::digamma(alpha) - std::log(beta);
}

NoisePrecisionPosterior NoisePrecisionPosterior::prior(double nu0, double lambda0, double dim) {
  if (!(nu0 > 0) || !(lambda0 > 0) || !(dim > 0)) {
    throw ConfigError("noise precision prior needs nu0 > 0 and lambda0 > 0");
  }
  NoisePrecisionPosterior p;
  p.nu0 = nu0;
  p.lambda0 = lambda0;
  p.dim = dim;
  p.alpha = p.prior_alpha();
  p.beta = p.prior_beta();
  return p;
}

double LatentPrecisionPosterior::mean_logdet() const {
  const int M = static_cast<int>(V.rows());
  double s = M * std::log(2.0);
  for (int j = 1; j <= M; ++j) s += boost::math::digamma((dof + 1 - j) / 2);
  const Eigen::LLT<Eigen::MatrixXd> llt(V);
  if (llt.info() != Eigen::Success) throw NumericalError("Wishart scale is not positive definite");
  s += 2 * llt.matrixLLT().diagonal().array().log().sum();
  return s;
}

LatentPrecisionPosterior LatentPrecisionPosterior::prior(int M) {
  return {Eigen::MatrixXd::Identity(M, M) / M, static_cast<double>(M)};
}

}  // namespace gsh
