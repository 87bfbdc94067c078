#include "gsh/latent.hpp"

#include <cmath>
#include <numbers>

#include <boost/math/special_functions/digamma.hpp>

#include "gsh/error.hpp"
#include "gsh/parallel.hpp"

namespace gsh {

namespace {

constexpr int kMaxHalvings = 6;

Eigen::MatrixXd diag_block(const SpectralKernel& k) {
  const int d = k.ndim();
  return k.diagonal_block().topLeftCorner(d, d);
}

double log_mvgamma(double a, int M) {
  double s = 0.25 * M * (M - 1) * std::log(std::numbers::pi);
  for (int j = 1; j <= M; ++j) s += std::lgamma(a + (1.0 - j) / 2);
  return s;
}

double mv_digamma(double a, int M) {
  double s = 0;
  for (int j = 1; j <= M; ++j) s += boost::math::digamma(a + (1.0 - j) / 2);
  return s;
}

double logdet_spd(const Eigen::MatrixXd& S, const char* what) {
  const Eigen::LLT<Eigen::MatrixXd> llt(S);
  if (llt.info() != Eigen::Success) throw NumericalError(std::string(what) + ": not positive definite");
  return 2 * llt.matrixLLT().diagonal().array().log().sum();
}

}  // namespace

DataTerm categorical_term(const Field& f, const Field& a, const SpectralKernel& kernel,
                          int steps) {
  return [&f, &a, &kernel, steps](const Field& v, bool with_derivs) {
    const ShootingResult shot = shoot(v, kernel, steps);
    if (with_derivs) return data_derivs(f, a, shot);
    DataTermDerivs d;
    d.energy = data_energy(f, a, shot.inverse);
    return d;
  };
}

GlobalSnapshot GlobalSnapshot::make(const SpectralKernel& kernel, const Subspace& W,
                                    const Eigen::MatrixXd& A, double lambda,
                                    const MixtureWeights& w) {
  GlobalSnapshot g;
  g.kernel = &kernel;
  g.W = &W;
  const int M = W.size();
  g.LW.reserve(M);
  for (int m = 0; m < M; ++m) g.LW.push_back(kernel.apply(W.mode(m)));
  g.G.resize(M, M);
  for (int m = 0; m < M; ++m)
    for (int l = 0; l <= m; ++l) g.G(l, m) = g.G(m, l) = dot(W.mode(l), g.LW[m]);
  g.A = A;
  g.lambda = lambda;
  g.weights = w;
  return g;
}

double subject_objective(const GlobalSnapshot& g, const DataTerm& data, const Eigen::VectorXd& z,
                         const Field& r) {
  const Field v = g.W->combine(z) + r;
  const double e = data(v, false).energy;
  const double g1 = g.weights.gamma1, g2 = g.weights.gamma2;
  double f = e + 0.5 * g1 * z.dot(g.A * z);
  if (g1 != 0) f += 0.5 * g1 * g.lambda * dot(r, g.kernel->apply(r));
  if (g2 != 0) f += 0.5 * g2 * dot(v, g.kernel->apply(v));
  return f;
}

Eigen::VectorXd latent_gradient(const GlobalSnapshot& g, const DataTermDerivs& d,
                                const Eigen::VectorXd& z, const Field& r) {
  const int M = g.W->size();
  Eigen::VectorXd out = g.W->project(d.grad_v) + g.weights.gamma1 * (g.A * z) +
                        g.weights.gamma2 * (g.G * z);
  if (g.weights.gamma2 != 0) {
    for (int m = 0; m < M; ++m) out[m] += g.weights.gamma2 * dot(g.LW[m], r);
  }
  return out;
}

Field residual_gradient(const GlobalSnapshot& g, const DataTermDerivs& d,
                        const Eigen::VectorXd& z, const Field& r) {
  // grad_v + L (c r + gamma2 W z)
  Field x = g.residual_precision() * r;
  axpy(g.weights.gamma2, g.W->combine(z), x);
  Field out = g.kernel->apply(x);
  out += d.grad_v;
  return out;
}

Eigen::MatrixXd project_hessian(const Subspace& W, const Field& hess_v) {
  const int M = W.size();
  Eigen::MatrixXd H(M, M);
  for (int m = 0; m < M; ++m) {
    const Field hw = apply_blocks(hess_v, W.mode(m));
    for (int l = 0; l <= m; ++l) H(l, m) = H(m, l) = dot(W.mode(l), hw);
  }
  return H;
}

Eigen::MatrixXd latent_covariance(const GlobalSnapshot& g, const Field& hess_v) {
  const Eigen::MatrixXd H = project_hessian(*g.W, hess_v) + g.latent_precision();
  const Eigen::LLT<Eigen::MatrixXd> llt(H);
  if (llt.info() != Eigen::Success) {
    throw NumericalError("latent Hessian is not positive definite (degenerate subspace)");
  }
  Eigen::MatrixXd S = llt.solve(Eigen::MatrixXd::Identity(H.rows(), H.cols()));
  return 0.5 * (S + S.transpose());
}

Field residual_covariance(const GlobalSnapshot& g, const Field& hess_v) {
  if (g.uncertainty == ResidualUncertainty::none) return {};
  const int d = g.kernel->ndim();
  const Eigen::MatrixXd P = g.residual_precision() * diag_block(*g.kernel);
  Field cov(hess_v.lattice(), d * d);
  const auto n = static_cast<std::ptrdiff_t>(hess_v.voxels());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    Eigen::MatrixXd H = Eigen::Map<const Eigen::MatrixXd>(hess_v.voxel(i).data(), d, d) + P;
    Eigen::MatrixXd S = H.inverse();
    S = 0.5 * (S + S.transpose());
    Eigen::Map<Eigen::MatrixXd>(cov.voxel(i).data(), d, d) = S;
  }
  return cov;
}

double expected_residual_energy(const SpectralKernel& kernel, const Field& r, const Field& cov) {
  double e = dot(r, kernel.apply(r));
  if (!cov.empty()) {
    const int d = kernel.ndim();
    const Eigen::MatrixXd Ld = diag_block(kernel);
    for (std::size_t i = 0; i < cov.voxels(); ++i) {
      e += (Eigen::Map<const Eigen::MatrixXd>(cov.voxel(i).data(), d, d) * Ld).trace();
    }
  }
  return e;
}

LatentPosterior update_latent(const GlobalSnapshot& g, const DataTerm& data,
                              const LatentPosterior& post, const Field& r,
                              DataTermDerivs& current, StepReport* report) {
  StepReport rep;
  const Eigen::VectorXd grad = latent_gradient(g, current, post.z, r);
  const Eigen::MatrixXd H = project_hessian(*g.W, current.hess_v) + g.latent_precision();
  const Eigen::LLT<Eigen::MatrixXd> llt(H);
  if (llt.info() != Eigen::Success) {
    throw NumericalError("latent Gauss-Newton system is singular (degenerate subspace)");
  }
  const Eigen::VectorXd step = -llt.solve(grad);

  rep.before = subject_objective(g, data, post.z, r);
  rep.after = rep.before;
  LatentPosterior out = post;
  double t = 1;
  for (int h = 0; h <= kMaxHalvings; ++h, t *= 0.5) {
    const Eigen::VectorXd z = post.z + t * step;
    const double f = subject_objective(g, data, z, r);
    if (std::isfinite(f) && f < rep.before) {
      out.z = z;
      rep.after = f;
      rep.halvings = h;
      rep.accepted = true;
      break;
    }
  }
  if (rep.accepted) current = data(g.W->combine(out.z) + r, true);
  out.S = latent_covariance(g, current.hess_v);
  if (report) *report = rep;
  return out;
}

LatentPosterior update_latent(const GlobalSnapshot& g, const DataTerm& data,
                              const LatentPosterior& post, const Field& r, StepReport* report) {
  DataTermDerivs cur = data(g.W->combine(post.z) + r, true);
  return update_latent(g, data, post, r, cur, report);
}

ResidualPosterior update_residual(const GlobalSnapshot& g, const DataTerm& data,
                                  const ResidualPosterior& post, const Eigen::VectorXd& z,
                                  DataTermDerivs& current, StepReport* report) {
  StepReport rep;
  const double c = g.residual_precision();
  const SpectralKernel& K = *g.kernel;
  const Field grad = residual_gradient(g, current, z, post.r);
  const Field& hv = current.hess_v;
  const LinearOp op = [&](const Field& x) {
    Field y = K.apply(x);
    y *= c;
    y += apply_blocks(hv, x);
    return y;
  };
  const LinearOp pre = [&](const Field& x) {
    Field y = K.apply_inverse(x);
    y *= 1.0 / c;
    return y;
  };
  Field step(grad.lattice(), grad.channels());
  rep.solver = pcg(op, pre, -1.0 * grad, step, g.pcg_tol, g.pcg_max_iter);

  rep.before = subject_objective(g, data, z, post.r);
  rep.after = rep.before;
  ResidualPosterior out = post;
  double t = 1;
  for (int h = 0; h <= kMaxHalvings; ++h, t *= 0.5) {
    Field r = post.r;
    axpy(t, step, r);
    const double f = subject_objective(g, data, z, r);
    if (std::isfinite(f) && f < rep.before) {
      out.r = std::move(r);
      rep.after = f;
      rep.halvings = h;
      rep.accepted = true;
      break;
    }
  }
  if (rep.accepted) current = data(g.W->combine(z) + out.r, true);
  out.cov = residual_covariance(g, current.hess_v);
  out.expected_energy = expected_residual_energy(K, out.r, out.cov);
  if (report) *report = rep;
  return out;
}

ResidualPosterior update_residual(const GlobalSnapshot& g, const DataTerm& data,
                                  const ResidualPosterior& post, const Eigen::VectorXd& z,
                                  StepReport* report) {
  DataTermDerivs cur = data(g.W->combine(z) + post.r, true);
  return update_residual(g, data, post, z, cur, report);
}

NoisePrecisionPosterior update_noise_precision(const NoisePrecisionPosterior& post,
                                               const std::vector<ResidualPosterior>& residuals,
                                               const MixtureWeights& w) {
  NoisePrecisionPosterior out = post;
  double s = 0;
  for (const auto& r : residuals) s += r.expected_energy;
  const double n = static_cast<double>(residuals.size());
  out.alpha = post.prior_alpha() + w.gamma1 * n * post.dim / 2;
  out.beta = post.prior_beta() + w.gamma1 / 2 * s;
  return out;
}

LatentPrecisionPosterior update_latent_precision(int M,
                                                 const std::vector<LatentPosterior>& latents,
                                                 const MixtureWeights& w) {
  if (latents.empty()) return LatentPrecisionPosterior::prior(M);
  Eigen::MatrixXd acc = M * Eigen::MatrixXd::Identity(M, M);
  for (const auto& l : latents) {
    if (l.z.size() != M) throw DataError("update_latent_precision: latent size mismatch");
    acc += w.gamma1 * (l.z * l.z.transpose() + l.S);
  }
  LatentPrecisionPosterior out;
  out.dof = M + w.gamma1 * static_cast<double>(latents.size());
  const Eigen::LLT<Eigen::MatrixXd> llt(acc);
  out.V = llt.solve(Eigen::MatrixXd::Identity(M, M));
  out.V = 0.5 * (out.V + out.V.transpose());
  return out;
}

double kl_gamma(double aq, double bq, double ap, double bp) {
  return (aq - ap) * boost::math::digamma(aq) - std::lgamma(aq) + std::lgamma(ap) +
         ap * (std::log(bq) - std::log(bp)) + aq * (bp - bq) / bq;
}

double kl_wishart(const Eigen::MatrixXd& Vq, double nq, const Eigen::MatrixXd& Vp, double np) {
  const int M = static_cast<int>(Vq.rows());
  const Eigen::LLT<Eigen::MatrixXd> lp(Vp);
  const double tr = lp.solve(Vq).trace();
  return 0.5 * np * (logdet_spd(Vp, "kl_wishart") - logdet_spd(Vq, "kl_wishart")) +
         0.5 * nq * (tr - M) + log_mvgamma(np / 2, M) - log_mvgamma(nq / 2, M) +
         0.5 * (nq - np) * mv_digamma(nq / 2, M);
}

double subject_bound(const GlobalSnapshot& g, const DataTermDerivs& at_mode,
                     const LatentPosterior& zp, const ResidualPosterior& rp) {
  const SpectralKernel& K = *g.kernel;
  const int d = K.ndim();
  const int M = g.W->size();
  const double g1 = g.weights.gamma1, g2 = g.weights.gamma2;
  const double log2pie = std::log(2 * std::numbers::pi) + 1;

  // Expected data term, second order around the mode.
  double data = at_mode.energy + 0.5 * (project_hessian(*g.W, at_mode.hess_v) * zp.S).trace();
  double cov_trace_L = 0;  // sum_i tr(S_i L_ii)
  double entropy = 0.5 * logdet_spd(zp.S, "latent covariance") + 0.5 * M * log2pie;
  if (!rp.cov.empty()) {
    const Eigen::MatrixXd Ld = diag_block(K);
    double hs = 0, ld = 0;
    for (std::size_t i = 0; i < rp.cov.voxels(); ++i) {
      const Eigen::Map<const Eigen::MatrixXd> S(rp.cov.voxel(i).data(), d, d);
      const Eigen::Map<const Eigen::MatrixXd> H(at_mode.hess_v.voxel(i).data(), d, d);
      hs += (H * S).trace();
      cov_trace_L += (S * Ld).trace();
      ld += std::log(S.determinant());
    }
    data += 0.5 * hs;
    entropy += 0.5 * ld + 0.5 * d * static_cast<double>(rp.cov.voxels()) * log2pie;
  }

  const Field v = g.W->combine(zp.z) + rp.r;
  double prior = 0.5 * g1 * (zp.z.dot(g.A * zp.z) + (g.A * zp.S).trace());
  prior += 0.5 * g1 * g.lambda * rp.expected_energy;
  if (g2 != 0) {
    prior += 0.5 * g2 * (dot(v, K.apply(v)) + (g.G * zp.S).trace() + cov_trace_L);
  }
  return -data - prior + entropy;
}

double global_bound(const ModelState& s, const SpectralKernel& kernel, const MixtureWeights& w,
                    double dirichlet_eps) {
  const int M = s.W.size();
  const double N = static_cast<double>(s.latents.size());
  const NoisePrecisionPosterior& lp = s.lambda;
  const LatentPrecisionPosterior prior_A = LatentPrecisionPosterior::prior(M);
  double b = -0.5 * w.gamma1 * s.W.gram(kernel).trace();
  b += N * w.gamma1 * (0.5 * s.A.mean_logdet() + 0.5 * lp.dim * lp.mean_log());
  b -= kl_gamma(lp.alpha, lp.beta, lp.prior_alpha(), lp.prior_beta());
  b -= kl_wishart(s.A.V, s.A.dof, prior_A.V, prior_A.dof);
  b -= template_prior_energy(s.templ, dirichlet_eps);
  return b;
}

double lower_bound(const ModelState& s, const BoundInputs& in, std::vector<double>* per_subject) {
  const auto& images = *in.images;
  const std::size_t N = images.size();
  if (s.latents.size() != N || s.residuals.size() != N) {
    throw DataError("lower_bound: posterior count does not match the image count");
  }
  GlobalSnapshot g = GlobalSnapshot::make(*in.kernel, s.W, s.A.mean(), s.lambda.mean(), in.weights);
  g.uncertainty = in.uncertainty;
  std::vector<double> parts(N);
  parallel_for(N, [&](std::size_t i) {
    const DataTerm data = categorical_term(*images[i], s.templ, *in.kernel, in.steps);
    const DataTermDerivs at = data(s.W.combine(s.latents[i].z) + s.residuals[i].r, true);
    parts[i] = subject_bound(g, at, s.latents[i], s.residuals[i]);
  });
  double b = global_bound(s, *in.kernel, in.weights, in.dirichlet_eps);
  for (double p : parts) b += p;
  if (per_subject) *per_subject = std::move(parts);
  return b;
}

}  // namespace gsh
