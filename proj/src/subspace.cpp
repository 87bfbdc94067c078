#include "gsh/subspace.hpp"

#include <algorithm>
#include <cmath>

#include "gsh/error.hpp"
#include "gsh/parallel.hpp"

namespace gsh {

namespace {

constexpr int kMaxHalvings = 6;

// Deterministic sign: largest-magnitude entry of every column positive.
void fix_signs(Eigen::MatrixXd& E) {
  for (int c = 0; c < E.cols(); ++c) {
    Eigen::Index r;
    E.col(c).cwiseAbs().maxCoeff(&r);
    if (E(r, c) < 0) E.col(c) *= -1;
  }
}

}  // namespace

double subspace_objective(const Subspace& W, const std::vector<SubspaceSubject>& subjects,
                          const SpectralKernel& kernel, const MixtureWeights& w) {
  const Eigen::MatrixXd G = W.gram(kernel);
  std::vector<double> parts(subjects.size());
  parallel_for(subjects.size(), [&](std::size_t n) {
    const auto& s = subjects[n];
    const Field v = W.combine(s.latent->z) + s.residual->r;
    double e = (*s.data)(v, false).energy;
    if (w.gamma2 != 0) e += 0.5 * w.gamma2 * (dot(v, kernel.apply(v)) + (G * s.latent->S).trace());
    parts[n] = e;
  });
  double f = 0.5 * w.gamma1 * G.trace();
  for (double p : parts) f += p;
  return f;
}

std::vector<Field> subspace_gradient(const Subspace& W, const std::vector<SubspaceSubject>& subjects,
                                     const std::vector<DataTermDerivs>& derivs,
                                     const SpectralKernel& kernel, const MixtureWeights& w) {
  const int M = W.size();
  const Lattice& lat = W.lattice();
  // Accumulate in velocity space, apply L once per mode.
  std::vector<Field> data(M, Field(lat, lat.ndim));
  std::vector<Field> smooth(M, Field(lat, lat.ndim));
  for (int m = 0; m < M; ++m) axpy(w.gamma1, W.mode(m), smooth[m]);
  for (std::size_t n = 0; n < subjects.size(); ++n) {
    const auto& s = subjects[n];
    const Eigen::VectorXd& z = s.latent->z;
    const Field v = W.combine(z) + s.residual->r;
    for (int m = 0; m < M; ++m) {
      axpy(z[m], derivs[n].grad_v, data[m]);
      if (w.gamma2 != 0) {
        // E[z_m (W z + r)] = z_m v + W S e_m
        axpy(w.gamma2 * z[m], v, smooth[m]);
        axpy(w.gamma2, W.combine(s.latent->S.col(m)), smooth[m]);
      }
    }
  }
  std::vector<Field> out(M);
  for (int m = 0; m < M; ++m) {
    out[m] = kernel.apply(smooth[m]);
    out[m] += data[m];
  }
  return out;
}

Subspace update_subspace(const Subspace& W, const std::vector<SubspaceSubject>& subjects,
                         const SpectralKernel& kernel, const MixtureWeights& w, double pcg_tol,
                         int pcg_max_iter, SubspaceUpdateReport* report) {
  const int M = W.size();
  const Lattice& lat = W.lattice();
  const std::size_t N = subjects.size();

  std::vector<DataTermDerivs> derivs(N);
  parallel_for(N, [&](std::size_t n) {
    const auto& s = subjects[n];
    derivs[n] = (*s.data)(W.combine(s.latent->z) + s.residual->r, true);
  });
  const std::vector<Field> grad = subspace_gradient(W, subjects, derivs, kernel, w);

  SubspaceUpdateReport rep;
  rep.solver.resize(M);
  std::vector<Field> step(M, Field(lat, lat.ndim));
  parallel_for(static_cast<std::size_t>(M), [&](std::size_t m) {
    Field H(lat, lat.ndim * lat.ndim);
    double zz = 0;
    for (std::size_t n = 0; n < N; ++n) {
      const auto& l = *subjects[n].latent;
      const double e = l.z[m] * l.z[m] + l.S(m, m);
      zz += e;
      axpy(e, derivs[n].hess_v, H);
    }
    const double c = w.gamma1 + w.gamma2 * zz;
    if (!(c > 0)) throw NumericalError("update_subspace: mode has no prior curvature");
    const LinearOp op = [&](const Field& x) {
      Field y = kernel.apply(x);
      y *= c;
      y += apply_blocks(H, x);
      return y;
    };
    const LinearOp pre = [&](const Field& x) {
      Field y = kernel.apply_inverse(x);
      y *= 1.0 / c;
      return y;
    };
    rep.solver[m] = pcg(op, pre, -1.0 * grad[m], step[m], pcg_tol, pcg_max_iter);
  });

  rep.before = subspace_objective(W, subjects, kernel, w);
  rep.after = rep.before;
  Subspace out = W;
  double t = 1;
  for (int h = 0; h <= kMaxHalvings; ++h, t *= 0.5) {
    Subspace trial = W;
    for (int m = 0; m < M; ++m) axpy(t, step[m], trial.mode(m));
    const double f = subspace_objective(trial, subjects, kernel, w);
    if (std::isfinite(f) && f < rep.before) {
      out = std::move(trial);
      rep.after = f;
      rep.halvings = h;
      rep.accepted = true;
      break;
    }
  }
  if (report) *report = std::move(rep);
  return out;
}

namespace {

// Modes stacked as channels m*d .. m*d+d-1 of one field, so that PCG can
// treat the coupled system as a single vector.
Field stack(const std::vector<Field>& modes) {
  const Lattice& lat = modes.front().lattice();
  const int d = lat.ndim;
  const int M = static_cast<int>(modes.size());
  Field out(lat, M * d);
  for (std::size_t i = 0; i < out.voxels(); ++i) {
    for (int m = 0; m < M; ++m) {
      for (int c = 0; c < d; ++c) out(i, m * d + c) = modes[m](i, c);
    }
  }
  return out;
}

std::vector<Field> unstack(const Field& x, int M) {
  const int d = x.lattice().ndim;
  std::vector<Field> out(M, Field(x.lattice(), d));
  for (std::size_t i = 0; i < x.voxels(); ++i) {
    for (int m = 0; m < M; ++m) {
      for (int c = 0; c < d; ++c) out[m](i, c) = x(i, m * d + c);
    }
  }
  return out;
}

// Y_m = sum_l X_l C(l, m)
std::vector<Field> mix(const std::vector<Field>& X, const Eigen::MatrixXd& C) {
  std::vector<Field> Y(C.cols(), Field(X.front().lattice(), X.front().channels()));
  for (Eigen::Index m = 0; m < C.cols(); ++m) {
    for (Eigen::Index l = 0; l < C.rows(); ++l) axpy(C(l, m), X[l], Y[m]);
  }
  return Y;
}

}  // namespace

Subspace exchange_subspace(const Subspace& W, const std::vector<LatentPosterior>& latents,
                           std::vector<ResidualPosterior>& residuals,
                           const std::vector<Field>& hessians, const SpectralKernel& kernel,
                           double lambda, const MixtureWeights& w, double pcg_tol,
                           int pcg_max_iter, SolverReport* report) {
  const int M = W.size();
  const std::size_t N = latents.size();
  if (residuals.size() != N || (!hessians.empty() && hessians.size() != N)) {
    throw DataError("exchange_subspace: posterior counts differ");
  }
  if (!(w.gamma1 > 0) || !(lambda > 0)) throw NumericalError("exchange_subspace: needs gamma1 lambda > 0");

  // P = g1 lambda sum z z^T + g1 I + g2 sum S: the L-weighted coupling of the modes.
  Eigen::MatrixXd P = w.gamma1 * Eigen::MatrixXd::Identity(M, M);
  for (const auto& l : latents) P += w.gamma1 * lambda * l.z * l.z.transpose() + w.gamma2 * l.S;
  const Eigen::LLT<Eigen::MatrixXd> llt(P);
  if (llt.info() != Eigen::Success) throw NumericalError("exchange_subspace: singular moment matrix");
  const Eigen::MatrixXd P_inv = llt.solve(Eigen::MatrixXd::Identity(M, M));

  std::vector<Field> v(N);
  parallel_for(N, [&](std::size_t n) { v[n] = W.combine(latents[n].z) + residuals[n].r; });
  Eigen::MatrixXd Z(static_cast<Eigen::Index>(N), M);  // subjects x modes
  for (std::size_t n = 0; n < N; ++n) Z.row(static_cast<Eigen::Index>(n)) = latents[n].z.transpose();
  // Right-hand side in velocity form, R_m = g1 lambda sum_n z_nm v_n.
  const std::vector<Field> R = mix(v, w.gamma1 * lambda * Z);

  // Without the data blocks the system is L X P = L R, i.e. X = R P^-1.
  Field x = stack(mix(R, P_inv));
  SolverReport rep;
  rep.converged = true;
  if (!hessians.empty()) {
    const LinearOp op = [&](const Field& xs) {
      const std::vector<Field> X = unstack(xs, M);
      std::vector<Field> Y = mix(X, P);
      parallel_for(static_cast<std::size_t>(M), [&](std::size_t m) { Y[m] = kernel.apply(Y[m]); });
      std::vector<std::vector<Field>> parts(N);
      parallel_for(N, [&](std::size_t n) {
        parts[n] = mix(X, latents[n].S);
        for (auto& f : parts[n]) f = apply_blocks(hessians[n], f);
      });
      for (std::size_t n = 0; n < N; ++n) {
        for (int m = 0; m < M; ++m) Y[m] += parts[n][m];
      }
      return stack(Y);
    };
    const LinearOp pre = [&](const Field& xs) {
      std::vector<Field> X = unstack(xs, M);
      parallel_for(static_cast<std::size_t>(M), [&](std::size_t m) { X[m] = kernel.apply_inverse(X[m]); });
      return stack(mix(X, P_inv));
    };
    std::vector<Field> LR(M);
    parallel_for(static_cast<std::size_t>(M), [&](std::size_t m) { LR[m] = kernel.apply(R[m]); });
    rep = pcg(op, pre, stack(LR), x, pcg_tol, pcg_max_iter);
  }
  if (report) *report = rep;
  Subspace out(unstack(x, M));

  parallel_for(N, [&](std::size_t n) {
    ResidualPosterior& r = residuals[n];
    const double trace = r.expected_energy - dot(r.r, kernel.apply(r.r));
    r.r = v[n] - out.combine(latents[n].z);
    r.expected_energy = dot(r.r, kernel.apply(r.r)) + trace;
  });
  return out;
}

Eigen::MatrixXd latent_second_moment(const std::vector<LatentPosterior>& latents) {
  if (latents.empty()) throw DataError("latent_second_moment: no latents");
  const auto M = latents.front().z.size();
  Eigen::MatrixXd Z = Eigen::MatrixXd::Zero(M, M);
  for (const auto& l : latents) Z += l.z * l.z.transpose() + l.S;
  return Z;
}

OrthoResult orthogonal_transform(const Eigen::MatrixXd& WtLW, const Eigen::MatrixXd& ZZt) {
  const Eigen::Index M = WtLW.rows();
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> el(WtLW);
  const Eigen::VectorXd lam = el.eigenvalues();
  Eigen::MatrixXd El = el.eigenvectors();
  if (!(lam.minCoeff() > 1e-12 * std::max(lam.maxCoeff(), 1e-300))) {
    // The collapsed direction; blame the mode carrying most of it.
    Eigen::Index mode;
    El.col(0).cwiseAbs().maxCoeff(&mode);
    throw RankDeficiencyError("orthogonalise: W^T L W is rank deficient", static_cast<int>(mode));
  }
  fix_signs(El);
  const Eigen::VectorXd sq = lam.cwiseSqrt();
  const Eigen::MatrixXd B = El * sq.asDiagonal();  // E_l Lambda^1/2
  Eigen::MatrixXd Mt = B.transpose() * ZZt * B;
  Mt = 0.5 * (Mt + Mt.transpose());
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ez(Mt);
  // Descending order.
  Eigen::MatrixXd Ez(M, M);
  for (Eigen::Index c = 0; c < M; ++c) Ez.col(c) = ez.eigenvectors().col(M - 1 - c);
  fix_signs(Ez);

  OrthoResult r;
  r.T = Ez.transpose() * B.transpose();
  r.T_inv = El * sq.cwiseInverse().asDiagonal() * Ez;
  r.condition = std::sqrt(lam.maxCoeff() / lam.minCoeff());
  return r;
}

OrthoResult orthogonalise(Subspace& W, std::vector<LatentPosterior>& latents,
                          const SpectralKernel& kernel) {
  const OrthoResult r = orthogonal_transform(W.gram(kernel), latent_second_moment(latents));
  W = W.transformed(r.T_inv);
  for (auto& l : latents) {
    l.z = r.T * l.z;
    l.S = r.T * l.S * r.T.transpose();
    l.S = 0.5 * (l.S + l.S.transpose());
  }
  return r;
}

double optimal_scale(double d, double a, double g, double c) {
  // y = q^2 solves d a y^2 - c y - g = 0.
  const double da = d * a;
  double y;
  if (!(da > 0)) {
    y = c > 0 ? 1e16 : 1.0;
  } else {
    y = (c + std::sqrt(c * c + 4 * da * g)) / (2 * da);
  }
  return std::max(std::sqrt(y), 1e-8);
}

RescaleResult rescale(const Eigen::VectorXd& D, const Eigen::VectorXd& g, int subjects,
                      const MixtureWeights& w, double entropy_weight, double tol, int max_iter) {
  const auto M = D.size();
  const double N = subjects;
  const double g1 = w.gamma1;
  const double c = g1 > 0 ? entropy_weight / g1 : 0.0;
  const LatentPrecisionPosterior prior = LatentPrecisionPosterior::prior(static_cast<int>(M));

  auto update_A = [&](const Eigen::VectorXd& q) {
    LatentPrecisionPosterior A;
    A.dof = M + g1 * N;
    Eigen::MatrixXd acc = M * Eigen::MatrixXd::Identity(M, M);
    acc.diagonal() += g1 * q.cwiseProduct(q).cwiseProduct(D);
    A.V = acc.inverse();
    return A;
  };
  // Negative of the q-dependent part of the bound.
  auto objective = [&](const Eigen::VectorXd& q, const LatentPrecisionPosterior& A) {
    const Eigen::MatrixXd Abar = A.mean();
    double e = 0;
    for (Eigen::Index m = 0; m < M; ++m) {
      e += 0.5 * g1 * (q[m] * q[m] * D[m] * Abar(m, m) + g[m] / (q[m] * q[m]));
      e -= entropy_weight * std::log(q[m]);
    }
    e -= 0.5 * g1 * N * A.mean_logdet();
    e += kl_wishart(A.V, A.dof, prior.V, prior.dof);
    return e;
  };

  RescaleResult r;
  r.q = Eigen::VectorXd::Ones(M);
  r.A = update_A(r.q);
  for (r.iterations = 0; r.iterations < max_iter;) {
    const Eigen::MatrixXd Abar = r.A.mean();
    Eigen::VectorXd q(M);
    for (Eigen::Index m = 0; m < M; ++m) q[m] = optimal_scale(D[m], Abar(m, m), g[m], c);
    const double change = (q - r.q).cwiseAbs().maxCoeff();
    r.q = q;
    r.A = update_A(r.q);
    ++r.iterations;
    r.objective.push_back(objective(r.q, r.A));
    if (change < tol) break;
  }
  return r;
}

void apply_scaling(Subspace& W, std::vector<LatentPosterior>& latents, const Eigen::VectorXd& q) {
  for (int m = 0; m < W.size(); ++m) W.mode(m) *= 1.0 / q[m];
  for (auto& l : latents) {
    l.z = q.cwiseProduct(l.z);
    l.S = q.asDiagonal() * l.S * q.asDiagonal();
  }
}

}  // namespace gsh
