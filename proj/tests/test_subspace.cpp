#include <cmath>
#include <random>

#include <doctest.h>

#include "gsh/error.hpp"
#include "gsh/subspace.hpp"
#include "support.hpp"

using namespace gsh;

namespace {

Subspace random_subspace(const SpectralKernel& kern, int M, std::mt19937_64& rng) {
  std::vector<Field> modes;
  for (int m = 0; m < M; ++m) modes.push_back(test::smooth_velocity(kern, rng, 1.0));
  return Subspace(std::move(modes));
}

Eigen::MatrixXd random_spd(int M, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n;
  Eigen::MatrixXd B(M, M);
  for (int i = 0; i < M * M; ++i) B.data()[i] = n(rng);
  return scale * (B * B.transpose() / M + 0.1 * Eigen::MatrixXd::Identity(M, M));
}

Field random_categorical(const Lattice& lat, int K, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0, 1);
  Field f(lat, K);
  for (std::size_t i = 0; i < lat.size(); ++i) {
    double s = 0;
    for (int k = 0; k < K; ++k) s += (f(i, k) = u(rng));
    for (int k = 0; k < K; ++k) f(i, k) /= s;
  }
  return f;
}

double max_offdiag(const Eigen::MatrixXd& X) {
  Eigen::MatrixXd Y = X;
  Y.diagonal().setZero();
  return Y.cwiseAbs().maxCoeff();
}

}  // namespace

TEST_CASE("subspace gradient matches finite differences") {
  const Lattice lat({8, 8});
  const SpectralKernel kern(lat, MetricParams{});
  std::mt19937_64 rng(5);
  const int M = 2, N = 3;
  for (int K : {2, 3}) {
    Field a(lat, K);
    for (int k = 0; k < K; ++k) {
      const Field c = test::smooth_velocity(kern, rng, 4.0);
      for (std::size_t i = 0; i < lat.size(); ++i) a(i, k) = c(i, 0);
    }
    const Subspace W = random_subspace(kern, M, rng);
    std::vector<Field> images;
    std::vector<DataTerm> terms;
    std::vector<LatentPosterior> zs(N);
    std::vector<ResidualPosterior> rs(N);
    for (int n = 0; n < N; ++n) images.push_back(random_categorical(lat, K, rng));
    std::normal_distribution<double> nd;
    for (int n = 0; n < N; ++n) {
      terms.push_back(categorical_term(images[n], a, kern, 8));
      zs[n].z = Eigen::VectorXd(M);
      for (int m = 0; m < M; ++m) zs[n].z[m] = nd(rng);
      zs[n].S = random_spd(M, rng, 0.1);
      rs[n].r = -1.0 * W.combine(zs[n].z);  // W z + r = 0: exact data sensitivities
    }
    std::vector<SubspaceSubject> subs;
    for (int n = 0; n < N; ++n) subs.push_back({&terms[n], &zs[n], &rs[n]});
    const MixtureWeights w{1.0, 1.0};

    std::vector<DataTermDerivs> derivs;
    for (int n = 0; n < N; ++n) derivs.push_back(terms[n](Field(lat, 2), true));
    const std::vector<Field> grad = subspace_gradient(W, subs, derivs, kern, w);

    // The objective sums several O(1) terms; smaller steps lose to roundoff.
    const double h = 1e-5;
    double num = 0, den = 0;
    for (int m = 0; m < M; ++m) {
      for (std::size_t i = 0; i < grad[m].size(); ++i) {
        Subspace wp = W, wm = W;
        wp.mode(m).storage()[i] += h;
        wm.mode(m).storage()[i] -= h;
        const double fd = (subspace_objective(wp, subs, kern, w) - subspace_objective(wm, subs, kern, w)) / (2 * h);
        num += std::pow(grad[m].storage()[i] - fd, 2);
        den += fd * fd;
      }
    }
    const double err = std::sqrt(num / den);
    MESSAGE("K=" << K << " subspace gradient relative error " << err);
    CHECK(err < 1e-4);
  }
}

TEST_CASE("subspace update: prior-only and closed-form stationary points") {
  const Lattice lat({8, 8});
  const SpectralKernel kern(lat, MetricParams{});
  std::mt19937_64 rng(6);
  const Field empty(lat, 2);
  const Field a(lat, 2);
  const DataTerm flat = categorical_term(empty, a, kern, 8);

  // No latent mass: only the prior acts and shrinks W.
  const Subspace W = random_subspace(kern, 2, rng);
  LatentPosterior z0{Eigen::VectorXd::Zero(2), Eigen::MatrixXd::Zero(2, 2)};
  ResidualPosterior r0 = ResidualPosterior::zero(lat);
  std::vector<SubspaceSubject> subs{{&flat, &z0, &r0}};
  SubspaceUpdateReport rep;
  const Subspace W1 = update_subspace(W, subs, kern, {1.0, 1.0}, 1e-10, 64, &rep);
  CHECK(rep.accepted);
  CHECK(rep.after < rep.before);
  for (int m = 0; m < 2; ++m) CHECK(norm(W1.mode(m)) < 1e-6 * norm(W.mode(m)));

  // M = 1, gamma2 > 0, fixed r: w = -gamma2 z / (gamma1 + gamma2 z^2) r.
  const Subspace V = random_subspace(kern, 1, rng);
  LatentPosterior z1{Eigen::VectorXd::Constant(1, 1.6), Eigen::MatrixXd::Zero(1, 1)};
  ResidualPosterior r1;
  r1.r = test::smooth_velocity(kern, rng, 0.5);
  std::vector<SubspaceSubject> one{{&flat, &z1, &r1}};
  const Subspace V1 = update_subspace(V, one, kern, {1.0, 2.0}, 1e-12, 64);
  const Field expect = (-2.0 * 1.6 / (1.0 + 2.0 * 1.6 * 1.6)) * r1.r;
  CHECK(test::rel_err(V1.mode(0), expect) < 1e-8);

  // gamma2 = 0: stationary point is w = 0.
  const Subspace V2 = update_subspace(V, one, kern, {1.0, 0.0}, 1e-12, 64);
  CHECK(norm(V2.mode(0)) < 1e-8 * norm(V.mode(0)));
}

TEST_CASE("velocity-preserving subspace refit") {
  const Lattice lat({8, 8});
  const SpectralKernel kern(lat, MetricParams{});
  std::mt19937_64 rng(11);
  const int M = 2, N = 3;
  const double lambda = 5.0;
  const MixtureWeights w{1.0, 0.7};
  const Subspace W = random_subspace(kern, M, rng);

  std::normal_distribution<double> nd;
  std::vector<LatentPosterior> zs(N);
  std::vector<ResidualPosterior> rs(N);
  std::vector<Field> hess;
  Field a(lat, 2);
  for (std::size_t i = 0; i < lat.size(); ++i) a(i, 1) = 3 * std::sin(0.7 * lat.coords(i)[0]);
  for (int n = 0; n < N; ++n) {
    zs[n].z = Eigen::VectorXd(M);
    for (int m = 0; m < M; ++m) zs[n].z[m] = nd(rng);
    zs[n].S = random_spd(M, rng, 0.3);
    rs[n].r = test::smooth_velocity(kern, rng, 0.5);
    rs[n].expected_energy = dot(rs[n].r, kern.apply(rs[n].r)) + 0.25 * (n + 1);
    const Field img = random_categorical(lat, 2, rng);
    hess.push_back(categorical_term(img, a, kern, 8)(W.combine(zs[n].z) + rs[n].r, true).hess_v);
  }

  // Independent evaluation of the quantity the refit minimises.
  auto objective = [&](const Subspace& X, const std::vector<Field>& v, bool with_hess) {
    const Eigen::MatrixXd G = X.gram(kern);
    double f = 0.5 * w.gamma1 * G.trace();
    for (int n = 0; n < N; ++n) {
      const Field e = v[n] - X.combine(zs[n].z);
      f += 0.5 * w.gamma1 * lambda * dot(e, kern.apply(e));
      f += 0.5 * w.gamma2 * (G * zs[n].S).trace();
      if (with_hess) f += 0.5 * (project_hessian(X, hess[n]) * zs[n].S).trace();
    }
    return f;
  };
  std::vector<Field> v;
  for (int n = 0; n < N; ++n) v.push_back(W.combine(zs[n].z) + rs[n].r);

  for (bool with_hess : {false, true}) {
    std::vector<ResidualPosterior> r = rs;
    SolverReport rep;
    const Subspace W1 = exchange_subspace(W, zs, r, with_hess ? hess : std::vector<Field>{}, kern,
                                          lambda, w, 1e-12, 500, &rep);
    CHECK(rep.converged);
    for (int n = 0; n < N; ++n) {
      CHECK(test::rel_err(W1.combine(zs[n].z) + r[n].r, v[n]) < 1e-12);
      const double trace = r[n].expected_energy - dot(r[n].r, kern.apply(r[n].r));
      CHECK(trace == doctest::Approx(0.25 * (n + 1)).epsilon(1e-9));
    }
    const double f0 = objective(W, v, with_hess), f1 = objective(W1, v, with_hess);
    CHECK(f1 < f0);
    // Quadratic objective: stationarity makes it even along any direction.
    for (int trial = 0; trial < 3; ++trial) {
      Subspace up = W1, dn = W1;
      for (int m = 0; m < M; ++m) {
        const Field d = test::smooth_velocity(kern, rng, 0.1);
        up.mode(m) += d;
        dn.mode(m) -= d;
      }
      const double fp = objective(up, v, with_hess), fm = objective(dn, v, with_hess);
      CHECK(std::abs(fp - fm) <= 1e-6 * (fp - f1));
    }
  }
}

TEST_CASE("orthogonalisation") {
  const Lattice lat({8, 8});
  const SpectralKernel kern(lat, MetricParams{});
  std::mt19937_64 rng(11);
  const int M = 3, N = 7;

  // Constructed mixing: start from an L-orthonormal basis with diagonal
  // moments, mix it, and recover.
  Subspace base = random_subspace(kern, M, rng);
  {
    std::vector<LatentPosterior> dummy(N);
    std::normal_distribution<double> nd;
    for (auto& l : dummy) {
      l.z = Eigen::VectorXd(M);
      for (int m = 0; m < M; ++m) l.z[m] = nd(rng);
      l.S = random_spd(M, rng, 0.05);
    }
    orthogonalise(base, dummy, kern);
  }
  std::vector<LatentPosterior> lat_true(N);
  std::normal_distribution<double> nd;
  for (auto& l : lat_true) {
    l.z = Eigen::VectorXd(M);
    for (int m = 0; m < M; ++m) l.z[m] = (3.0 - m) * nd(rng);
    l.S = random_spd(M, rng, 0.05);
  }
  Eigen::MatrixXd R(M, M);
  for (int i = 0; i < M * M; ++i) R.data()[i] = nd(rng);
  R += 2 * Eigen::MatrixXd::Identity(M, M);
  Subspace W = base.transformed(R.inverse());
  std::vector<LatentPosterior> ls = lat_true;
  for (auto& l : ls) {
    l.z = R * l.z;
    l.S = R * l.S * R.transpose();
  }
  std::vector<Field> before;
  for (const auto& l : ls) before.push_back(W.combine(l.z));

  const OrthoResult o = orthogonalise(W, ls, kern);
  const Eigen::MatrixXd G = W.gram(kern);
  const Eigen::MatrixXd Z = latent_second_moment(ls);
  CHECK(max_offdiag(Z) <= 1e-8 * Z.diagonal().norm());
  CHECK((G - Eigen::MatrixXd::Identity(M, M)).cwiseAbs().maxCoeff() <= 1e-8);
  for (int m = 1; m < M; ++m) CHECK(Z(m, m) <= Z(m - 1, m - 1));
  for (int n = 0; n < N; ++n) CHECK(test::rel_err(W.combine(ls[n].z), before[n]) <= 1e-10);
  CHECK((o.T * o.T_inv - Eigen::MatrixXd::Identity(M, M)).cwiseAbs().maxCoeff() < 1e-10);

  // Applying it again is (numerically) the identity up to sign.
  std::vector<LatentPosterior> again = ls;
  Subspace W2 = W;
  const OrthoResult o2 = orthogonalise(W2, again, kern);
  CHECK((o2.T.cwiseAbs() - Eigen::MatrixXd::Identity(M, M)).cwiseAbs().maxCoeff() < 1e-8);
  for (int n = 0; n < N; ++n) CHECK(test::rel_err(W2.combine(again[n].z), before[n]) <= 1e-10);

  // Collapsed mode.
  Subspace bad = W;
  bad.mode(2) = bad.mode(0);
  std::vector<LatentPosterior> lb = ls;
  CHECK_THROWS_AS(orthogonalise(bad, lb, kern), RankDeficiencyError);
}

TEST_CASE("diagonal rescaling") {
  CHECK(optimal_scale(1, 1, 1, 0) == 1.0);
  CHECK(optimal_scale(4, 1, 1, 0) == doctest::Approx(std::pow(0.25, 0.25)).epsilon(1e-14));
  // Stationarity with the entropy term: d a q^2 - g / q^2 = c.
  const double q = optimal_scale(3, 0.5, 2, 5);
  CHECK(3 * 0.5 * q * q - 2 / (q * q) == doctest::Approx(5.0).epsilon(1e-12));

  std::mt19937_64 rng(13);
  std::uniform_real_distribution<double> u(0.2, 20);
  for (int trial = 0; trial < 10; ++trial) {
    const int M = 4;
    Eigen::VectorXd D(M), g = Eigen::VectorXd::Ones(M);
    for (int m = 0; m < M; ++m) D[m] = u(rng);
    for (double c : {0.0, 10.0}) {
      const RescaleResult r = rescale(D, g, 10, {1.0, 1.0}, c);
      CHECK(r.iterations <= 32);
      for (std::size_t k = 1; k < r.objective.size(); ++k) {
        CHECK(r.objective[k] <= r.objective[k - 1] + 1e-12 * std::abs(r.objective[k - 1]));
      }
      for (int m = 0; m < M; ++m) CHECK(r.q[m] > 0);
    }
  }

  // Scaling leaves W z untouched.
  const Lattice lat({8, 8});
  const SpectralKernel kern(lat, MetricParams{});
  Subspace W = random_subspace(kern, 2, rng);
  std::vector<LatentPosterior> ls{{Eigen::Vector2d(0.3, -2.0), Eigen::Matrix2d::Identity()}};
  const Field before = W.combine(ls[0].z);
  apply_scaling(W, ls, Eigen::Vector2d(0.5, 3.0));
  CHECK(test::rel_err(W.combine(ls[0].z), before) < 1e-14);
  CHECK(ls[0].S(1, 1) == doctest::Approx(9.0));
}
