#include "gsh/template.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include <Eigen/Dense>

#include "gsh/error.hpp"

namespace gsh {

namespace {

void check_categorical(const Field& f, const Field& mu, const char* what) {
  if (f.lattice() != mu.lattice() || f.channels() != mu.channels()) {
    throw DataError(std::string(what) + ": image and template disagree in lattice or class count");
  }
}

inline void softmax_voxel(const double* a, double* out, int K) {
  double m = -kLogClamp;
  for (int k = 0; k < K; ++k) m = std::max(m, std::clamp(a[k], -kLogClamp, kLogClamp));
  double s = 0;
  for (int k = 0; k < K; ++k) {
    out[k] = std::exp(std::clamp(a[k], -kLogClamp, kLogClamp) - m);
    s += out[k];
  }
  for (int k = 0; k < K; ++k) out[k] /= s;
}

}  // namespace

Field softmax(const Field& a) {
  const int K = a.channels();
  Field mu(a.lattice(), K);
  const auto n = static_cast<std::ptrdiff_t>(a.voxels());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < n; ++i) softmax_voxel(a.voxel(i).data(), mu.voxel(i).data(), K);
  return mu;
}

Field warp_template(const Field& a, const Deformation& phi_inv) {
  if (a.lattice().ndim != phi_inv.lattice().ndim) {
    throw DataError("warp_template: template and transform dimensionality differ");
  }
  return softmax(pull(a, phi_inv.map));
}

double data_energy(const Field& f, const Field& mu) {
  check_categorical(f, mu, "data_energy");
  double e = 0;
  for (std::size_t i = 0; i < f.size(); ++i) {
    const double fk = f.storage()[i];
    if (fk > 0) e -= fk * std::log(mu.storage()[i]);
  }
  return e;
}

double data_energy(const Field& f, const Field& a, const Deformation& phi_inv) {
  return data_energy(f, warp_template(a, phi_inv));
}

CategoricalDerivs categorical_derivs(const Field& f, const Field& mu) {
  check_categorical(f, mu, "categorical_derivs");
  const int K = f.channels();
  CategoricalDerivs out{Field(f.lattice(), K), Field(f.lattice(), K * K)};
  const auto n = static_cast<std::ptrdiff_t>(f.voxels());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    const double* fi = f.voxel(i).data();
    const double* m = mu.voxel(i).data();
    double s = 0;
    for (int k = 0; k < K; ++k) s += fi[k];
    double* g = out.grad.voxel(i).data();
    double* h = out.hess.voxel(i).data();
    for (int k = 0; k < K; ++k) {
      g[k] = m[k] * s - fi[k];
      h[k * K + k] = s * m[k] * (1.0 - m[k]);
      for (int l = 0; l < k; ++l) h[k * K + l] = h[l * K + k] = -s * m[k] * m[l];
    }
  }
  return out;
}

DataTermDerivs data_derivs(const Field& f, const Field& a, const ShootingResult& shot) {
  const Deformation& inv = shot.inverse;
  if (!a.all_finite()) throw NumericalError("data_derivs: log-template is not finite");
  const Field mu = warp_template(a, inv);
  DataTermDerivs out;
  out.energy = data_energy(f, mu);

  const CategoricalDerivs cd = categorical_derivs(f, mu);
  const Field g = push(cd.grad, inv);
  const Field h = push(cd.hess, inv);
  const Field da = spatial_gradient(a);

  const Lattice& lat = a.lattice();
  const int d = lat.ndim;
  const int K = a.channels();
  out.grad_v = Field(lat, d);
  out.hess_v = Field(lat, d * d);
  const auto n = static_cast<std::ptrdiff_t>(lat.size());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    const double* gi = g.voxel(i).data();
    const double* hi = h.voxel(i).data();
    const double* ga = da.voxel(i).data();  // ga[k*d + j]
    double* gv = out.grad_v.voxel(i).data();
    double* hv = out.hess_v.voxel(i).data();
    for (int j = 0; j < d; ++j) {
      double acc = 0;
      for (int k = 0; k < K; ++k) acc += gi[k] * ga[k * d + j];
      gv[j] = -acc;
    }
    for (int j = 0; j < d; ++j) {
      for (int l = j; l < d; ++l) {
        double acc = 0;
        for (int k = 0; k < K; ++k) {
          double row = 0;
          for (int m = 0; m < K; ++m) row += hi[k * K + m] * ga[m * d + l];
          acc += ga[k * d + j] * row;
        }
        hv[j * d + l] = acc;
        hv[l * d + j] = acc;
      }
    }
  }
  return out;
}

double template_prior_energy(const Field& a, double eps) {
  if (eps <= 0) return 0;
  const Field mu = softmax(a);
  double e = 0;
  for (double m : mu.values()) e -= eps * std::log(m);
  return e;
}

double template_objective(const Field& a, const std::vector<TemplateSubject>& subjects,
                          double eps) {
  double e = template_prior_energy(a, eps);
  for (const auto& s : subjects) e += data_energy(*s.image, a, *s.inverse);
  return e;
}

Field update_template(const Field& a, const std::vector<TemplateSubject>& subjects, double eps,
                      TemplateUpdateReport* report) {
  if (subjects.empty()) throw DataError("update_template: no subjects");
  const Lattice& lat = a.lattice();
  const int K = a.channels();

  // Prior: behaves like eps counts of every class observed in template space.
  const Field mu0 = softmax(a);
  Field g(lat, K), h(lat, K * K);
  {
    const CategoricalDerivs prior = categorical_derivs(Field(lat, K, eps), mu0);
    g = prior.grad;
    h = prior.hess;
  }
  for (const auto& s : subjects) {
    const Field mu = warp_template(a, *s.inverse);
    const CategoricalDerivs cd = categorical_derivs(*s.image, mu);
    g += push(cd.grad, *s.inverse);
    h += push(cd.hess, *s.inverse);
  }

  Field step(lat, K);
  const auto n = static_cast<std::ptrdiff_t>(lat.size());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    Eigen::Map<const Eigen::MatrixXd> H(h.voxel(i).data(), K, K);
    Eigen::Map<const Eigen::VectorXd> gi(g.voxel(i).data(), K);
    // H annihilates the all-ones direction; the ridge keeps the solve
    // regular without touching the component orthogonal to it much.
    const double ridge = 1e-10 * (1.0 + H.trace());
    Eigen::MatrixXd Hr = H;
    Hr.diagonal().array() += ridge;
    Eigen::VectorXd dx = -Hr.ldlt().solve(gi);
    dx.array() -= dx.mean();
    for (int k = 0; k < K; ++k) step(i, k) = dx[k];
  }

  const double before = template_objective(a, subjects, eps);
  TemplateUpdateReport rep;
  rep.before = before;
  rep.after = before;
  double t = 1.0;
  Field out = a;
  for (int tries = 0; tries <= 6; ++tries, t *= 0.5) {
    Field trial = a;
    axpy(t, step, trial);
    for (double& x : trial.storage()) x = std::clamp(x, -kLogClamp, kLogClamp);
    const double e = template_objective(trial, subjects, eps);
    if (std::isfinite(e) && e < before) {
      rep.after = e;
      rep.halvings = tries;
      rep.accepted = true;
      out = std::move(trial);
      break;
    }
  }
  if (report) *report = rep;
  return out;
}

Field initial_template(const std::vector<const Field*>& images, double eps) {
  if (images.empty()) throw DataError("initial_template: no images");
  const Field& first = *images.front();
  const int K = first.channels();
  Field mean(first.lattice(), K);
  for (const Field* f : images) {
    require_same_shape(*f, first, "initial_template");
    mean += *f;
  }
  mean *= 1.0 / static_cast<double>(images.size());
  Field a(first.lattice(), K);
  for (std::size_t i = 0; i < a.voxels(); ++i) {
    double s = 0;
    for (int k = 0; k < K; ++k) s += mean(i, k);
    double c = 0;
    for (int k = 0; k < K; ++k) {
      a(i, k) = std::max(std::log((mean(i, k) + eps) / (s + K * eps)), -kLogClamp);
      c += a(i, k);
    }
    for (int k = 0; k < K; ++k) a(i, k) = std::clamp(a(i, k) - c / K, -kLogClamp, kLogClamp);
  }
  return a;
}

void write_pgm(const std::string& path, const Field& prob, int channel) {
  if (channel < 0 || channel >= prob.channels()) throw DataError("write_pgm: no such channel");
  const Lattice& lat = prob.lattice();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("write_pgm: cannot open " + path);
  os << "P5\n" << lat.dims[0] << ' ' << lat.dims[1] << "\n255\n";
  const std::size_t plane = static_cast<std::size_t>(lat.dims[0]) * lat.dims[1];
  for (std::size_t i = 0; i < plane; ++i) {
    const double p = std::clamp(prob(i, channel), 0.0, 1.0);
    os.put(static_cast<char>(static_cast<unsigned char>(std::lround(255.0 * p))));
  }
  if (!os) throw DataError("write_pgm: write failed for " + path);
}

}  // namespace gsh
