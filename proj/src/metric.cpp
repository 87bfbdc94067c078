#include "gsh/metric.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "fft.hpp"
#include "gsh/error.hpp"

namespace gsh {

using detail::cplx;

void MetricParams::validate() const {
  const double w[] = {membrane, bending, elastic_div, elastic_shear, absolute};
  for (double x : w) {
    if (!(x >= 0.0) || !std::isfinite(x)) {
      throw ConfigError("metric weights must be finite and non-negative");
    }
  }
  if (membrane == 0 && bending == 0 && elastic_div == 0 && elastic_shear == 0 && absolute == 0) {
    throw ConfigError("all metric weights are zero: the operator is identically singular");
  }
}

SpectralKernel::SpectralKernel(const Lattice& lattice, const MetricParams& params)
    : lattice_(lattice), params_(params) {
  lattice_.validate();
  params_.validate();
  const int d = lattice_.ndim;
  const std::size_t nf = lattice_.size();
  symbol_.assign(nf * d * d, 0.0);
  inverse_.assign(nf * d * d, 0.0);
  diag_block_.setZero();

  for (std::size_t f = 0; f < nf; ++f) {
    const auto k = lattice_.coords(f);
    cplx delta[3];
    double s = 0;
    for (int j = 0; j < d; ++j) {
      const double w = 2.0 * std::numbers::pi * k[j] / lattice_.dims[j];
      delta[j] = (std::polar(1.0, w) - 1.0) / lattice_.voxel_size[j];
      s += std::norm(delta[j]);
    }
    Block m(d, d);
    for (int r = 0; r < d; ++r) {
      for (int c = 0; c < d; ++c) {
        cplx v = params_.elastic_shear * delta[r] * std::conj(delta[c]) +
                 params_.elastic_div * std::conj(delta[r]) * delta[c];
        if (r == c) {
          v += params_.absolute + params_.membrane * s + params_.bending * s * s +
               params_.elastic_shear * s;
        }
        m(r, c) = v;
      }
    }
    // Exact Hermitian symmetry; the inverse inherits it.
    m = 0.5 * (m + m.adjoint()).eval();
    // Pseudo-inverse: only the DC block can be singular, and only when the
    // absolute weight is zero.
    Eigen::SelfAdjointEigenSolver<Block> es(m);
    Eigen::VectorXd ev = es.eigenvalues();
    const double cutoff = 1e-14 * std::max(1.0, ev.cwiseAbs().maxCoeff());
    for (int r = 0; r < d; ++r) ev(r) = ev(r) > cutoff ? 1.0 / ev(r) : 0.0;
    Block inv = es.eigenvectors() * ev.cast<cplx>().asDiagonal() * es.eigenvectors().adjoint();
    inv = 0.5 * (inv + inv.adjoint()).eval();
    for (int r = 0; r < d; ++r) {
      for (int c = 0; c < d; ++c) {
        symbol_[f * d * d + r * d + c] = m(r, c);
        inverse_[f * d * d + r * d + c] = inv(r, c);
        diag_block_(r, c) += m(r, c).real();
      }
    }
  }
  diag_block_ /= static_cast<double>(nf);
}

SpectralKernel::Block SpectralKernel::symbol(std::size_t f) const {
  const int d = ndim();
  Block m(d, d);
  for (int r = 0; r < d; ++r)
    for (int c = 0; c < d; ++c) m(r, c) = symbol_[f * d * d + r * d + c];
  return m;
}

SpectralKernel::Block SpectralKernel::inverse_symbol(std::size_t f) const {
  const int d = ndim();
  Block m(d, d);
  for (int r = 0; r < d; ++r)
    for (int c = 0; c < d; ++c) m(r, c) = inverse_[f * d * d + r * d + c];
  return m;
}

std::vector<double> SpectralKernel::eigenvalues() const {
  std::vector<double> ev;
  ev.reserve(lattice_.size() * ndim());
  for (std::size_t f = 0; f < lattice_.size(); ++f) {
    Eigen::SelfAdjointEigenSolver<Block> es(symbol(f), Eigen::EigenvaluesOnly);
    for (int r = 0; r < ndim(); ++r) ev.push_back(es.eigenvalues()(r));
  }
  std::sort(ev.begin(), ev.end());
  return ev;
}

Field SpectralKernel::multiply(const Field& v, const std::vector<cplx>& mats) const {
  if (v.lattice() != lattice_ || v.channels() != ndim()) {
    throw DataError("metric operator: field lattice " + v.lattice().describe() +
                    " does not match kernel lattice " + lattice_.describe());
  }
  const int d = ndim();
  std::vector<cplx> buf(v.values().begin(), v.values().end());
  detail::fft_forward(buf, lattice_, d);
  const auto nf = static_cast<std::ptrdiff_t>(lattice_.size());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t f = 0; f < nf; ++f) {
    cplx in[3], out[3];
    for (int c = 0; c < d; ++c) in[c] = buf[f * d + c];
    const cplx* m = mats.data() + f * d * d;
    for (int r = 0; r < d; ++r) {
      cplx acc = 0;
      for (int c = 0; c < d; ++c) acc += m[r * d + c] * in[c];
      out[r] = acc;
    }
    for (int c = 0; c < d; ++c) buf[f * d + c] = out[c];
  }
  detail::fft_backward(buf, lattice_, d);
  Field out(lattice_, d);
  const double scale = 1.0 / static_cast<double>(lattice_.size());
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] = buf[i].real() * scale;
  return out;
}

Field SpectralKernel::apply(const Field& v) const { return multiply(v, symbol_); }

Field SpectralKernel::apply_inverse(const Field& u) const { return multiply(u, inverse_); }

Field SpectralKernel::apply_inverse_sqrt(const Field& x) const {
  const int d = ndim();
  std::vector<cplx> mats(symbol_.size());
  for (std::size_t f = 0; f < lattice_.size(); ++f) {
    Eigen::SelfAdjointEigenSolver<Block> es(symbol(f));
    const Eigen::VectorXd isq = es.eigenvalues().cwiseSqrt().cwiseInverse();
    Block r = es.eigenvectors() * isq.cast<cplx>().asDiagonal() * es.eigenvectors().adjoint();
    for (int a = 0; a < d; ++a)
      for (int b = 0; b < d; ++b) mats[f * d * d + a * d + b] = r(a, b);
  }
  return multiply(x, mats);
}

SpectralKernel build_kernel(const Lattice& lattice, const MetricParams& params) {
  return SpectralKernel(lattice, params);
}

Field apply_L(const Field& v, const SpectralKernel& kernel) { return kernel.apply(v); }

Field apply_K(const Field& u, const SpectralKernel& kernel) { return kernel.apply_inverse(u); }

double metric_energy(const Field& v, const SpectralKernel& kernel) {
  return 0.5 * dot(kernel.apply(v), v);
}

}  // namespace gsh
