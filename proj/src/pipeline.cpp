#include "gsh/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

#include "gsh/error.hpp"
#include "gsh/parallel.hpp"
#include "gsh/shooting.hpp"

namespace gsh {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json read_json(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot read " + path.string());
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream os(path);
  os << j.dump(1) << '\n';
  if (!os) throw DataError("cannot write " + path.string());
}

json matrix_json(const Eigen::MatrixXd& m) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(row);
  }
  return rows;
}

Eigen::MatrixXd json_matrix(const json& j) {
  const auto rows = static_cast<Eigen::Index>(j.size());
  const auto cols = rows ? static_cast<Eigen::Index>(j[0].size()) : 0;
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    if (static_cast<Eigen::Index>(j[r].size()) != cols) throw DataError("ragged matrix in JSON");
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = j[r][c].get<double>();
  }
  return m;
}

json vector_json(const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

Eigen::VectorXd json_vector(const json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

std::string numbered(const char* stem, std::size_t i) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s_%03zu.gshfld", stem, i);
  return buf;
}

void check_lattice(const Field& f, const Field& ref, const std::string& what) {
  if (f.lattice() != ref.lattice()) throw DataError(what + ": lattice mismatch");
  if (f.channels() != ref.channels()) throw DataError(what + ": class count mismatch");
}

GlobalSnapshot snapshot(const Checkpoint& c, const SpectralKernel& kernel) {
  GlobalSnapshot g = GlobalSnapshot::make(kernel, c.state.W, c.state.A.mean(), c.state.lambda.mean(),
                                          c.config.weights);
  g.uncertainty = c.config.uncertainty;
  g.pcg_tol = c.config.pcg_tol;
  g.pcg_max_iter = c.config.pcg_max_iter;
  return g;
}

// K applied to white noise: a smooth random velocity.
Field smooth_noise(const SpectralKernel& kernel, std::mt19937_64& rng) {
  std::normal_distribution<double> n;
  const Lattice& lat = kernel.lattice();
  Field x(lat, lat.ndim);
  for (double& v : x.storage()) v = n(rng);
  return kernel.apply_inverse(x);
}

}  // namespace

// ---- datasets -------------------------------------------------------------

std::vector<const Subject*> Dataset::split(const std::string& name) const {
  std::vector<const Subject*> out;
  for (const auto& s : subjects)
    if (s.split == name) out.push_back(&s);
  return out;
}

Dataset load_dataset(const fs::path& dir) {
  const json m = read_json(dir / "manifest.json");
  if (!m.contains("subjects") || !m["subjects"].is_array()) {
    throw DataError("manifest.json: missing subjects array");
  }
  Dataset d;
  for (const auto& e : m["subjects"]) {
    Subject s;
    try {
      s.id = e.at("id").get<std::string>();
      s.split = e.value("split", std::string("train"));
      s.image = load_field(dir / e.at("path").get<std::string>()).field;
    } catch (const json::exception& ex) {
      throw DataError(std::string("manifest.json: ") + ex.what());
    }
    if (s.split != "train" && s.split != "test") throw DataError("manifest.json: bad split for " + s.id);
    if (!d.subjects.empty()) check_lattice(s.image, d.subjects.front().image, "subject " + s.id);
    for (double v : s.image.values()) {
      if (!(v >= 0) || !std::isfinite(v)) throw DataError("subject " + s.id + ": responsibilities must be finite and non-negative");
    }
    d.subjects.push_back(std::move(s));
  }
  return d;
}

void save_dataset(const fs::path& dir, const Dataset& data, StorageType dtype) {
  fs::create_directories(dir);
  json list = json::array();
  for (const auto& s : data.subjects) {
    const std::string file = s.id + ".gshfld";
    save_field(dir / file, s.image, json{{"id", s.id}}, dtype);
    list.push_back({{"id", s.id}, {"path", file}, {"split", s.split}});
  }
  write_json(dir / "manifest.json", json{{"subjects", list}});
}

// ---- checkpoints ----------------------------------------------------------

void save_checkpoint(const fs::path& dir, const Checkpoint& c) {
  fs::create_directories(dir);
  const StorageType dt = c.config.storage;
  const ModelState& s = c.state;
  json j;
  j["format"] = "gsh-checkpoint/1";
  j["config"] = config_entries(c.config);
  j["iteration"] = c.iteration;
  j["bound_trace"] = c.bound_trace;
  j["ids"] = c.ids;
  j["lambda"] = {{"alpha", s.lambda.alpha}, {"beta", s.lambda.beta}, {"nu0", s.lambda.nu0},
                 {"lambda0", s.lambda.lambda0}, {"dim", s.lambda.dim}};
  j["A"] = {{"dof", s.A.dof}, {"V", matrix_json(s.A.V)}};
  j["modes"] = s.W.size();
  json lat = json::array();
  for (std::size_t n = 0; n < s.latents.size(); ++n) {
    lat.push_back({{"z", vector_json(s.latents[n].z)},
                   {"S", matrix_json(s.latents[n].S)},
                   {"residual_energy", s.residuals[n].expected_energy},
                   {"residual_cov", !s.residuals[n].cov.empty()}});
  }
  j["subjects"] = lat;

  save_field(dir / "template.gshfld", s.templ, json{{"role", "log-template"}}, dt);
  for (int m = 0; m < s.W.size(); ++m) save_field(dir / numbered("mode", m), s.W.mode(m), {}, dt);
  for (std::size_t n = 0; n < s.residuals.size(); ++n) {
    save_field(dir / numbered("residual", n), s.residuals[n].r, json{{"id", c.ids[n]}}, dt);
    if (!s.residuals[n].cov.empty()) {
      save_field(dir / numbered("residual_cov", n), s.residuals[n].cov, json{{"id", c.ids[n]}}, dt);
    }
  }
  // Written last: a directory without model.json is not a checkpoint.
  write_json(dir / "model.json", j);

  std::ofstream trace(dir / "bound_trace.csv");
  trace << "iteration,bound\n";
  trace.precision(17);
  for (std::size_t i = 0; i < c.bound_trace.size(); ++i) trace << i << ',' << c.bound_trace[i] << '\n';
}

Checkpoint load_checkpoint(const fs::path& dir) {
  const json j = read_json(dir / "model.json");
  Checkpoint c;
  try {
    if (j.at("format") != "gsh-checkpoint/1") throw DataError("model.json: unknown format");
    std::string text;
    for (const auto& [k, v] : j.at("config").items()) text += k + " = " + v.get<std::string>() + "\n";
    c.config = parse_config(text);
    c.iteration = j.at("iteration").get<int>();
    c.bound_trace = j.at("bound_trace").get<std::vector<double>>();
    c.ids = j.at("ids").get<std::vector<std::string>>();
    const json& l = j.at("lambda");
    c.state.lambda.alpha = l.at("alpha");
    c.state.lambda.beta = l.at("beta");
    c.state.lambda.nu0 = l.at("nu0");
    c.state.lambda.lambda0 = l.at("lambda0");
    c.state.lambda.dim = l.at("dim");
    c.state.A.dof = j.at("A").at("dof");
    c.state.A.V = json_matrix(j.at("A").at("V"));

    c.state.templ = load_field(dir / "template.gshfld").field;
    std::vector<Field> modes;
    for (int m = 0; m < j.at("modes").get<int>(); ++m) modes.push_back(load_field(dir / numbered("mode", m)).field);
    c.state.W = Subspace(std::move(modes));
    const json& subs = j.at("subjects");
    if (subs.size() != c.ids.size()) throw DataError("model.json: subject count mismatch");
    for (std::size_t n = 0; n < subs.size(); ++n) {
      LatentPosterior z{json_vector(subs[n].at("z")), json_matrix(subs[n].at("S"))};
      ResidualPosterior r;
      r.r = load_field(dir / numbered("residual", n)).field;
      r.expected_energy = subs[n].at("residual_energy");
      if (subs[n].at("residual_cov").get<bool>()) r.cov = load_field(dir / numbered("residual_cov", n)).field;
      c.state.latents.push_back(std::move(z));
      c.state.residuals.push_back(std::move(r));
    }
  } catch (const json::exception& e) {
    throw DataError(std::string("model.json: ") + e.what());
  }
  return c;
}

// ---- synthetic populations ------------------------------------------------

SyntheticTruth synthetic_truth(const PipelineConfig& cfg) {
  const SyntheticSpec& sp = cfg.synth;
  const Lattice lat(sp.dims);
  const SpectralKernel kernel(lat, cfg.metric);
  const int K = cfg.K;
  const double cx = 0.5 * lat.dims[0], cy = 0.5 * lat.dims[1];

  // Concentric classes: P(class >= k) = sigmoid(s (R_k - rho)), R_1 > R_2 > ...
  SyntheticTruth t;
  t.templ = Field(lat, K);
  Field p(lat, 1);
  Field theta(lat, 1);
  for (std::size_t i = 0; i < lat.size(); ++i) {
    const auto x = lat.coords(i);
    const double dx = x[0] - cx, dy = x[1] - cy;
    const double rho = std::hypot(dx, dy);
    theta(i, 0) = std::atan2(dy, dx);
    std::vector<double> above(K + 1, 0.0);
    above[0] = 1;
    for (int k = 1; k < K; ++k) {
      const double Rk = sp.blob_radius * (K - k) / (K - 1);
      above[k] = 1 / (1 + std::exp(-sp.blob_sharpness * (Rk - rho)));
    }
    p(i, 0) = above[1];
    double mean = 0;
    for (int k = 0; k < K; ++k) {
      t.templ(i, k) = std::log(std::max(above[k] - above[k + 1], 1e-12));
      mean += t.templ(i, k);
    }
    for (int k = 0; k < K; ++k) t.templ(i, k) -= mean / K;
  }

  const Field dp = spatial_gradient(p);
  std::vector<Field> modes;
  for (int m = 0; m < sp.modes; ++m) {
    const int order = m + 2;
    Field u(lat, 2);
    for (std::size_t i = 0; i < lat.size(); ++i) {
      const double c = m % 2 == 0 ? std::cos(order * theta(i, 0)) : std::sin(order * theta(i, 0));
      u(i, 0) = c * dp(i, 0);
      u(i, 1) = c * dp(i, 1);
    }
    modes.push_back(kernel.apply_inverse(u));
  }
  Subspace W(std::move(modes));
  const Eigen::MatrixXd G = W.gram(kernel);
  const Eigen::MatrixXd R = Eigen::LLT<Eigen::MatrixXd>(G).matrixU();
  t.W = W.transformed(R.inverse());  // L-orthonormal

  t.A = Eigen::MatrixXd::Zero(sp.modes, sp.modes);
  for (int m = 0; m < sp.modes; ++m) {
    double peak = 0;
    for (std::size_t i = 0; i < lat.size(); ++i) {
      peak = std::max(peak, std::hypot(t.W.mode(m)(i, 0), t.W.mode(m)(i, 1)));
    }
    const double sd = sp.mode_sd[m] / peak;
    t.A(m, m) = 1 / (sd * sd);
  }
  t.lambda = sp.lambda;
  return t;
}

Eigen::VectorXd sample_latent(const Eigen::MatrixXd& A, std::mt19937_64& rng) {
  std::normal_distribution<double> n;
  Eigen::VectorXd xi(A.rows());
  for (Eigen::Index m = 0; m < xi.size(); ++m) xi[m] = n(rng);
  // A = U^T U, z = U^-1 xi has covariance A^-1.
  const Eigen::LLT<Eigen::MatrixXd> llt(A);
  if (llt.info() != Eigen::Success) throw ConfigError("latent precision is not positive definite");
  return llt.matrixU().solve(xi);
}

Field sample_residual(const SpectralKernel& kernel, double lambda, std::mt19937_64& rng) {
  std::normal_distribution<double> n;
  const Lattice& lat = kernel.lattice();
  Field xi(lat, lat.ndim);
  for (double& v : xi.storage()) v = n(rng);
  Field r = kernel.apply_inverse_sqrt(xi);
  r *= 1 / std::sqrt(lambda);
  return r;
}

Field sample_categorical(const Field& prob, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0, 1);
  Field f(prob.lattice(), prob.channels());
  const int K = prob.channels();
  for (std::size_t i = 0; i < prob.voxels(); ++i) {
    const double x = u(rng);
    double c = 0;
    int k = 0;
    for (; k < K - 1; ++k) {
      c += prob(i, k);
      if (x < c) break;
    }
    f(i, k) = 1;
  }
  return f;
}

Dataset synthesise(const PipelineConfig& cfg, SyntheticTruth& truth, std::uint64_t seed) {
  truth = synthetic_truth(cfg);
  const SpectralKernel kernel(truth.templ.lattice(), cfg.metric);
  std::mt19937_64 rng(seed);
  Dataset d;
  const int total = cfg.synth.train + cfg.synth.test;
  for (int n = 0; n < total; ++n) {
    const bool train = n < cfg.synth.train;
    char id[32];
    std::snprintf(id, sizeof id, "%s_%03d", train ? "train" : "test", train ? n : n - cfg.synth.train);
    Eigen::VectorXd z = sample_latent(truth.A, rng);
    Field r = sample_residual(kernel, truth.lambda, rng);
    const Field v = truth.W.combine(z) + r;
    const ShootingResult shot = shoot(v, kernel, cfg.synth.steps);
    const Field mu = warp_template(truth.templ, shot.inverse);
    d.subjects.push_back({id, train ? "train" : "test", sample_categorical(mu, rng)});
    truth.z.push_back(std::move(z));
    truth.r.push_back(std::move(r));
  }
  return d;
}

void save_truth(const fs::path& dir, const SyntheticTruth& t, const Dataset& data) {
  fs::create_directories(dir);
  json j;
  j["lambda"] = t.lambda;
  j["A"] = matrix_json(t.A);
  j["modes"] = t.W.size();
  json subs = json::array();
  for (std::size_t n = 0; n < data.subjects.size(); ++n) {
    subs.push_back({{"id", data.subjects[n].id}, {"z", vector_json(t.z[n])},
                    {"residual", "truth_residual_" + data.subjects[n].id + ".gshfld"}});
    save_field(dir / ("truth_residual_" + data.subjects[n].id + ".gshfld"), t.r[n]);
  }
  j["subjects"] = subs;
  save_field(dir / "truth_template.gshfld", t.templ);
  for (int m = 0; m < t.W.size(); ++m) save_field(dir / numbered("truth_mode", m), t.W.mode(m));
  write_json(dir / "truth.json", j);
}

// ---- training -------------------------------------------------------------

Trainer::Trainer(PipelineConfig cfg, std::vector<std::string> ids, std::vector<Field> images)
    : images_(std::move(images)) {
  ckpt_.config = std::move(cfg);
  ckpt_.config.validate();
  ckpt_.ids = std::move(ids);
  check_images();
  kernel_ = SpectralKernel(images_.front().lattice(), ckpt_.config.metric);
  initialise();
}

Trainer::Trainer(Checkpoint ckpt, std::vector<Field> images)
    : ckpt_(std::move(ckpt)), images_(std::move(images)) {
  check_images();
  if (ckpt_.state.latents.size() != images_.size()) {
    throw DataError("checkpoint holds " + std::to_string(ckpt_.state.latents.size()) +
                    " subjects but " + std::to_string(images_.size()) + " images were given");
  }
  check_lattice(images_.front(), ckpt_.state.templ, "checkpoint template");
  kernel_ = SpectralKernel(images_.front().lattice(), ckpt_.config.metric);
  if (ckpt_.bound_trace.empty()) ckpt_.bound_trace.push_back(bound());
}

void Trainer::check_images() {
  const PipelineConfig& c = ckpt_.config;
  if (images_.size() < 2) throw DataError("training needs at least two images");
  if (ckpt_.ids.size() != images_.size()) throw DataError("one id per training image required");
  for (const auto& f : images_) check_lattice(f, images_.front(), "training image");
  if (images_.front().channels() != c.K) {
    throw DataError("images have " + std::to_string(images_.front().channels()) +
                    " classes, config says K = " + std::to_string(c.K));
  }
  if (!c.dims.empty() && images_.front().lattice().extents() != c.dims) {
    throw DataError("image lattice " + images_.front().lattice().describe() + " does not match config dims");
  }
  image_ptrs_.clear();
  for (const auto& f : images_) image_ptrs_.push_back(&f);
}

void Trainer::initialise() {
  const PipelineConfig& c = ckpt_.config;
  ModelState& s = ckpt_.state;
  const Lattice& lat = kernel_.lattice();
  const std::size_t N = images_.size();

  s.templ = initial_template(image_ptrs_, c.dirichlet_eps);
  std::mt19937_64 rng(c.seed);
  std::vector<Field> modes;
  for (int m = 0; m < c.M; ++m) modes.push_back(smooth_noise(kernel_, rng));
  s.W = Subspace(std::move(modes));
  const OrthoResult o = orthogonal_transform(s.W.gram(kernel_), Eigen::MatrixXd::Zero(c.M, c.M));
  s.W = s.W.transformed(o.T_inv);

  s.latents.assign(N, LatentPosterior{Eigen::VectorXd::Zero(c.M), Eigen::MatrixXd::Zero(c.M, c.M)});
  s.residuals.assign(N, ResidualPosterior::zero(lat));
  s.lambda = NoisePrecisionPosterior::prior(c.nu0, c.lambda0, static_cast<double>(lat.ndim * lat.size()));
  s.A = LatentPrecisionPosterior::prior(c.M);
  refresh_covariances();
  ckpt_.iteration = 0;
  ckpt_.bound_trace = {bound()};
}

// Laplace covariances at the current means (used once the means are fixed
// by something other than the subject updates).
void Trainer::refresh_covariances() {
  ModelState& s = ckpt_.state;
  const GlobalSnapshot g = snapshot(ckpt_, kernel_);
  parallel_for(images_.size(), [&](std::size_t n) {
    const DataTerm data = categorical_term(images_[n], s.templ, kernel_, ckpt_.config.steps);
    const DataTermDerivs d = data(s.W.combine(s.latents[n].z) + s.residuals[n].r, true);
    s.latents[n].S = latent_covariance(g, d.hess_v);
    s.residuals[n].cov = residual_covariance(g, d.hess_v);
    s.residuals[n].expected_energy = expected_residual_energy(kernel_, s.residuals[n].r, s.residuals[n].cov);
  });
}

double Trainer::bound() const {
  const PipelineConfig& c = ckpt_.config;
  BoundInputs in{&image_ptrs_, &kernel_, c.weights, c.uncertainty, c.steps, c.dirichlet_eps};
  return lower_bound(ckpt_.state, in);
}

std::vector<double> Trainer::subject_bounds() const {
  const PipelineConfig& c = ckpt_.config;
  BoundInputs in{&image_ptrs_, &kernel_, c.weights, c.uncertainty, c.steps, c.dirichlet_eps};
  std::vector<double> parts;
  lower_bound(ckpt_.state, in, &parts);
  return parts;
}

// Per-subject z/r alternation. Each subject keeps its new posterior only if
// its own bound contribution did not drop (the global terms do not depend on
// it), so the phase as a whole cannot lower the bound.
bool Trainer::subject_phase() {
  const PipelineConfig& c = ckpt_.config;
  ModelState& s = ckpt_.state;
  const GlobalSnapshot g = snapshot(ckpt_, kernel_);
  std::vector<char> kept(images_.size(), 0);
  parallel_for(images_.size(), [&](std::size_t n) {
    const DataTerm data = categorical_term(images_[n], s.templ, kernel_, c.steps);
    LatentPosterior z = s.latents[n];
    ResidualPosterior r = s.residuals[n];
    DataTermDerivs cur = data(s.W.combine(z.z) + r.r, true);
    const double before = subject_bound(g, cur, z, r);
    for (int sweep = 0; sweep < c.subject_sweeps; ++sweep) {
      z = update_latent(g, data, z, r.r, cur);
      r = update_residual(g, data, r, z.z, cur);
    }
    const double after = subject_bound(g, cur, z, r);
    if (std::isfinite(after) && after >= before) {
      s.latents[n] = std::move(z);
      s.residuals[n] = std::move(r);
      kept[n] = 1;
    }
  });
  return std::any_of(kept.begin(), kept.end(), [](char k) { return k != 0; });
}

void Trainer::orthogonalise_and_rescale(std::mt19937_64& rng, IterationReport& rep) {
  const PipelineConfig& c = ckpt_.config;
  ModelState& s = ckpt_.state;
  for (int attempt = 0;; ++attempt) {
    try {
      orthogonalise(s.W, s.latents, kernel_);
      break;
    } catch (const RankDeficiencyError& e) {
      if (attempt >= s.W.size()) throw;
      // Collapsed mode: restart it as small smooth noise.
      double largest = 0;
      for (int m = 0; m < s.W.size(); ++m) largest = std::max(largest, norm(s.W.mode(m)));
      // Scale relative to the surviving modes; if every mode has collapsed
      // (e.g. no shape variability at all) there is no such scale.
      Field w = smooth_noise(kernel_, rng);
      const double scale = largest > 1e-8 * norm(w) ? largest : norm(w);
      w *= 1e-3 * scale / norm(w);
      s.W.mode(e.mode()) = std::move(w);
      for (auto& l : s.latents) {
        l.z[e.mode()] = 0;
        l.S.row(e.mode()).setZero();
        l.S.col(e.mode()).setZero();
      }
      ++rep.reinitialised_modes;
    }
  }
  const Eigen::VectorXd D = latent_second_moment(s.latents).diagonal();
  const Eigen::VectorXd gd = s.W.gram(kernel_).diagonal();
  const double N = static_cast<double>(s.latents.size());
  const RescaleResult r = rescale(D, gd, static_cast<int>(N), c.weights, N);
  apply_scaling(s.W, s.latents, r.q);
  s.A = r.A;
  // Restarted modes have no posterior spread yet.
  if (rep.reinitialised_modes) refresh_covariances();
}

IterationReport Trainer::iterate() {
  const PipelineConfig& c = ckpt_.config;
  ModelState& s = ckpt_.state;
  IterationReport rep;
  rep.iteration = ckpt_.iteration + 1;
  rep.bound_before = ckpt_.bound_trace.back();
  double current = rep.bound_before;

  // Runs a phase on the state and keeps it only if the bound did not drop.
  auto guarded = [&](const char* name, auto&& phase) {
    const ModelState saved = s;
    phase();
    const double b = bound();
    if (!std::isfinite(b)) {
      s = saved;
      throw NumericalError(std::string("non-finite bound after the ") + name + " update");
    }
    if (b >= current) {
      current = b;
    } else {
      s = saved;
      rep.rejected.push_back(name);
    }
  };

  guarded("subject", [&] { subject_phase(); });
  guarded("lambda", [&] { s.lambda = update_noise_precision(s.lambda, s.residuals, c.weights); });
  guarded("A", [&] { s.A = update_latent_precision(s.W.size(), s.latents, c.weights); });
  guarded("W", [&] {
    std::vector<DataTerm> terms;
    terms.reserve(images_.size());
    for (const auto& f : images_) terms.push_back(categorical_term(f, s.templ, kernel_, c.steps));
    std::vector<SubspaceSubject> subs;
    for (std::size_t n = 0; n < images_.size(); ++n) {
      subs.push_back({&terms[n], &s.latents[n], &s.residuals[n]});
    }
    s.W = update_subspace(s.W, subs, kernel_, c.weights, c.pcg_tol, c.pcg_max_iter);
  });
  guarded("exchange", [&] {
    std::vector<Field> hess(images_.size());
    parallel_for(images_.size(), [&](std::size_t n) {
      const DataTerm term = categorical_term(images_[n], s.templ, kernel_, c.steps);
      hess[n] = term(s.W.combine(s.latents[n].z) + s.residuals[n].r, true).hess_v;
    });
    s.W = exchange_subspace(s.W, s.latents, s.residuals, hess, kernel_, s.lambda.mean(), c.weights,
                            c.pcg_tol, c.pcg_max_iter);
  });
  guarded("template", [&] {
    std::vector<ShootingResult> shots(images_.size());
    parallel_for(images_.size(), [&](std::size_t n) {
      shots[n] = shoot(s.W.combine(s.latents[n].z) + s.residuals[n].r, kernel_, c.steps);
    });
    std::vector<TemplateSubject> subs;
    for (std::size_t n = 0; n < images_.size(); ++n) subs.push_back({&images_[n], &shots[n].inverse});
    s.templ = update_template(s.templ, subs, c.dirichlet_eps);
  });
  std::seed_seq seq{c.seed, static_cast<std::uint64_t>(rep.iteration)};
  std::mt19937_64 rng(seq);
  guarded("orthogonalise", [&] { orthogonalise_and_rescale(rng, rep); });

  ckpt_.iteration = rep.iteration;
  ckpt_.bound_trace.push_back(current);
  rep.bound_after = current;
  converged_ = std::abs(current - rep.bound_before) <= c.bound_tol * std::abs(current);
  return rep;
}

void Trainer::run(const std::function<void(const IterationReport&)>& progress) {
  while (ckpt_.iteration < ckpt_.config.max_iter && !converged_) {
    const IterationReport r = iterate();
    if (progress) progress(r);
  }
}

// ---- registration and export ----------------------------------------------

Registration register_subject(const Checkpoint& ckpt, const SpectralKernel& kernel,
                              const Field& image, const LatentPosterior* z0,
                              const ResidualPosterior* r0) {
  const PipelineConfig& c = ckpt.config;
  check_lattice(image, ckpt.state.templ, "register");
  const GlobalSnapshot g = snapshot(ckpt, kernel);
  const int M = ckpt.state.W.size();
  const DataTerm data = categorical_term(image, ckpt.state.templ, kernel, c.steps);

  Registration out;
  out.z = z0 ? *z0 : LatentPosterior{Eigen::VectorXd::Zero(M), Eigen::MatrixXd::Zero(M, M)};
  out.r = r0 ? *r0 : ResidualPosterior::zero(image.lattice());
  if (out.z.z.size() != M) throw DataError("register: initial latent has the wrong size");
  DataTermDerivs cur = data(ckpt.state.W.combine(out.z.z) + out.r.r, true);
  double f = subject_objective(g, data, out.z.z, out.r.r);
  for (out.sweeps = 0; out.sweeps < c.register_sweeps;) {
    StepReport zr, rr;
    out.z = update_latent(g, data, out.z, out.r.r, cur, &zr);
    out.r = update_residual(g, data, out.r, out.z.z, cur, &rr);
    ++out.sweeps;
    const double next = std::min(rr.after, zr.after);
    const bool stalled = f - next <= c.register_tol * std::abs(next);
    f = next;
    if (stalled) break;
  }
  out.objective = f;
  out.loglik = -cur.energy;
  return out;
}

double training_loglik(const Checkpoint& ckpt, const SpectralKernel& kernel, const Field& image,
                       std::size_t n) {
  const ModelState& s = ckpt.state;
  const DataTerm data = categorical_term(image, s.templ, kernel, ckpt.config.steps);
  return -data(s.W.combine(s.latents.at(n).z) + s.residuals.at(n).r, false).energy;
}

void export_template(const Checkpoint& ckpt, const fs::path& dir) {
  fs::create_directories(dir);
  const Field mu = softmax(ckpt.state.templ);
  const std::string tag = "template_M" + std::to_string(ckpt.state.W.size());
  for (int k = 0; k < mu.channels(); ++k) {
    write_pgm((dir / (tag + "_class" + std::to_string(k) + ".pgm")).string(), mu, k);
  }
  save_field(dir / (tag + ".gshfld"), mu, json{{"role", "template probabilities"}});
}

Field shot_template(const Checkpoint& ckpt, const SpectralKernel& kernel, const Field& v) {
  const ShootingResult shot = shoot(v, kernel, ckpt.config.steps);
  return warp_template(ckpt.state.templ, shot.inverse);
}

void export_modes(const Checkpoint& ckpt, const SpectralKernel& kernel, const fs::path& dir,
                  const std::vector<int>& modes, const std::vector<double>& sigmas) {
  fs::create_directories(dir);
  const Subspace& W = ckpt.state.W;
  const Eigen::MatrixXd cov = ckpt.state.A.mean().inverse();
  for (int m : modes) {
    if (m < 0 || m >= W.size()) throw DataError("export: no mode " + std::to_string(m));
    for (double s : sigmas) {
      const Field v = (s * std::sqrt(cov(m, m))) * W.mode(m);
      const Field mu = shot_template(ckpt, kernel, v);
      char tag[64];
      std::snprintf(tag, sizeof tag, "mode%d_%+gsd", m, s);
      for (int k = 0; k < mu.channels(); ++k) {
        write_pgm((dir / (std::string(tag) + "_class" + std::to_string(k) + ".pgm")).string(), mu, k);
      }
      save_field(dir / (std::string(tag) + ".gshfld"), mu, json{{"mode", m}, {"sigma", s}});
    }
  }
}

void export_latents(const Checkpoint& ckpt, const fs::path& path) {
  std::ofstream os(path);
  os << "subject_id";
  const int M = ckpt.state.W.size();
  for (int m = 1; m <= M; ++m) os << ",z_" << m;
  os << '\n';
  os.precision(17);
  for (std::size_t n = 0; n < ckpt.ids.size(); ++n) {
    os << ckpt.ids[n];
    for (int m = 0; m < M; ++m) os << ',' << ckpt.state.latents[n].z[m];
    os << '\n';
  }
  if (!os) throw DataError("cannot write " + path.string());
}

void export_fits(const Checkpoint& ckpt, const SpectralKernel& kernel, const Dataset& data,
                 const fs::path& path) {
  std::vector<double> fits(data.subjects.size());
  parallel_for(fits.size(), [&](std::size_t n) {
    fits[n] = register_subject(ckpt, kernel, data.subjects[n].image).loglik;
  });
  std::ofstream os(path);
  os << "subject_id,split,loglik\n";
  os.precision(17);
  for (std::size_t n = 0; n < fits.size(); ++n) {
    os << data.subjects[n].id << ',' << data.subjects[n].split << ',' << fits[n] << '\n';
  }
  if (!os) throw DataError("cannot write " + path.string());
}

namespace {

// Angles from the cross Gram matrix C = <a_i, b_j> and the two Gram matrices.
std::vector<double> angles_from_grams(const Eigen::MatrixXd& C, const Eigen::MatrixXd& Ga,
                                      const Eigen::MatrixXd& Gb) {
  const Eigen::MatrixXd Ra = Eigen::LLT<Eigen::MatrixXd>(Ga).matrixU();
  const Eigen::MatrixXd Rb = Eigen::LLT<Eigen::MatrixXd>(Gb).matrixU();
  const Eigen::MatrixXd X = Ra.transpose().triangularView<Eigen::Lower>().solve(C) * Rb.inverse();
  const Eigen::VectorXd s = Eigen::JacobiSVD<Eigen::MatrixXd>(X).singularValues();
  std::vector<double> out;
  for (Eigen::Index i = 0; i < s.size(); ++i) {
    out.push_back(std::acos(std::clamp(s[i], -1.0, 1.0)) * 180 / std::numbers::pi);
  }
  return out;
}

std::vector<double> angles(const std::vector<Field>& A, const std::vector<Field>& B,
                           const std::vector<Field>& MB, const std::vector<Field>& MA) {
  const auto na = static_cast<Eigen::Index>(A.size()), nb = static_cast<Eigen::Index>(B.size());
  Eigen::MatrixXd C(na, nb), Ga(na, na), Gb(nb, nb);
  for (Eigen::Index i = 0; i < na; ++i) {
    for (Eigen::Index j = 0; j < nb; ++j) C(i, j) = dot(A[i], MB[j]);
    for (Eigen::Index j = 0; j < na; ++j) Ga(i, j) = dot(A[i], MA[j]);
  }
  for (Eigen::Index i = 0; i < nb; ++i) {
    for (Eigen::Index j = 0; j < nb; ++j) Gb(i, j) = dot(B[i], MB[j]);
  }
  return angles_from_grams(C, 0.5 * (Ga + Ga.transpose()), 0.5 * (Gb + Gb.transpose()));
}

}  // namespace

std::vector<double> principal_angles(const std::vector<Field>& A, const std::vector<Field>& B,
                                     const SpectralKernel& kernel) {
  std::vector<Field> LA, LB;
  for (const auto& f : A) LA.push_back(kernel.apply(f));
  for (const auto& f : B) LB.push_back(kernel.apply(f));
  return angles(A, B, LB, LA);
}

std::vector<double> principal_angles(const std::vector<Field>& A, const std::vector<Field>& B) {
  return angles(A, B, B, A);
}

}  // namespace gsh
