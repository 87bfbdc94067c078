#include <omp.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include <doctest.h>

#include "gsh/error.hpp"
#include "gsh/pipeline.hpp"
#include "gsh/shooting.hpp"
#include "gsh/template.hpp"

using namespace gsh;
namespace fs = std::filesystem;

namespace {

PipelineConfig tiny_config() {
  PipelineConfig c;
  c.M = 2;
  c.max_iter = 2;
  c.subject_sweeps = 1;
  c.register_sweeps = 6;
  c.pcg_max_iter = 16;
  c.seed = 5;
  c.synth.dims = {16, 16};
  c.synth.blob_radius = 5;
  c.synth.mode_sd = {1.5, 1.0};
  c.synth.train = 4;
  c.synth.test = 2;
  return c;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("gsh_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::vector<Field> train_images(const Dataset& d, std::vector<std::string>& ids) {
  std::vector<Field> out;
  for (const Subject* s : d.split("train")) {
    out.push_back(s->image);
    ids.push_back(s->id);
  }
  return out;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

// Every file under a, byte for byte equal to the one under b.
bool same_tree(const fs::path& a, const fs::path& b) {
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file()) continue;
    ++files;
    const fs::path other = b / fs::relative(e.path(), a);
    if (!fs::exists(other) || slurp(e.path()) != slurp(other)) return false;
  }
  std::size_t files_b = 0;
  for (const auto& e : fs::recursive_directory_iterator(b)) files_b += e.is_regular_file();
  return files > 0 && files == files_b;
}

double max_abs(const Field& f) {
  double m = 0;
  for (double x : f.values()) m = std::max(m, std::abs(x));
  return m;
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::ifstream is(p);
  std::vector<std::vector<std::string>> rows;
  for (std::string line; std::getline(is, line);) {
    std::vector<std::string> cells;
    std::stringstream ls(line);
    for (std::string c; std::getline(ls, c, ',');) cells.push_back(c);
    rows.push_back(cells);
  }
  return rows;
}

void check_same_state(const Checkpoint& a, const Checkpoint& b, double tol) {
  CHECK(a.iteration == b.iteration);
  REQUIRE(a.bound_trace.size() == b.bound_trace.size());
  for (std::size_t i = 0; i < a.bound_trace.size(); ++i) {
    CHECK(std::abs(a.bound_trace[i] - b.bound_trace[i]) <= tol * std::abs(b.bound_trace[i]));
  }
  CHECK(max_abs(a.state.templ - b.state.templ) <= tol);
  for (int m = 0; m < a.state.W.size(); ++m) {
    CHECK(max_abs(a.state.W.mode(m) - b.state.W.mode(m)) <= tol * (1 + max_abs(b.state.W.mode(m))));
  }
  for (std::size_t n = 0; n < a.state.latents.size(); ++n) {
    CHECK((a.state.latents[n].z - b.state.latents[n].z).cwiseAbs().maxCoeff() <= tol);
    CHECK(max_abs(a.state.residuals[n].r - b.state.residuals[n].r) <= tol);
  }
  CHECK(std::abs(a.state.lambda.mean() - b.state.lambda.mean()) <= tol * b.state.lambda.mean());
}

}  // namespace

TEST_CASE("config text round-trips exactly") {
  PipelineConfig c = tiny_config();
  c.metric.bending = 0.1 / 3;
  c.lambda0 = 1.0 / 7;
  c.uncertainty = ResidualUncertainty::none;
  c.storage = StorageType::f32;
  c.synth.steps = 12;
  const PipelineConfig back = parse_config(format_config(c));
  CHECK(config_entries(back) == config_entries(c));
  CHECK(back.metric.bending == c.metric.bending);
  CHECK(back.lambda0 == c.lambda0);
  CHECK(back.synth.steps == 12);
}

TEST_CASE("config parser rejects malformed input") {
  CHECK(parse_config("# comment only\n\nM = 3  # trailing\n").M == 3);
  CHECK_THROWS_AS(parse_config("nonsense = 1\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("M = 2\nM = 3\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("M = two\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("M = 2.5\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("K = 1\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("M\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("gamma1 = -1\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("residual_uncertainty = full\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("synth.modes = 3\n"), ConfigError);  // mode_sd has two entries
  CHECK_THROWS_AS(load_config("/nonexistent/gsh.cfg"), ConfigError);
}

TEST_CASE("latent samples have covariance A^-1") {
  Eigen::MatrixXd A(2, 2);
  A << 4, 1, 1, 2;
  const Eigen::MatrixXd target = A.inverse();
  std::mt19937_64 rng(11);
  const int n = 10000;
  Eigen::MatrixXd C = Eigen::MatrixXd::Zero(2, 2);
  for (int i = 0; i < n; ++i) {
    const Eigen::VectorXd z = sample_latent(A, rng);
    C += z * z.transpose();
  }
  C /= n;
  CHECK(std::abs(C(0, 0) - target(0, 0)) <= 0.05 * target(0, 0));
  CHECK(std::abs(C(1, 1) - target(1, 1)) <= 0.05 * target(1, 1));
  CHECK(std::abs(C(0, 1) - target(0, 1)) <= 0.05 * std::sqrt(target(0, 0) * target(1, 1)));
}

TEST_CASE("residual samples have E[r^T L r] = dI / lambda") {
  const Lattice lat({16, 16});
  const SpectralKernel kernel(lat, MetricParams{});
  std::mt19937_64 rng(3);
  const double lambda = 40;
  const int draws = 40;
  double e = 0;
  for (int i = 0; i < draws; ++i) {
    const Field r = sample_residual(kernel, lambda, rng);
    e += dot(r, kernel.apply(r));
  }
  e /= draws;
  const double dI = 2.0 * lat.size();
  CHECK(std::abs(e * lambda / dI - 1) <= 0.05);

  // Very precise residuals vanish.
  CHECK(max_abs(sample_residual(kernel, 1e14, rng)) < 1e-4);
}

TEST_CASE("categorical samples follow the probabilities") {
  const Lattice lat({64, 64});
  Field p(lat, 3);
  for (std::size_t i = 0; i < lat.size(); ++i) {
    p(i, 0) = 0.2;
    p(i, 1) = 0.5;
    p(i, 2) = 0.3;
  }
  std::mt19937_64 rng(9);
  const Field f = sample_categorical(p, rng);
  std::vector<double> freq(3, 0);
  for (std::size_t i = 0; i < lat.size(); ++i) {
    double row = 0;
    for (int k = 0; k < 3; ++k) {
      freq[k] += f(i, k);
      row += f(i, k);
    }
    REQUIRE(row == 1);
  }
  // Binomial sd at n = 4096 is below 0.008.
  CHECK(std::abs(freq[0] / lat.size() - 0.2) < 0.03);
  CHECK(std::abs(freq[1] / lat.size() - 0.5) < 0.03);
  CHECK(std::abs(freq[2] / lat.size() - 0.3) < 0.03);
}

TEST_CASE("synthetic truth modes are L-orthonormal with the requested spread") {
  const PipelineConfig c = tiny_config();
  const SyntheticTruth t = synthetic_truth(c);
  const SpectralKernel kernel(t.templ.lattice(), c.metric);
  const Eigen::MatrixXd G = t.W.gram(kernel);
  CHECK((G - Eigen::MatrixXd::Identity(2, 2)).cwiseAbs().maxCoeff() < 1e-10);
  for (int m = 0; m < 2; ++m) {
    double peak = 0;
    const Field& w = t.W.mode(m);
    for (std::size_t i = 0; i < w.voxels(); ++i) peak = std::max(peak, std::hypot(w(i, 0), w(i, 1)));
    CHECK(peak / std::sqrt(t.A(m, m)) == doctest::Approx(c.synth.mode_sd[m]).epsilon(1e-12));
  }
  // The template is a normalised log-probability up to a per-voxel constant.
  const Field mu = softmax(t.templ);
  for (std::size_t i = 0; i < mu.voxels(); ++i) CHECK(mu(i, 0) + mu(i, 1) == doctest::Approx(1.0));
}

TEST_CASE("datasets and checkpoints round-trip bit-exactly") {
  const PipelineConfig c = tiny_config();
  SyntheticTruth truth;
  const Dataset d = synthesise(c, truth, 21);
  REQUIRE(d.subjects.size() == 6);
  CHECK(d.split("train").size() == 4);
  CHECK(d.split("test").size() == 2);

  const fs::path dir = scratch("roundtrip");
  save_dataset(dir / "data", d);
  const Dataset back = load_dataset(dir / "data");
  REQUIRE(back.subjects.size() == d.subjects.size());
  for (std::size_t n = 0; n < d.subjects.size(); ++n) {
    CHECK(back.subjects[n].id == d.subjects[n].id);
    CHECK(back.subjects[n].split == d.subjects[n].split);
    CHECK(back.subjects[n].image == d.subjects[n].image);
  }

  std::vector<std::string> ids;
  Trainer tr(c, ids, train_images(d, ids));
  tr.iterate();
  save_checkpoint(dir / "ck", tr.checkpoint());
  const Checkpoint ck = load_checkpoint(dir / "ck");
  check_same_state(ck, tr.checkpoint(), 0.0);
  CHECK(ck.ids == tr.checkpoint().ids);
  CHECK(config_entries(ck.config) == config_entries(c));
  CHECK(ck.state.A.dof == tr.checkpoint().state.A.dof);
  CHECK(ck.state.A.V == tr.checkpoint().state.A.V);
  CHECK(ck.state.lambda.alpha == tr.checkpoint().state.lambda.alpha);
  CHECK(ck.state.lambda.beta == tr.checkpoint().state.lambda.beta);
  for (std::size_t n = 0; n < ck.state.latents.size(); ++n) {
    CHECK(ck.state.latents[n].S == tr.checkpoint().state.latents[n].S);
    CHECK(ck.state.residuals[n].cov == tr.checkpoint().state.residuals[n].cov);
    CHECK(ck.state.residuals[n].expected_energy == tr.checkpoint().state.residuals[n].expected_energy);
  }

  // Saving what was loaded reproduces the same files.
  save_checkpoint(dir / "ck2", ck);
  CHECK(same_tree(dir / "ck", dir / "ck2"));

  CHECK_THROWS_AS(load_dataset(dir / "missing"), DataError);
  CHECK_THROWS_AS(load_checkpoint(dir / "missing"), DataError);
}

TEST_CASE("resuming from a checkpoint equals an uninterrupted run") {
  const PipelineConfig c = tiny_config();
  SyntheticTruth truth;
  const Dataset d = synthesise(c, truth, 4);

  std::vector<std::string> ids;
  Trainer whole(c, ids, train_images(d, ids));
  whole.iterate();
  whole.iterate();
  CHECK(whole.checkpoint().bound_trace[1] >= whole.checkpoint().bound_trace[0]);
  CHECK(whole.checkpoint().bound_trace[2] >= whole.checkpoint().bound_trace[1]);

  const fs::path dir = scratch("resume");
  std::vector<std::string> ids2;
  {
    Trainer first(c, ids2, train_images(d, ids2));
    first.iterate();
    save_checkpoint(dir, first.checkpoint());
  }
  std::vector<std::string> ids3;
  Trainer resumed(load_checkpoint(dir), train_images(d, ids3));
  resumed.iterate();
  check_same_state(resumed.checkpoint(), whole.checkpoint(), 1e-12);
}

TEST_CASE("trainer rejects inconsistent inputs") {
  const PipelineConfig c = tiny_config();
  SyntheticTruth truth;
  const Dataset d = synthesise(c, truth, 2);
  std::vector<std::string> ids;
  std::vector<Field> images = train_images(d, ids);
  CHECK_THROWS_AS(Trainer(c, {"a"}, {images[0]}), DataError);
  CHECK_THROWS_AS(Trainer(c, {"a", "b", "c"}, {images[0], images[1]}), DataError);
  PipelineConfig k3 = c;
  k3.K = 3;
  CHECK_THROWS_AS(Trainer(k3, ids, images), DataError);
  PipelineConfig wrong = c;
  wrong.dims = {8, 8};
  CHECK_THROWS_AS(Trainer(wrong, ids, images), DataError);
}

TEST_CASE("two identical images need no deformation") {
  PipelineConfig c = tiny_config();
  c.max_iter = 4;
  SyntheticTruth truth;
  const Dataset d = synthesise(c, truth, 8);
  const Field img = d.subjects[0].image;
  Trainer tr(c, {"a", "b"}, {img, img});
  tr.run();
  const ModelState& s = tr.checkpoint().state;
  for (std::size_t n = 0; n < 2; ++n) {
    const Field v = s.W.combine(s.latents[n].z) + s.residuals[n].r;
    CHECK(max_abs(v) < 0.05);
  }
}

TEST_CASE("registration and exports") {
  const PipelineConfig c = tiny_config();
  SyntheticTruth truth;
  const Dataset d = synthesise(c, truth, 13);
  std::vector<std::string> ids;
  Trainer tr(c, ids, train_images(d, ids));
  tr.iterate();
  const Checkpoint& ck = tr.checkpoint();
  const SpectralKernel& kernel = tr.kernel();

  SUBCASE("re-registering from a converged fit is a fixed point") {
    PipelineConfig tight = c;
    tight.register_sweeps = 200;
    tight.register_tol = 1e-14;
    Checkpoint ck2 = ck;
    ck2.config = tight;
    const Field& img = d.split("test")[0]->image;
    const Registration a = register_subject(ck2, kernel, img);
    CHECK(a.loglik <= 0);
    const Registration b = register_subject(ck2, kernel, img, &a.z, &a.r);
    CHECK(std::abs(b.objective - a.objective) <= 1e-8 * std::abs(a.objective));
    CHECK(std::abs(b.loglik - a.loglik) <= 1e-8 * std::abs(a.loglik));
    CHECK((b.z.z - a.z.z).cwiseAbs().maxCoeff() <= 1e-4);
  }

  SUBCASE("zero sigma along a mode is the template") {
    const fs::path dir = scratch("modes");
    export_modes(ck, kernel, dir, {0, 1}, {-1, 0, 1});
    const Field mu = softmax(ck.state.templ);
    const Field at0 = load_field(dir / "mode0_+0sd.gshfld").field;
    CHECK(max_abs(at0 - mu) < 1e-12);
    CHECK(fs::exists(dir / "mode1_-1sd_class0.pgm"));
    CHECK(max_abs(load_field(dir / "mode1_+1sd.gshfld").field - mu) > 1e-6);
    CHECK_THROWS_AS(export_modes(ck, kernel, dir, {5}, {0}), DataError);

    export_template(ck, dir);
    CHECK(max_abs(load_field(dir / "template_M2.gshfld").field - mu) < 1e-12);
    CHECK(fs::exists(dir / "template_M2_class1.pgm"));
  }

  SUBCASE("latents CSV has one row per subject and one column per mode") {
    const fs::path dir = scratch("latents");
    export_latents(ck, dir / "latents.csv");
    const auto rows = read_csv(dir / "latents.csv");
    REQUIRE(rows.size() == ck.ids.size() + 1);
    CHECK(rows[0] == std::vector<std::string>{"subject_id", "z_1", "z_2"});
    for (std::size_t n = 0; n < ck.ids.size(); ++n) {
      REQUIRE(rows[n + 1].size() == 3);
      CHECK(rows[n + 1][0] == ck.ids[n]);
      CHECK(std::stod(rows[n + 1][1]) == ck.state.latents[n].z[0]);
    }
  }

  SUBCASE("fits CSV matches per-subject registration") {
    const fs::path dir = scratch("fits");
    export_fits(ck, kernel, d, dir / "fits.csv");
    const auto rows = read_csv(dir / "fits.csv");
    REQUIRE(rows.size() == d.subjects.size() + 1);
    CHECK(rows[0] == std::vector<std::string>{"subject_id", "split", "loglik"});
    for (std::size_t n = 0; n < d.subjects.size(); ++n) {
      CHECK(rows[n + 1][0] == d.subjects[n].id);
      CHECK(rows[n + 1][1] == d.subjects[n].split);
      CHECK(std::stod(rows[n + 1][2]) == register_subject(ck, kernel, d.subjects[n].image).loglik);
    }
  }
}

TEST_CASE("principal angles") {
  const PipelineConfig c = tiny_config();
  const SyntheticTruth t = synthetic_truth(c);
  const SpectralKernel kernel(t.templ.lattice(), c.metric);
  const std::vector<Field> A{t.W.mode(0), t.W.mode(1)};
  // A mixed basis of the same span has zero angles.
  const std::vector<Field> B{t.W.mode(0) + t.W.mode(1), 2.0 * t.W.mode(1) - t.W.mode(0)};
  for (double a : principal_angles(A, B)) CHECK(a < 1e-5);
  for (double a : principal_angles(A, B, kernel)) CHECK(a < 1e-5);
  // One shared mode, one L-orthogonal one.
  const std::vector<Field> C{t.W.mode(0)}, D{t.W.mode(0)}, E{t.W.mode(1)};
  CHECK(principal_angles(C, D, kernel)[0] < 1e-5);
  CHECK(principal_angles(C, E, kernel)[0] == doctest::Approx(90).epsilon(1e-6));
}

TEST_CASE("training is deterministic across thread counts") {
  const PipelineConfig c = tiny_config();
  SyntheticTruth truth;
  const Dataset d = synthesise(c, truth, 17);
  const fs::path dir = scratch("threads");
  const int saved = omp_get_max_threads();
  for (int threads : {1, 4}) {
    omp_set_num_threads(threads);
    std::vector<std::string> ids;
    Trainer tr(c, ids, train_images(d, ids));
    tr.iterate();
    save_checkpoint(dir / std::to_string(threads), tr.checkpoint());
  }
  omp_set_num_threads(saved);
  CHECK(same_tree(dir / "1", dir / "4"));
}

#ifdef GSH_CLI_PATH
TEST_CASE("command-line exit codes") {
  const fs::path dir = scratch("cli");
  const std::string cli = GSH_CLI_PATH;
  auto run = [&](const std::string& args) {
    const int status = std::system((cli + " " + args + " >" + (dir / "log").string() + " 2>&1").c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  };
  std::ofstream(dir / "ok.cfg") << format_config(tiny_config());
  std::ofstream(dir / "bad.cfg") << "K = 1\n";
  std::ofstream(dir / "unknown.cfg") << "colour = blue\n";
  const std::string ok = (dir / "ok.cfg").string();

  CHECK(run("") == 1);
  CHECK(run("frobnicate") == 1);
  CHECK(run("synthesise --config " + (dir / "bad.cfg").string() + " --out " + (dir / "x").string()) == 2);
  CHECK(run("synthesise --config " + (dir / "unknown.cfg").string() + " --out " + (dir / "x").string()) == 2);
  REQUIRE(run("synthesise --config " + ok + " --out " + (dir / "data").string() + " --seed 3") == 0);
  CHECK(fs::exists(dir / "data" / "manifest.json"));
  CHECK(fs::exists(dir / "data" / "truth" / "truth.json"));

  std::ofstream(dir / "one.cfg") << "M = 2\nmax_iter = 1\nsubject_sweeps = 1\n";
  const std::string train = "train --config " + (dir / "one.cfg").string() + " --data " + (dir / "data").string() +
                            " --checkpoint " + (dir / "ck").string();
  CHECK(run(train) == 0);
  CHECK(load_checkpoint(dir / "ck").iteration == 1);
  CHECK(run("export latents --checkpoint " + (dir / "ck").string() + " --out " + (dir / "out").string()) == 0);
  CHECK(fs::exists(dir / "out" / "latents.csv"));
  CHECK(run("export modes --checkpoint " + (dir / "ck").string() + " --out " + (dir / "out").string() +
            " --modes 7") == 3);

  // Corrupt data: manifest pointing at a missing file.
  fs::create_directories(dir / "broken");
  std::ofstream(dir / "broken" / "manifest.json") << R"({"subjects": [{"id": "a", "path": "nope.gshfld"}]})";
  CHECK(run("train --data " + (dir / "broken").string() + " --checkpoint " + (dir / "ck2").string()) == 3);
  CHECK(run("register --checkpoint " + (dir / "ck").string()) == 3);
}
#endif
