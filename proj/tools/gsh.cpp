// Command-line front end: synthesise, train, register, export.
//
// Exit codes: 0 ok, 1 usage, 2 configuration, 3 data, 4 numerical abort.

#include <omp.h>

#include <cstdio>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "gsh/error.hpp"
#include "gsh/pipeline.hpp"

namespace fs = std::filesystem;
using namespace gsh;

namespace {

enum Exit { kOk = 0, kUsage = 1, kConfig = 2, kData = 3, kNumerical = 4 };

struct Options {
  std::string config, data, checkpoint, out, image, what;
  std::uint64_t seed = 0;
  bool seed_given = false;
  int workers = 0;
  bool resume = false;
  std::vector<int> modes{0, 1};
  std::vector<double> sigmas{-2, -1, 0, 1, 2};
};

PipelineConfig config_from(const Options& o) {
  PipelineConfig c = o.config.empty() ? PipelineConfig{} : load_config(o.config);
  if (o.seed_given) c.seed = o.seed;
  c.validate();
  return c;
}

std::vector<Field> images_of(const std::vector<const Subject*>& subs, std::vector<std::string>* ids) {
  std::vector<Field> out;
  for (const Subject* s : subs) {
    out.push_back(s->image);
    if (ids) ids->push_back(s->id);
  }
  return out;
}

int cmd_synthesise(const Options& o) {
  const PipelineConfig cfg = config_from(o);
  SyntheticTruth truth;
  const Dataset data = synthesise(cfg, truth, cfg.seed);
  save_dataset(o.out, data, cfg.storage);
  save_truth(fs::path(o.out) / "truth", truth, data);
  std::ofstream(fs::path(o.out) / "synth.cfg") << format_config(cfg);
  std::cerr << "wrote " << data.subjects.size() << " subjects to " << o.out << '\n';
  return kOk;
}

int cmd_train(const Options& o) {
  const Dataset data = load_dataset(o.data);
  std::vector<std::string> ids;
  std::vector<Field> images = images_of(data.split("train"), &ids);

  std::unique_ptr<Trainer> trainer;
  if (o.resume) {
    Checkpoint ck = load_checkpoint(o.checkpoint);
    if (ck.ids != ids) throw DataError("--resume: dataset subjects differ from the checkpoint");
    trainer = std::make_unique<Trainer>(std::move(ck), std::move(images));
  } else {
    trainer = std::make_unique<Trainer>(config_from(o), ids, std::move(images));
  }
  std::fprintf(stderr, "iter %3d  bound % .10e\n", trainer->checkpoint().iteration,
               trainer->checkpoint().bound_trace.back());
  try {
    trainer->run([&](const IterationReport& r) {
      std::fprintf(stderr, "iter %3d  bound % .10e", r.iteration, r.bound_after);
      for (const auto& p : r.rejected) std::fprintf(stderr, "  [%s kept]", p.c_str());
      if (r.reinitialised_modes) std::fprintf(stderr, "  [%d modes reinitialised]", r.reinitialised_modes);
      std::fputc('\n', stderr);
      save_checkpoint(o.checkpoint, trainer->checkpoint());
    });
  } catch (const NumericalError& e) {
    const fs::path dump = fs::path(o.checkpoint) / "abort";
    save_checkpoint(dump, trainer->checkpoint());
    std::ofstream(dump / "reason.txt") << e.what() << '\n';
    std::cerr << "state at abort written to " << dump << '\n';
    throw;
  }
  save_checkpoint(o.checkpoint, trainer->checkpoint());
  std::cerr << (trainer->converged() ? "converged" : "iteration cap reached") << " after "
            << trainer->checkpoint().iteration << " iterations\n";
  return kOk;
}

int cmd_register(const Options& o) {
  const Checkpoint ck = load_checkpoint(o.checkpoint);
  const SpectralKernel kernel(ck.state.templ.lattice(), ck.config.metric);
  std::vector<std::pair<std::string, Field>> subjects;
  if (!o.image.empty()) subjects.emplace_back(fs::path(o.image).stem().string(), load_field(o.image).field);
  if (!o.data.empty()) {
    for (auto& s : load_dataset(o.data).subjects) subjects.emplace_back(s.id, std::move(s.image));
  }
  if (subjects.empty()) throw DataError("register: give --image or --data");

  std::vector<Registration> regs(subjects.size());
  for (std::size_t n = 0; n < subjects.size(); ++n) regs[n] = register_subject(ck, kernel, subjects[n].second);

  std::ofstream file;
  if (!o.out.empty()) file.open(o.out);
  std::ostream& os = o.out.empty() ? std::cout : file;
  os.precision(17);
  os << "subject_id,loglik";
  for (int m = 1; m <= ck.state.W.size(); ++m) os << ",z_" << m;
  os << '\n';
  for (std::size_t n = 0; n < regs.size(); ++n) {
    os << subjects[n].first << ',' << regs[n].loglik;
    for (Eigen::Index m = 0; m < regs[n].z.z.size(); ++m) os << ',' << regs[n].z.z[m];
    os << '\n';
  }
  if (!os) throw DataError("register: cannot write output");
  return kOk;
}

int cmd_export(const Options& o) {
  const Checkpoint ck = load_checkpoint(o.checkpoint);
  const SpectralKernel kernel(ck.state.templ.lattice(), ck.config.metric);
  fs::create_directories(o.out);
  if (o.what == "template") {
    export_template(ck, o.out);
  } else if (o.what == "modes") {
    export_modes(ck, kernel, o.out, o.modes, o.sigmas);
  } else if (o.what == "latents") {
    export_latents(ck, fs::path(o.out) / "latents.csv");
  } else if (o.what == "fits") {
    if (o.data.empty()) throw DataError("export fits: --data is required");
    export_fits(ck, kernel, load_dataset(o.data), fs::path(o.out) / "fits.csv");
  } else {
    throw DataError("unknown export target " + o.what);
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Generative shape model: learn a principal subspace of initial velocities"};
  app.require_subcommand(1);
  Options o;
  int workers = 0;
  app.add_option("--workers", workers, "OpenMP threads (0: runtime default)")->check(CLI::NonNegativeNumber);

  auto seed_opt = [&](CLI::App* c) {
    c->add_option("--seed", o.seed, "overrides the config seed")->each([&](const std::string&) { o.seed_given = true; });
  };

  CLI::App* synth = app.add_subcommand("synthesise", "draw a synthetic population with known truth");
  synth->add_option("--config", o.config, "config file")->check(CLI::ExistingFile);
  synth->add_option("--out", o.out, "dataset directory")->required();
  seed_opt(synth);

  CLI::App* train = app.add_subcommand("train", "fit the model to the training split");
  train->add_option("--config", o.config, "config file")->check(CLI::ExistingFile);
  train->add_option("--data", o.data, "dataset directory")->required()->check(CLI::ExistingDirectory);
  train->add_option("--checkpoint", o.checkpoint, "checkpoint directory")->required();
  train->add_flag("--resume", o.resume, "continue from the checkpoint");
  seed_opt(train);

  CLI::App* reg = app.add_subcommand("register", "register subjects under a trained model");
  reg->add_option("--checkpoint", o.checkpoint, "checkpoint directory")->required()->check(CLI::ExistingDirectory);
  reg->add_option("--data", o.data, "dataset directory")->check(CLI::ExistingDirectory);
  reg->add_option("--image", o.image, "single GSHFLD01 image")->check(CLI::ExistingFile);
  reg->add_option("--out", o.out, "CSV output (default stdout)");

  CLI::App* exp = app.add_subcommand("export", "write figure data from a checkpoint");
  exp->add_option("what", o.what, "template | modes | latents | fits")
      ->required()
      ->check(CLI::IsMember({"template", "modes", "latents", "fits"}));
  exp->add_option("--checkpoint", o.checkpoint, "checkpoint directory")->required()->check(CLI::ExistingDirectory);
  exp->add_option("--out", o.out, "output directory")->required();
  exp->add_option("--data", o.data, "dataset directory (fits)")->check(CLI::ExistingDirectory);
  exp->add_option("--modes", o.modes, "modes to shoot along (0-based)");
  exp->add_option("--sigmas", o.sigmas, "multiples of the mode standard deviation");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }
  if (workers > 0) omp_set_num_threads(workers);

  try {
    if (synth->parsed()) return cmd_synthesise(o);
    if (train->parsed()) return cmd_train(o);
    if (reg->parsed()) return cmd_register(o);
    return cmd_export(o);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << '\n';
    return kNumerical;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kData;
  } catch (const std::exception& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kData;
  }
}
