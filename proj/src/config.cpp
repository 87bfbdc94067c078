#include "gsh/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include "gsh/error.hpp"

namespace gsh {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> words(const std::string& s) {
  std::istringstream is(s);
  std::vector<std::string> out;
  for (std::string w; is >> w;) out.push_back(w);
  return out;
}

template <class T>
T number(const std::string& key, const std::string& s) {
  T v{};
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) {
    throw ConfigError("config: bad value '" + s + "' for " + key);
  }
  return v;
}

template <class T>
std::string show(T v) {
  char buf[64];
  const auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);  // shortest round-trip form
  return std::string(buf, p);
}

template <class T>
std::string show_list(const std::vector<T>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? " " : "") + show(v[i]);
  return s;
}

template <class T>
std::vector<T> number_list(const std::string& key, const std::string& s) {
  std::vector<T> out;
  for (const auto& w : words(s)) out.push_back(number<T>(key, w));
  return out;
}

struct Entry {
  std::function<std::string()> get;
  std::function<void(const std::string&)> set;
};

template <class T>
Entry scalar(const std::string& key, T& x) {
  return {[&x] { return show(x); }, [&x, key](const std::string& s) { x = number<T>(key, s); }};
}

template <class T>
Entry list(const std::string& key, std::vector<T>& x) {
  return {[&x] { return show_list(x); },
          [&x, key](const std::string& s) { x = number_list<T>(key, s); }};
}

std::map<std::string, Entry> table(PipelineConfig& c) {
  std::map<std::string, Entry> t;
  t["dims"] = list("dims", c.dims);
  t["K"] = scalar("K", c.K);
  t["M"] = scalar("M", c.M);
  t["metric.membrane"] = scalar("metric.membrane", c.metric.membrane);
  t["metric.bending"] = scalar("metric.bending", c.metric.bending);
  t["metric.elastic_div"] = scalar("metric.elastic_div", c.metric.elastic_div);
  t["metric.elastic_shear"] = scalar("metric.elastic_shear", c.metric.elastic_shear);
  t["metric.absolute"] = scalar("metric.absolute", c.metric.absolute);
  t["gamma1"] = scalar("gamma1", c.weights.gamma1);
  t["gamma2"] = scalar("gamma2", c.weights.gamma2);
  t["lambda0"] = scalar("lambda0", c.lambda0);
  t["nu0"] = scalar("nu0", c.nu0);
  t["dirichlet_eps"] = scalar("dirichlet_eps", c.dirichlet_eps);
  t["steps"] = scalar("steps", c.steps);
  t["max_iter"] = scalar("max_iter", c.max_iter);
  t["bound_tol"] = scalar("bound_tol", c.bound_tol);
  t["subject_sweeps"] = scalar("subject_sweeps", c.subject_sweeps);
  t["register_sweeps"] = scalar("register_sweeps", c.register_sweeps);
  t["register_tol"] = scalar("register_tol", c.register_tol);
  t["pcg_tol"] = scalar("pcg_tol", c.pcg_tol);
  t["pcg_max_iter"] = scalar("pcg_max_iter", c.pcg_max_iter);
  t["seed"] = scalar("seed", c.seed);
  t["residual_uncertainty"] = {
      [&c] { return std::string(c.uncertainty == ResidualUncertainty::none ? "none" : "diagonal"); },
      [&c](const std::string& s) {
        if (s == "none") c.uncertainty = ResidualUncertainty::none;
        else if (s == "diagonal") c.uncertainty = ResidualUncertainty::diagonal;
        else throw ConfigError("config: residual_uncertainty must be none or diagonal");
      }};
  t["storage"] = {[&c] { return to_string(c.storage); },
                  [&c](const std::string& s) {
                    try {
                      c.storage = parse_storage_type(s);
                    } catch (const Error& e) {
                      throw ConfigError(std::string("config: ") + e.what());
                    }
                  }};
  t["synth.dims"] = list("synth.dims", c.synth.dims);
  t["synth.modes"] = scalar("synth.modes", c.synth.modes);
  t["synth.lambda"] = scalar("synth.lambda", c.synth.lambda);
  t["synth.mode_sd"] = list("synth.mode_sd", c.synth.mode_sd);
  t["synth.blob_radius"] = scalar("synth.blob_radius", c.synth.blob_radius);
  t["synth.blob_sharpness"] = scalar("synth.blob_sharpness", c.synth.blob_sharpness);
  t["synth.steps"] = scalar("synth.steps", c.synth.steps);
  t["synth.train"] = scalar("synth.train", c.synth.train);
  t["synth.test"] = scalar("synth.test", c.synth.test);
  return t;
}

}  // namespace

void PipelineConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("config: " + m); };
  if (!dims.empty()) {
    try {
      Lattice(dims).validate();
    } catch (const Error& e) {
      fail(std::string("dims: ") + e.what());
    }
  }
  if (K < 2) fail("K must be at least 2");
  if (M < 1) fail("M must be at least 1");
  metric.validate();
  weights.validate();
  if (!(lambda0 > 0) || !(nu0 > 0)) fail("lambda0 and nu0 must be positive");
  if (!(dirichlet_eps >= 0)) fail("dirichlet_eps must be non-negative");
  if (steps < 1) fail("steps must be positive");
  if (max_iter < 0) fail("max_iter must be non-negative");
  if (!(bound_tol >= 0)) fail("bound_tol must be non-negative");
  if (subject_sweeps < 1 || register_sweeps < 1) fail("sweep counts must be positive");
  if (!(pcg_tol > 0) || pcg_max_iter < 1) fail("bad PCG settings");
  if (synth.modes < 1) fail("synth.modes must be positive");
  if (static_cast<int>(synth.mode_sd.size()) != synth.modes) {
    fail("synth.mode_sd needs one entry per synthetic mode");
  }
  if (!(synth.lambda > 0)) fail("synth.lambda must be positive");
  if (synth.dims.size() != 2) fail("synth.dims: the generator draws 2D populations");
  if (synth.steps < 1) fail("synth.steps must be positive");
  if (synth.train < 0 || synth.test < 0) fail("synth subject counts must be non-negative");
}

PipelineConfig parse_config(const std::string& text) {
  PipelineConfig cfg;
  auto t = table(cfg);
  std::set<std::string> seen;
  std::istringstream is(text);
  int lineno = 0;
  for (std::string line; std::getline(is, line);) {
    ++lineno;
    if (const auto h = line.find('#'); h != std::string::npos) line.resize(h);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    const auto it = t.find(key);
    if (it == t.end()) throw ConfigError("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    if (!seen.insert(key).second) throw ConfigError("config: key '" + key + "' given twice");
    it->second.set(value);
  }
  cfg.validate();
  return cfg;
}

PipelineConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str());
}

std::map<std::string, std::string> config_entries(const PipelineConfig& cfg) {
  PipelineConfig copy = cfg;
  std::map<std::string, std::string> out;
  for (const auto& [k, e] : table(copy)) out[k] = e.get();
  return out;
}

std::string format_config(const PipelineConfig& cfg) {
  std::string s;
  for (const auto& [k, v] : config_entries(cfg)) s += k + " = " + v + "\n";
  return s;
}

}  // namespace gsh
