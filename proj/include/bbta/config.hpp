#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "bbta/adaptor.hpp"
#include "bbta/bench.hpp"
#include "bbta/engine.hpp"

namespace bbta {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/**
 * Flat, typed key/value configuration. Files are sectioned INI:
 *
 *   [zoo]
 *   q = 5
 *
 * which defines the dotted key "zoo.q". Overrides use the dotted form
 * directly ("zoo.q=10"). Every key must exist in the default table —
 * unknown keys are rejected — and the effective configuration can be
 * echoed back out byte-for-byte reproducibly.
 */
class Config {
 public:
  Config() : values_(defaults()) {}

  static const std::map<std::string, std::string>& defaults() {
    static const std::map<std::string, std::string> table = {
        {"run.id", ""},              // empty: derived from command and seed
        {"run.seed", "0"},
        {"run.epochs", "150"},
        {"run.batch_size", "256"},
        {"run.workers", "1"},
        {"run.shuffle", "true"},
        {"run.eval_every", "1"},
        {"data.n_train", "4000"},
        {"data.n_test", "1024"},
        {"data.num_classes", "4"},
        {"data.side", "16"},
        {"data.seed", "7"},
        {"data.file", ""},           // optional BBTD input overriding generation
        {"corrupt.kind", "gaussian_noise"},
        {"corrupt.severity", "5"},
        {"corrupt.seed", "11"},
        {"deployed.epochs", "20"},
        {"deployed.batch_size", "64"},
        {"deployed.lr", "0.05"},
        {"deployed.momentum", "0.9"},
        {"deployed.weight_decay", "0.003"},
        {"deployed.conv1_channels", "8"},
        {"deployed.conv2_channels", "16"},
        {"deployed.seed", "3"},
        {"deployed.weights", ""},    // BBTN path; required by adapt/eval commands
        {"adaptor.mode", "residual"},
        {"adaptor.mid_channels", "8"},
        {"adaptor.kernel", "3"},
        {"adaptor.relu_between", "false"},
        {"adaptor.clamp", "true"},
        {"adaptor.clamp_lo", "0"},
        {"adaptor.clamp_hi", "1"},
        {"adaptor.init_scale", "0.05"},
        {"adaptor.weights", ""},     // BBTN path for eval
        {"zoo.q", "5"},
        {"zoo.mu", "1e-3"},
        {"zoo.antithetic", "false"},
        {"optim.eta", "1e-3"},
        {"optim.momentum", "0.9"},
        {"optim.weight_decay", "1e-5"},
        {"objective.alpha", "1e-4"},
        {"objective.beta", "0"},
        {"objective.log_floor", "1e-12"},
        {"select.tau", "0.9"},
        {"select.rho", "0.9"},
        {"online.queue_size", "1000"},
        {"online.epochs_per_batch", "10"},
        {"baseline.method", "da-pl"},
        {"pgd.step_size", "1e-3"},
        {"graderr.trials", "200"},
        {"graderr.flip_rate", "0.4"},
        {"graderr.tau", "0.9"},
        {"graderr.bias_low_confidence", "true"},
        {"graderr.adaptor_mid_channels", "2"},
        {"graderr.n_test", "64"},
    };
    return table;
  }

  void load_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("config: cannot open " + path);
    std::string line, section;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      const std::string s = trim(strip_comment(line));
      if (s.empty()) continue;
      if (s.front() == '[') {
        if (s.back() != ']')
          throw ConfigError("config: " + path + ":" + std::to_string(lineno) + ": bad section");
        section = trim(s.substr(1, s.size() - 2));
        continue;
      }
      const auto eq = s.find('=');
      if (eq == std::string::npos)
        throw ConfigError("config: " + path + ":" + std::to_string(lineno) + ": expected key=value");
      const std::string key =
          (section.empty() ? "" : section + ".") + trim(s.substr(0, eq));
      set(key, trim(s.substr(eq + 1)));
    }
  }

  /// "section.key=value" override; rejects unknown keys like the file path.
  void apply_override(const std::string& spec) {
    const auto eq = spec.find('=');
    if (eq == std::string::npos) throw ConfigError("override must be key=value: " + spec);
    set(trim(spec.substr(0, eq)), trim(spec.substr(eq + 1)));
  }

  void set(const std::string& key, const std::string& value) {
    if (values_.find(key) == values_.end()) throw ConfigError("unknown config key: " + key);
    values_[key] = value;
  }

  const std::string& get_str(const std::string& key) const {
    const auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key: " + key);
    return it->second;
  }

  long long get_int(const std::string& key) const {
    const std::string& v = get_str(key);
    try {
      std::size_t pos = 0;
      const long long x = std::stoll(v, &pos);
      if (pos != v.size()) throw std::invalid_argument(v);
      return x;
    } catch (const std::exception&) {
      throw ConfigError("config key " + key + " expects an integer, got '" + v + "'");
    }
  }

  std::size_t get_size(const std::string& key) const {
    const long long v = get_int(key);
    if (v < 0) throw ConfigError("config key " + key + " must be non-negative");
    return static_cast<std::size_t>(v);
  }

  double get_real(const std::string& key) const {
    const std::string& v = get_str(key);
    try {
      std::size_t pos = 0;
      const double x = std::stod(v, &pos);
      if (pos != v.size()) throw std::invalid_argument(v);
      return x;
    } catch (const std::exception&) {
      throw ConfigError("config key " + key + " expects a number, got '" + v + "'");
    }
  }

  bool get_bool(const std::string& key) const {
    const std::string& v = get_str(key);
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError("config key " + key + " expects a boolean, got '" + v + "'");
  }

  const std::map<std::string, std::string>& values() const { return values_; }

  /// Effective configuration as sectioned INI text (sorted, stable).
  std::string echo() const {
    std::ostringstream os;
    std::string section;
    for (const auto& [key, value] : values_) {
      const auto dot = key.find('.');
      const std::string sec = key.substr(0, dot);
      if (sec != section) {
        if (!section.empty()) os << "\n";
        os << "[" << sec << "]\n";
        section = sec;
      }
      os << key.substr(dot + 1) << " = " << value << "\n";
    }
    return os.str();
  }

  // ---- typed views onto the domain config structs ----

  RunConfig run_config() const {
    RunConfig rc;
    rc.epochs = get_size("run.epochs");
    rc.batch_size = get_size("run.batch_size");
    if (rc.batch_size == 0) throw ConfigError("run.batch_size must be >= 1");
    rc.zoo.q = get_size("zoo.q");
    rc.zoo.mu = get_real("zoo.mu");
    rc.zoo.antithetic = get_bool("zoo.antithetic");
    rc.zoo.seed = get_size("run.seed");
    rc.eta = get_real("optim.eta");
    rc.momentum = get_real("optim.momentum");
    rc.weight_decay = get_real("optim.weight_decay");
    rc.objective.alpha = get_real("objective.alpha");
    rc.objective.beta = get_real("objective.beta");
    rc.objective.log_floor = get_real("objective.log_floor");
    if (rc.objective.alpha < 0 || rc.objective.beta < 0)
      throw ConfigError("objective.alpha and objective.beta must be >= 0");
    if (rc.objective.log_floor <= 0 || rc.objective.log_floor > 1e-6)
      throw ConfigError("objective.log_floor must be in (0, 1e-6]");
    rc.tau = get_real("select.tau");
    rc.rho = get_real("select.rho");
    rc.online.queue_size = get_size("online.queue_size");
    rc.online.epochs_per_batch = get_size("online.epochs_per_batch");
    rc.seed = get_size("run.seed");
    rc.workers = std::max<std::size_t>(1, get_size("run.workers"));
    rc.shuffle = get_bool("run.shuffle");
    rc.eval_every = get_size("run.eval_every");
    return rc;
  }

  AdaptorSpec adaptor_spec() const {
    AdaptorSpec spec;
    spec.in_channels = 1;
    spec.mid_channels = get_size("adaptor.mid_channels");
    spec.kernel = get_size("adaptor.kernel");
    spec.relu_between = get_bool("adaptor.relu_between");
    const std::string mode = get_str("adaptor.mode");
    if (mode == "residual") spec.mode = AdaptorMode::kResidual;
    else if (mode == "direct") spec.mode = AdaptorMode::kDirect;
    else throw ConfigError("adaptor.mode must be residual or direct");
    if (get_bool("adaptor.clamp"))
      spec.clamp_range = {get_real("adaptor.clamp_lo"), get_real("adaptor.clamp_hi")};
    else
      spec.clamp_range.reset();
    spec.init_scale = get_real("adaptor.init_scale");
    return spec;
  }

  bench::DeployedTrainConfig deployed_config() const {
    bench::DeployedTrainConfig dc;
    dc.epochs = get_size("deployed.epochs");
    dc.batch_size = get_size("deployed.batch_size");
    dc.lr = get_real("deployed.lr");
    dc.momentum = get_real("deployed.momentum");
    dc.weight_decay = get_real("deployed.weight_decay");
    dc.conv1_channels = get_size("deployed.conv1_channels");
    dc.conv2_channels = get_size("deployed.conv2_channels");
    return dc;
  }

 private:
  static std::string strip_comment(const std::string& s) {
    const auto pos = s.find_first_of("#;");
    return pos == std::string::npos ? s : s.substr(0, pos);
  }

  static std::string trim(const std::string& s) {
    std::size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return s.substr(b, e - b);
  }

  std::map<std::string, std::string> values_;
};

}  // namespace bbta
