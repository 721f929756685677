#pragma once

// Flat `key = value` experiment configuration. `#` starts a comment; every
// key has a default and unknown or repeated keys are rejected.

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <string_view>

#include "selseg/error.hpp"
#include "selseg/fidelity.hpp"
#include "selseg/image_io.hpp"
#include "selseg/nets.hpp"
#include "selseg/varsolver.hpp"

namespace selseg {

struct ExperimentConfig {
  std::string method = "tv";
  std::uint64_t seed = 0;
  double lambda = 2.0;
  double theta = 1.0;
  AdmmConfig admm;
  FidelityParams fidelity;
  // Network training.
  int epochs = 300;
  int early_stop_epoch = 300;
  int dip_epochs = 500;
  double lr = 1e-3;
  double noise_sigma = 0.1;
  // Optional defaults for the CLI path flags.
  std::string data_dir;
  std::string out_dir;

  nets::TrainConfig train_config(bool dip_like) const {
    nets::TrainConfig t;
    t.lambda = lambda;
    t.theta = theta;
    t.mu = admm.mu;
    t.epochs = dip_like ? dip_epochs : epochs;
    t.early_stop_epoch = dip_like ? dip_epochs : early_stop_epoch;
    t.lr = lr;
    t.noise_sigma = noise_sigma;
    t.seed = seed;
    t.fidelity = fidelity;
    return t;
  }

  void validate() const {
    admm.validate();
    detail::require(lambda >= 0.0 && theta >= 0.0, "config: lambda and theta must be nonnegative");
    detail::require(epochs >= 0 && early_stop_epoch >= 0 && dip_epochs >= 0, "config: epoch counts must be >= 0");
    detail::require(lr > 0.0, "config: lr must be positive");
    detail::require(noise_sigma >= 0.0, "config: noise_sigma must be nonnegative");
    detail::require(fidelity.iota >= 0.0, "config: iota must be nonnegative");
    detail::require(fidelity.geodesic.eps > 0.0 && fidelity.geodesic.beta >= 0.0,
                    "config: geodesic_eps must be positive and geodesic_beta nonnegative");
  }
};

namespace detail {

template <class T>
T parse_number(std::string_view key, std::string_view v) {
  T out{};
  const auto [end, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || end != v.data() + v.size())
    throw InputError("config: bad value '" + std::string(v) + "' for " + std::string(key));
  return out;
}

inline bool parse_bool(std::string_view key, std::string_view v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw InputError("config: " + std::string(key) + " must be true or false, got '" + std::string(v) + "'");
}

inline std::string_view trim(std::string_view s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string_view::npos) return {};
  return s.substr(a, s.find_last_not_of(" \t\r") - a + 1);
}

using Setter = std::function<void(ExperimentConfig&, std::string_view)>;

inline const std::map<std::string, Setter, std::less<>>& config_keys() {
  auto real = [](double ExperimentConfig::*m) {
    return Setter([m](ExperimentConfig& c, std::string_view v) { c.*m = parse_number<double>("", v); });
  };
  auto admm_real = [](double AdmmConfig::*m) {
    return Setter([m](ExperimentConfig& c, std::string_view v) { c.admm.*m = parse_number<double>("", v); });
  };
  auto admm_int = [](int AdmmConfig::*m) {
    return Setter([m](ExperimentConfig& c, std::string_view v) { c.admm.*m = parse_number<int>("", v); });
  };
  auto count = [](int ExperimentConfig::*m) {
    return Setter([m](ExperimentConfig& c, std::string_view v) { c.*m = parse_number<int>("", v); });
  };
  static const std::map<std::string, Setter, std::less<>> keys{
      {"method", [](ExperimentConfig& c, std::string_view v) { c.method = std::string(v); }},
      {"seed", [](ExperimentConfig& c, std::string_view v) { c.seed = parse_number<std::uint64_t>("seed", v); }},
      {"lambda", real(&ExperimentConfig::lambda)},
      {"theta", real(&ExperimentConfig::theta)},
      {"mu", admm_real(&AdmmConfig::mu)},
      {"alpha", admm_real(&AdmmConfig::alpha)},
      {"beta", admm_real(&AdmmConfig::beta)},
      {"rho", admm_real(&AdmmConfig::rho)},
      {"rho_n", admm_real(&AdmmConfig::rho_n)},
      {"max_iter", admm_int(&AdmmConfig::max_iter)},
      {"tol", admm_real(&AdmmConfig::tol)},
      {"gamma", admm_real(&AdmmConfig::gamma)},
      {"gs_sweeps", admm_int(&AdmmConfig::gs_sweeps)},
      {"normal_steps", admm_int(&AdmmConfig::normal_steps)},
      {"eps_curv", admm_real(&AdmmConfig::eps_curv)},
      {"edge_weighted",
       [](ExperimentConfig& c, std::string_view v) { c.admm.edge_weighted = parse_bool("edge_weighted", v); }},
      {"time_budget_s", admm_real(&AdmmConfig::time_budget_s)},
      {"iota", [](ExperimentConfig& c, std::string_view v) { c.fidelity.iota = parse_number<double>("iota", v); }},
      {"geodesic_eps",
       [](ExperimentConfig& c, std::string_view v) { c.fidelity.geodesic.eps = parse_number<double>("", v); }},
      {"geodesic_beta",
       [](ExperimentConfig& c, std::string_view v) { c.fidelity.geodesic.beta = parse_number<double>("", v); }},
      {"epochs", count(&ExperimentConfig::epochs)},
      {"early_stop_epoch", count(&ExperimentConfig::early_stop_epoch)},
      {"dip_epochs", count(&ExperimentConfig::dip_epochs)},
      {"lr", real(&ExperimentConfig::lr)},
      {"noise_sigma", real(&ExperimentConfig::noise_sigma)},
      {"data_dir", [](ExperimentConfig& c, std::string_view v) { c.data_dir = std::string(v); }},
      {"out_dir", [](ExperimentConfig& c, std::string_view v) { c.out_dir = std::string(v); }},
  };
  return keys;
}

}  // namespace detail

/// Applies the key = value lines of `text` on top of `cfg`.
inline void apply_config(ExperimentConfig& cfg, std::string_view text, const std::string& origin = "config") {
  std::map<std::string, int> seen;
  std::istringstream in{std::string(text)};
  std::string raw;
  int lineno = 0;
  while (std::getline(in, raw)) {
    ++lineno;
    std::string_view line = raw;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const std::string where = origin + ":" + std::to_string(lineno) + ": ";
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw InputError(where + "expected key = value");
    const std::string key(detail::trim(line.substr(0, eq)));
    const std::string_view value = detail::trim(line.substr(eq + 1));
    const auto& keys = detail::config_keys();
    const auto it = keys.find(key);
    if (it == keys.end()) throw InputError(where + "unknown key '" + key + "'");
    if (seen.count(key)) throw InputError(where + "'" + key + "' repeats line " + std::to_string(seen[key]));
    seen[key] = lineno;
    try {
      it->second(cfg, value);
    } catch (const InputError&) {
      throw InputError(where + "bad value '" + std::string(value) + "' for " + key);
    }
  }
  cfg.validate();
}

inline ExperimentConfig parse_config(std::string_view text, const std::string& origin = "config") {
  ExperimentConfig cfg;
  apply_config(cfg, text, origin);
  return cfg;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw InputError("config file not found: " + path.string());
  return parse_config(detail::read_file(path), path.string());
}

}  // namespace selseg
