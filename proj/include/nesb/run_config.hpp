// SPDX-License-Identifier: Apache-2.0
#ifndef NESB_RUN_CONFIG_HPP
#define NESB_RUN_CONFIG_HPP

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <string>

#include <json.hpp>

#include "nesb/bridge_solver.hpp"
#include "nesb/divergence.hpp"
#include "nesb/errors.hpp"
#include "nesb/grid.hpp"
#include "nesb/ref_chain.hpp"
#include "nesb/weak_cost.hpp"

namespace nesb {

using nlohmann::json;

// Config validation failure that names the offending field.
struct ConfigError : std::runtime_error {
  ConfigError(const std::string& field, const std::string& why)
      : std::runtime_error("config field \"" + field + "\": " + why), field_name(field) {}
  std::string field_name;
};

namespace detail {

inline const json& require_field(const json& j, const std::string& key) {
  if (!j.contains(key)) throw ConfigError(key, "missing");
  return j.at(key);
}

inline double require_number(const json& j, const std::string& key) {
  const json& v = require_field(j, key);
  if (!v.is_number()) throw ConfigError(key, "must be a number");
  return v.get<double>();
}

inline int require_int(const json& j, const std::string& key) {
  const json& v = require_field(j, key);
  if (!v.is_number_integer()) throw ConfigError(key, "must be an integer");
  return v.get<int>();
}

inline std::string require_string(const json& j, const std::string& key) {
  const json& v = require_field(j, key);
  if (!v.is_string()) throw ConfigError(key, "must be a string");
  return v.get<std::string>();
}

inline VectorXd parse_tabulated(const json& v, const std::string& key, int n) {
  if (!v.is_array() || static_cast<int>(v.size()) != n)
    throw ConfigError(key, "tabulated values must be an array of length n_states");
  VectorXd out(n);
  for (int i = 0; i < n; ++i) {
    if (!v[i].is_number()) throw ConfigError(key, "tabulated values must be numbers");
    out[i] = v[i].get<double>();
  }
  return out;
}

}  // namespace detail

// Batch run description: everything needed to rebuild the chain, the
// problem, and the solver settings, plus reproducibility metadata.
struct RunConfig {
  GridSpec grid;
  TimeGridSpec time;
  VectorXd potential;
  KernelMode kernel = KernelMode::Metropolized;
  std::string nu0_family = "gibbs";
  json nu0_json;
  DivergenceSpec divergence;
  WeakCostSpec weak_cost;
  json mu0_json, muT_json;
  json cost_json;
  std::string solver = "sinkhorn";
  SolveOptions solve_options;
  std::uint64_t seed = 0;
  int flow_mc_paths = 100000;
  double flow_bandwidth = 0.0;
  std::string output_dir = "out";
  json raw;

  static RunConfig parse(const json& j);
  static RunConfig load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config", "cannot open " + path);
    json j;
    try {
      in >> j;
    } catch (const json::exception& e) {
      throw ConfigError("config", std::string("not valid JSON: ") + e.what());
    }
    return parse(j);
  }

  VectorXd gibbs_weights() const {
    VectorXd lam = (-(potential.array() - potential.minCoeff())).exp();
    return lam / lam.sum();
  }

  VectorXd measure_weights(const json& spec, const std::string& key) const {
    if (!spec.contains("family") || !spec.at("family").is_string())
      throw ConfigError(key + ".family", "missing or not a string");
    const std::string family = spec.at("family").get<std::string>();
    const int n = grid.n_states;
    if (family == "uniform") return VectorXd::Constant(n, 1.0 / n);
    if (family == "gibbs") return gibbs_weights();
    if (family == "gaussian") {
      if (!spec.contains("mean")) throw ConfigError(key + ".mean", "missing");
      if (!spec.contains("sigma")) throw ConfigError(key + ".sigma", "missing");
      double mean = spec.at("mean").get<double>();
      double sigma = spec.at("sigma").get<double>();
      if (!(sigma > 0.0)) throw ConfigError(key + ".sigma", "must be > 0");
      VectorXd w(n);
      for (int i = 0; i < n; ++i) {
        double zc = (grid.point(i) - mean) / sigma;
        w[i] = std::exp(-0.5 * zc * zc);
      }
      return w / w.sum();
    }
    if (family == "tabulated") {
      if (!spec.contains("weights")) throw ConfigError(key + ".weights", "missing");
      VectorXd w = detail::parse_tabulated(spec.at("weights"), key + ".weights", n);
      if (w.minCoeff() < 0.0) throw ConfigError(key + ".weights", "must be nonnegative");
      double s = w.sum();
      if (!(s > 0.0)) throw ConfigError(key + ".weights", "must have positive mass");
      return w / s;
    }
    throw ConfigError(key + ".family", "unknown family " + family);
  }

  ReferenceChain build() const {
    VectorXd nu0w = measure_weights(nu0_json, "nu0");
    return build_chain(grid, time, potential, DiscreteMeasure(grid, nu0w / nu0w.sum()), kernel);
  }

  MatrixXd cost_matrix() const {
    const int n = grid.n_states;
    const std::string family = detail::require_string(cost_json, "family");
    if (family == "zero") return MatrixXd::Zero(n, n);
    if (family == "quadratic_distance") {
      double scale = cost_json.contains("scale") ? detail::require_number(cost_json, "scale") : 1.0;
      MatrixXd C(n, n);
      for (int x = 0; x < n; ++x)
        for (int y = 0; y < n; ++y) {
          double d = grid.point(x) - grid.point(y);
          C(x, y) = scale * d * d;
        }
      return C;
    }
    if (family == "tabulated") {
      const json& v = detail::require_field(cost_json, "values");
      if (!v.is_array() || static_cast<int>(v.size()) != n)
        throw ConfigError("cost.values", "must be an n_states x n_states array");
      MatrixXd C(n, n);
      for (int x = 0; x < n; ++x) {
        if (!v[x].is_array() || static_cast<int>(v[x].size()) != n)
          throw ConfigError("cost.values", "must be an n_states x n_states array");
        for (int y = 0; y < n; ++y) C(x, y) = v[x][y].get<double>();
      }
      return C;
    }
    throw ConfigError("cost.family", "unknown family " + family);
  }

  ProblemSpec problem(const ReferenceChain& chain) const {
    VectorXd w0 = measure_weights(mu0_json, "mu0");
    VectorXd wT = measure_weights(muT_json, "muT");
    return ProblemSpec(chain, divergence, weak_cost, DiscreteMeasure(grid, w0 / w0.sum()),
                       DiscreteMeasure(grid, wT / wT.sum()), cost_matrix());
  }
};

inline RunConfig RunConfig::parse(const json& j) {
  RunConfig cfg;
  cfg.raw = j;

  const json& grid_j = detail::require_field(j, "grid");
  double x_min = detail::require_number(grid_j, "x_min");
  double x_max = detail::require_number(grid_j, "x_max");
  int n_states = detail::require_int(grid_j, "n_states");
  if (!(x_min < x_max)) throw ConfigError("grid.x_min", "must be < grid.x_max");
  if (n_states < 2) throw ConfigError("grid.n_states", "must be >= 2");
  cfg.grid = GridSpec(x_min, x_max, n_states);

  const json& time_j = detail::require_field(j, "time");
  double horizon = detail::require_number(time_j, "horizon");
  int n_steps = detail::require_int(time_j, "n_steps");
  if (!(horizon > 0.0)) throw ConfigError("time.horizon", "must be > 0");
  if (n_steps < 1) throw ConfigError("time.n_steps", "must be >= 1");
  cfg.time = TimeGridSpec(horizon, n_steps);

  const json& pot = detail::require_field(j, "potential");
  std::string pf = detail::require_string(pot, "family");
  cfg.potential.resize(n_states);
  if (pf == "zero") {
    cfg.potential.setZero();
  } else if (pf == "quadratic") {
    double a = detail::require_number(pot, "a");
    for (int i = 0; i < n_states; ++i) cfg.potential[i] = a * cfg.grid.point(i) * cfg.grid.point(i);
  } else if (pf == "double_well") {
    double a = detail::require_number(pot, "a");
    double b = detail::require_number(pot, "b");
    for (int i = 0; i < n_states; ++i) {
      double s = cfg.grid.point(i) * cfg.grid.point(i) - b;
      cfg.potential[i] = a * s * s;
    }
  } else if (pf == "tabulated") {
    cfg.potential = detail::parse_tabulated(detail::require_field(pot, "values"),
                                            "potential.values", n_states);
  } else {
    throw ConfigError("potential.family", "unknown family " + pf);
  }

  std::string kernel = j.contains("kernel") ? detail::require_string(j, "kernel") : "metropolized";
  if (kernel == "euler")
    cfg.kernel = KernelMode::Euler;
  else if (kernel == "metropolized")
    cfg.kernel = KernelMode::Metropolized;
  else
    throw ConfigError("kernel", "must be euler or metropolized");

  cfg.nu0_json = j.contains("nu0") ? j.at("nu0") : json{{"family", "gibbs"}};

  const json& div = detail::require_field(j, "divergence");
  std::string dn = detail::require_string(div, "name");
  if (dn == "entropy")
    cfg.divergence = DivergenceSpec::entropy();
  else if (dn == "chi_squared")
    cfg.divergence = DivergenceSpec::chi_squared();
  else if (dn == "tsallis")
    cfg.divergence = DivergenceSpec::tsallis(detail::require_number(div, "q"));
  else if (dn == "hellinger")
    cfg.divergence = DivergenceSpec::hellinger();
  else
    throw ConfigError("divergence.name", "unknown divergence " + dn);

  const json& wc = j.contains("weak_cost") ? j.at("weak_cost") : json{{"name", "total_variation"}};
  std::string wn = detail::require_string(wc, "name");
  if (wn == "total_variation") {
    cfg.weak_cost = WeakCostSpec::total_variation();
  } else if (wn == "marton") {
    cfg.weak_cost = WeakCostSpec::marton(detail::require_number(wc, "p"));
  } else if (wn == "moreau_yosida") {
    cfg.weak_cost = WeakCostSpec::moreau_yosida(detail::require_number(wc, "lambda"));
  } else if (wn == "barycentric") {
    std::string theta = detail::require_string(wc, "theta");
    if (theta == "abs")
      cfg.weak_cost = WeakCostSpec::barycentric([](double u) { return std::abs(u); });
    else if (theta == "square")
      cfg.weak_cost = WeakCostSpec::barycentric([](double u) { return u * u; });
    else
      throw ConfigError("weak_cost.theta", "must be abs or square");
  } else {
    throw ConfigError("weak_cost.name", "unknown weak cost " + wn);
  }

  cfg.mu0_json = detail::require_field(j, "mu0");
  cfg.muT_json = detail::require_field(j, "muT");
  detail::require_string(cfg.mu0_json, "family");
  detail::require_string(cfg.muT_json, "family");
  cfg.cost_json = j.contains("cost") ? j.at("cost") : json{{"family", "zero"}};

  cfg.solver = j.contains("solver") ? detail::require_string(j, "solver") : "sinkhorn";
  if (cfg.solver != "sinkhorn" && cfg.solver != "dual_ascent")
    throw ConfigError("solver", "must be sinkhorn or dual_ascent");

  if (j.contains("tolerance")) cfg.solve_options.tol = detail::require_number(j, "tolerance");
  if (j.contains("max_iters")) cfg.solve_options.max_iters = detail::require_int(j, "max_iters");
  if (j.contains("damping")) cfg.solve_options.damping = detail::require_number(j, "damping");
  if (!(cfg.solve_options.tol > 0.0)) throw ConfigError("tolerance", "must be > 0");
  if (cfg.solve_options.max_iters < 1) throw ConfigError("max_iters", "must be >= 1");
  if (!(cfg.solve_options.damping > 0.0 && cfg.solve_options.damping <= 1.0))
    throw ConfigError("damping", "must be in (0, 1]");

  if (j.contains("seed")) {
    if (!j.at("seed").is_number_unsigned() && !j.at("seed").is_number_integer())
      throw ConfigError("seed", "must be an integer");
    cfg.seed = j.at("seed").get<std::uint64_t>();
  }
  if (j.contains("flow")) {
    const json& fl = j.at("flow");
    if (fl.contains("mc_paths")) cfg.flow_mc_paths = detail::require_int(fl, "mc_paths");
    if (fl.contains("bandwidth")) cfg.flow_bandwidth = detail::require_number(fl, "bandwidth");
  }
  if (j.contains("output_dir")) cfg.output_dir = detail::require_string(j, "output_dir");
  return cfg;
}

// FNV-1a over the canonical dump; embedded in every output artifact.
inline std::string config_hash(const json& j) {
  std::string dump = j.dump();
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : dump) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

}  // namespace nesb

#endif  // NESB_RUN_CONFIG_HPP
