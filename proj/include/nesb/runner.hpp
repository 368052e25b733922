// SPDX-License-Identifier: Apache-2.0
#ifndef NESB_RUNNER_HPP
#define NESB_RUNNER_HPP

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "nesb/marginal_flow.hpp"
#include "nesb/oracle.hpp"
#include "nesb/run_config.hpp"

namespace nesb {

enum class LogLevel { Error = 0, Info = 1, Debug = 2 };

inline LogLevel log_level() {
  const char* env = std::getenv("NESB_LOG");
  if (!env) return LogLevel::Error;
  std::string v(env);
  if (v == "debug") return LogLevel::Debug;
  if (v == "info") return LogLevel::Info;
  return LogLevel::Error;
}

inline void log_line(LogLevel level, const std::string& msg) {
  if (static_cast<int>(level) <= static_cast<int>(log_level()))
    std::fprintf(stderr, "[nesb] %s\n", msg.c_str());
}

namespace detail {

inline std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline void write_text(const std::filesystem::path& path, const std::string& body) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw NumericalFailure("cannot write " + path.string());
  out << body;
}

}  // namespace detail

// Exit codes shared by all subcommands.
inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 1;
inline constexpr int kExitUnconverged = 2;
inline constexpr int kExitInfeasible = 3;
inline constexpr int kExitTooLarge = 4;

struct CliOverrides {
  std::optional<std::string> out_dir;
  std::optional<std::uint64_t> seed;
  int threads = 0;
};

namespace detail {

struct RunSetup {
  RunConfig cfg;
  std::string hash;
  std::filesystem::path out;
};

inline RunSetup prepare(const std::string& config_path, const CliOverrides& over) {
  RunSetup s{RunConfig::load(config_path), "", {}};
  if (over.seed) {
    s.cfg.seed = *over.seed;
    s.cfg.raw["seed"] = *over.seed;
  }
  if (over.out_dir) s.cfg.output_dir = *over.out_dir;
  if (over.threads > 0) Eigen::setNbThreads(over.threads);
  s.hash = config_hash(s.cfg.raw);
  s.out = s.cfg.output_dir;
  std::filesystem::create_directories(s.out);
  return s;
}

inline SolveResult run_solver(const RunConfig& cfg, const ProblemSpec& problem) {
  if (cfg.solver == "dual_ascent") return solve_dual_ascent(problem, cfg.solve_options);
  return solve_sinkhorn(problem, cfg.solve_options);
}

inline json report_json(const RunSetup& s, const SolveReport& report, double wall_seconds) {
  json j;
  j["config_hash"] = s.hash;
  j["config"] = s.cfg.raw;
  j["seed"] = s.cfg.seed;
  j["wall_time_seconds"] = wall_seconds;
  j["primal_value"] = report.primal_value;
  j["dual_value"] = report.dual_value;
  j["gap"] = report.gap;
  j["residual_initial"] = report.residual_initial;
  j["residual_terminal"] = report.residual_terminal;
  j["iterations"] = report.iterations;
  j["converged"] = report.converged;
  return j;
}

}  // namespace detail

// solve: potentials.csv, density.csv, report.json.
inline int cmd_solve(const std::string& config_path, const CliOverrides& over = {}) {
  try {
    auto setup = detail::prepare(config_path, over);
    auto t0 = std::chrono::steady_clock::now();
    ReferenceChain chain = setup.cfg.build();
    ProblemSpec problem = setup.cfg.problem(chain);
    SolveResult result = detail::run_solver(setup.cfg, problem);
    double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    log_line(LogLevel::Info, "solve finished in " + std::to_string(result.report.iterations) +
                                 " iterations, gap " + detail::fmt17(result.report.gap));

    const int n = chain.n_states();
    std::string potentials = "# config_hash=" + setup.hash + "\nstate,phi,psi\n";
    for (int i = 0; i < n; ++i)
      potentials += detail::fmt17(chain.grid.point(i)) + "," +
                    detail::fmt17(result.potentials.phi[i]) + "," +
                    detail::fmt17(result.potentials.psi[i]) + "\n";
    detail::write_text(setup.out / "potentials.csv", potentials);

    std::string density = "# config_hash=" + setup.hash + "\nx0,xT,f\n";
    for (int x = 0; x < n; ++x)
      for (int y = 0; y < n; ++y)
        density += detail::fmt17(chain.grid.point(x)) + "," + detail::fmt17(chain.grid.point(y)) +
                   "," + detail::fmt17(result.density.f(x, y)) + "\n";
    detail::write_text(setup.out / "density.csv", density);

    detail::write_text(setup.out / "report.json",
                       detail::report_json(setup, result.report, wall).dump(2) + "\n");
    return result.report.converged ? kExitOk : kExitUnconverged;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitConfig;
  } catch (const InvalidArgument& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitConfig;
  } catch (const Infeasible& e) {
    std::fprintf(stderr, "infeasible: %s\n", e.what());
    return kExitInfeasible;
  } catch (const DualInfeasible& e) {
    std::fprintf(stderr, "infeasible: %s\n", e.what());
    return kExitInfeasible;
  } catch (const Unconverged& e) {
    std::fprintf(stderr, "unconverged: %s\n", e.what());
    return kExitUnconverged;
  }
}

// flow: flow.csv (applicable method), chain_marginals.csv, consistency.json.
inline int cmd_flow(const std::string& config_path, const CliOverrides& over = {}) {
  try {
    auto setup = detail::prepare(config_path, over);
    const auto& cfg = setup.cfg;
    if (cfg.divergence.kind != DivergenceKind::Entropy &&
        cfg.divergence.kind != DivergenceKind::ChiSquared)
      throw ConfigError("divergence.name", "flow unsupported for this divergence");

    auto t0 = std::chrono::steady_clock::now();
    ReferenceChain chain = cfg.build();
    ProblemSpec problem = cfg.problem(chain);
    SolveResult solved = solve_sinkhorn(problem, cfg.solve_options);
    MarginalFlow exact = chain_marginals(problem, solved.density);

    MarginalFlow method;
    json consistency;
    consistency["config_hash"] = setup.hash;
    consistency["seed"] = cfg.seed;
    if (cfg.divergence.kind == DivergenceKind::Entropy) {
      method = entropic_flow(problem, cfg.solve_options);
      consistency["method"] = "entropic_hjb";
    } else {
      method = exact;
      consistency["method"] = "chain_marginals";
      ChiSquaredFlowReport rep =
          chisquared_flow_residual(problem, cfg.flow_mc_paths, cfg.flow_bandwidth, cfg.seed);
      consistency["weak_form_residual"] = rep.residual;
      consistency["z_floor_rate"] = rep.z_floor_rate;
      consistency["bandwidth_x"] = rep.bandwidth_x;
      consistency["bandwidth_z"] = rep.bandwidth_z;
      consistency["min_ess"] = rep.min_ess;
    }
    VectorXd tv = rowwise_tv(method, exact);
    consistency["rowwise_tv"] = std::vector<double>(tv.data(), tv.data() + tv.size());
    consistency["max_tv"] = tv.maxCoeff();
    consistency["wall_time_seconds"] =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    auto write_flow = [&](const MarginalFlow& flow, const std::string& name) {
      std::string body = "# config_hash=" + setup.hash + "\nt,x,density\n";
      for (int t = 0; t < flow.densities.rows(); ++t)
        for (int i = 0; i < flow.densities.cols(); ++i)
          body += detail::fmt17(chain.time.time(t)) + "," + detail::fmt17(chain.grid.point(i)) +
                  "," + detail::fmt17(flow.densities(t, i)) + "\n";
      detail::write_text(setup.out / name, body);
    };
    write_flow(method, "flow.csv");
    write_flow(exact, "chain_marginals.csv");
    detail::write_text(setup.out / "consistency.json", consistency.dump(2) + "\n");
    return kExitOk;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitConfig;
  } catch (const InvalidArgument& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitConfig;
  } catch (const Infeasible& e) {
    std::fprintf(stderr, "infeasible: %s\n", e.what());
    return kExitInfeasible;
  } catch (const DualInfeasible& e) {
    std::fprintf(stderr, "infeasible: %s\n", e.what());
    return kExitInfeasible;
  } catch (const Unconverged& e) {
    std::fprintf(stderr, "unconverged: %s\n", e.what());
    return kExitUnconverged;
  } catch (const StatisticalFailure& e) {
    std::fprintf(stderr, "unconverged: %s\n", e.what());
    return kExitUnconverged;
  }
}

// check: oracle cross-validation on a size-capped instance -> check.json.
inline int cmd_check(const std::string& config_path, const CliOverrides& over = {}) {
  try {
    auto setup = detail::prepare(config_path, over);
    const auto& cfg = setup.cfg;
    double path_count =
        std::pow(static_cast<double>(cfg.grid.n_states), cfg.time.n_steps + 1);
    if (path_count > 1e6) {
      std::fprintf(stderr, "instance too large for the oracle: %.0f paths\n", path_count);
      return kExitTooLarge;
    }

    ReferenceChain chain = cfg.build();
    ProblemSpec problem = cfg.problem(chain);
    SolveResult solved = detail::run_solver(cfg, problem);
    PathTable table = PathTable::build_endpoint_cost(chain, problem.cost);
    PathSolution oracle = solve_paths(table, cfg.divergence, problem.mu0, problem.muT);

    json j;
    j["config_hash"] = setup.hash;
    j["seed"] = cfg.seed;
    j["solver_value"] = solved.report.primal_value;
    j["oracle_value"] = oracle.value;
    double value_tol = 1e-6 * (1.0 + std::abs(oracle.value));
    bool value_ok = std::abs(solved.report.primal_value - oracle.value) <= value_tol;
    j["value_agreement"] = value_ok;

    double defect = endpoint_factorization_defect(table, oracle.q);
    j["factorization_defect"] = defect;
    bool defect_ok = defect <= 1e-6;

    DataProcessingReport dp = data_processing_decomposition(table, oracle.q, cfg.divergence);
    j["data_processing"] = {{"lhs", dp.lhs},
                            {"rhs_reference_weighted", dp.rhs_reference_weighted},
                            {"rhs_optimizer_weighted", dp.rhs_optimizer_weighted}};
    bool dp_ok = true;
    if (cfg.divergence.kind == DivergenceKind::Entropy)
      dp_ok = std::abs(dp.lhs - dp.rhs_optimizer_weighted) <= 1e-10;

    bool tensor_ok = true;
    if ((problem.mu0.weights - chain.nu0.weights).cwiseAbs().maxCoeff() <= 1e-12) {
      auto [lhs, rhs] = tensorization_check(problem, solved.density);
      j["tensorization"] = {{"lhs", lhs}, {"rhs", rhs}};
      tensor_ok = std::abs(lhs - rhs) <= 1e-12;
    } else {
      j["tensorization"] = nullptr;
    }

    bool all_ok = value_ok && defect_ok && dp_ok && tensor_ok && solved.report.converged;
    j["pass"] = all_ok;
    detail::write_text(setup.out / "check.json", j.dump(2) + "\n");
    return all_ok ? kExitOk : kExitUnconverged;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitConfig;
  } catch (const InvalidArgument& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitConfig;
  } catch (const TooLarge& e) {
    std::fprintf(stderr, "too large: %s\n", e.what());
    return kExitTooLarge;
  } catch (const Infeasible& e) {
    std::fprintf(stderr, "infeasible: %s\n", e.what());
    return kExitInfeasible;
  } catch (const Unconverged& e) {
    std::fprintf(stderr, "unconverged: %s\n", e.what());
    return kExitUnconverged;
  }
}

}  // namespace nesb

#endif  // NESB_RUNNER_HPP
