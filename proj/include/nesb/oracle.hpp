// SPDX-License-Identifier: Apache-2.0
#ifndef NESB_ORACLE_HPP
#define NESB_ORACLE_HPP

#include <Eigen/Core>
#include <cmath>
#include <functional>
#include <map>
#include <utility>
#include <vector>

#include "nesb/detail/al_minimize.hpp"
#include "nesb/divergence.hpp"
#include "nesb/errors.hpp"
#include "nesb/grid.hpp"
#include "nesb/ref_chain.hpp"

namespace nesb {

// Fully enumerated path space of a small chain: reference probabilities and
// a per-path cost. Ground truth for the solvers.
struct PathTable {
  std::vector<std::vector<int>> paths;  // state-index sequences, length n_steps+1
  VectorXd prob;                        // reference probability of each path
  VectorXd cost;                        // C(path)
  GridSpec grid;
  int n_steps = 0;

  static PathTable build(const ReferenceChain& chain, const PathFunctional& path_cost) {
    const int n = chain.n_states();
    const int steps = chain.n_steps();
    double count = std::pow(static_cast<double>(n), steps + 1);
    if (count > 1e6) throw TooLarge("PathTable: more than 1e6 paths");

    PathTable table;
    table.grid = chain.grid;
    table.n_steps = steps;
    std::vector<int> path(steps + 1, 0);
    while (true) {
      double p = chain.nu0[path[0]];
      for (int s = 0; s < steps && p > 0.0; ++s) p *= chain.kernels[s](path[s], path[s + 1]);
      if (p > 0.0) {
        table.paths.push_back(path);
      }
      int carry = 0;
      while (carry <= steps) {
        if (++path[carry] < n) break;
        path[carry] = 0;
        ++carry;
      }
      if (carry > steps) break;
    }
    const int m = static_cast<int>(table.paths.size());
    table.prob.resize(m);
    table.cost.resize(m);
    for (int j = 0; j < m; ++j) {
      const auto& pj = table.paths[j];
      double p = chain.nu0[pj[0]];
      for (int s = 0; s < steps; ++s) p *= chain.kernels[s](pj[s], pj[s + 1]);
      table.prob[j] = p;
      table.cost[j] = path_cost(pj);
    }
    return table;
  }

  static PathTable build_endpoint_cost(const ReferenceChain& chain, const MatrixXd& C) {
    return build(chain, [&C, steps = chain.n_steps()](const std::vector<int>& path) {
      return C(path.front(), path.back());
    });
  }

  int size() const { return static_cast<int>(paths.size()); }
  int x0(int j) const { return paths[j].front(); }
  int xT(int j) const { return paths[j].back(); }
};

struct PathSolution {
  VectorXd q;  // optimal path weights
  double value = 0.0;
  double feasibility = 0.0;
  int iterations = 0;
};

// Brute-force primal solve of inf E^Q[C] + I_ell(Q|P) over path weights with
// both endpoint marginals constrained, by augmented-Lagrangian projected
// gradient. Entropy clamps iterates at 1e-14 (its gradient is singular at 0);
// the clipping families keep exact zeros.
inline PathSolution solve_paths(const PathTable& table, const DivergenceSpec& divergence,
                                const DiscreteMeasure& mu0, const DiscreteMeasure& muT,
                                const VectorXd& q_init = VectorXd()) {
  const int m = table.size();
  const int n = table.grid.n_states;

  // quick reachability screen before burning iterations
  {
    VectorXd reach0 = VectorXd::Zero(n), reachT = VectorXd::Zero(n);
    for (int j = 0; j < m; ++j) {
      reach0[table.x0(j)] += table.prob[j];
      reachT[table.xT(j)] += table.prob[j];
    }
    for (int i = 0; i < n; ++i) {
      if (mu0[i] > 0.0 && reach0[i] <= 0.0)
        throw Infeasible("solve_paths: mu0 charges a state with no reference path");
      if (muT[i] > 0.0 && reachT[i] <= 0.0)
        throw Infeasible("solve_paths: muT charges a state with no reference path");
    }
  }

  // The minimization runs over density ratios r = q/p: the divergence
  // curvature is then p_j ell''(r_j) = O(1) instead of ell''/p_j, which keeps
  // the augmented Lagrangian well conditioned on low-probability paths.
  std::vector<detail::LinearConstraint> cons;
  for (int i = 0; i < n; ++i) {
    detail::LinearConstraint c0, cT;
    for (int j = 0; j < m; ++j) {
      if (table.x0(j) == i) c0.terms.emplace_back(j, table.prob[j]);
      if (table.xT(j) == i) cT.terms.emplace_back(j, table.prob[j]);
    }
    c0.rhs = mu0[i];
    cT.rhs = muT[i];
    if (!c0.terms.empty() || c0.rhs > 0.0) cons.push_back(std::move(c0));
    if (!cT.terms.empty() || cT.rhs > 0.0) cons.push_back(std::move(cT));
  }

  auto value_and_grad = [&](const VectorXd& r, VectorXd& g) {
    double total = 0.0;
    for (int j = 0; j < m; ++j) {
      total += table.prob[j] * (table.cost[j] * r[j] + eval_ell(divergence, r[j]));
      g[j] = table.prob[j] * (table.cost[j] + eval_ell_derivative(divergence, r[j]));
    }
    return total;
  };

  VectorXd r0(m);
  if (q_init.size() == m) {
    for (int j = 0; j < m; ++j) r0[j] = q_init[j] / table.prob[j];
  } else {
    // product-form start with the right marginals up to reference correlation
    VectorXd m0 = VectorXd::Zero(n), mT = VectorXd::Zero(n);
    for (int j = 0; j < m; ++j) {
      m0[table.x0(j)] += table.prob[j];
      mT[table.xT(j)] += table.prob[j];
    }
    for (int j = 0; j < m; ++j) {
      double a = m0[table.x0(j)] > 0.0 ? mu0[table.x0(j)] / m0[table.x0(j)] : 0.0;
      double b = mT[table.xT(j)] > 0.0 ? muT[table.xT(j)] / mT[table.xT(j)] : 0.0;
      r0[j] = a * b;
    }
  }

  detail::AlOptions opt;
  opt.lower_bound = divergence.kind == DivergenceKind::Entropy ? 1e-12 : 0.0;
  auto res = detail::al_minimize(value_and_grad, cons, std::move(r0), opt);
  if (res.diverged)
    throw Infeasible("solve_paths: penalty diverged, instance looks infeasible");
  if (!res.converged && res.feasibility > 1e-8)
    throw Unconverged("solve_paths: iteration cap before feasibility tolerance",
                      res.feasibility);

  PathSolution sol;
  sol.q.resize(m);
  for (int j = 0; j < m; ++j) sol.q[j] = table.prob[j] * res.x[j];
  sol.feasibility = res.feasibility;
  sol.iterations = res.iterations;
  VectorXd scratch(m);
  sol.value = value_and_grad(res.x, scratch);
  return sol;
}

// Max over endpoint classes (x0, xT) of the spread of q/p inside the class.
// Small defect certifies the endpoint-measurable density structure.
inline double endpoint_factorization_defect(const PathTable& table, const VectorXd& q) {
  std::map<std::pair<int, int>, std::pair<double, double>> spread;  // class -> (min, max)
  for (int j = 0; j < table.size(); ++j) {
    if (table.prob[j] <= 0.0) continue;
    double ratio = q[j] / table.prob[j];
    auto key = std::make_pair(table.x0(j), table.xT(j));
    auto it = spread.find(key);
    if (it == spread.end())
      spread[key] = {ratio, ratio};
    else {
      it->second.first = std::min(it->second.first, ratio);
      it->second.second = std::max(it->second.second, ratio);
    }
  }
  double worst = 0.0;
  for (const auto& [key, mm] : spread) worst = std::max(worst, mm.second - mm.first);
  return worst;
}

struct DataProcessingReport {
  double lhs = 0.0;                 // I_ell(Q|P) over paths
  double rhs_reference_weighted = 0.0;  // endpoint term + P_0T-weighted bridge term
  double rhs_optimizer_weighted = 0.0;  // endpoint term + Q_0T-weighted bridge term
};

// Both weightings of the data-processing decomposition. The entropy family
// satisfies lhs == rhs_optimizer_weighted (chain rule); general ell does not.
// Endpoint classes with zero reference mass are skipped; if they carry
// optimizer mass the lhs is infinite anyway.
inline DataProcessingReport data_processing_decomposition(const PathTable& table,
                                                          const VectorXd& q,
                                                          const DivergenceSpec& divergence) {
  DataProcessingReport out;
  std::map<std::pair<int, int>, std::vector<int>> classes;
  for (int j = 0; j < table.size(); ++j)
    classes[{table.x0(j), table.xT(j)}].push_back(j);

  for (int j = 0; j < table.size(); ++j) {
    if (table.prob[j] <= 0.0) {
      if (q[j] > 0.0) {
        out.lhs = kInf;
        return out;
      }
      continue;
    }
    out.lhs += table.prob[j] * eval_ell(divergence, q[j] / table.prob[j]);
  }

  double endpoint_term = 0.0, bridge_p = 0.0, bridge_q = 0.0;
  for (const auto& [key, members] : classes) {
    double P = 0.0, Q = 0.0;
    for (int j : members) {
      P += table.prob[j];
      Q += q[j];
    }
    if (P <= 0.0) continue;
    endpoint_term += P * eval_ell(divergence, Q / P);
    double inner = 0.0;
    if (Q > 0.0) {
      for (int j : members) {
        double pc = table.prob[j] / P;
        if (pc <= 0.0) continue;
        inner += pc * eval_ell(divergence, (q[j] / Q) / pc);
      }
    } else {
      // conditional optimizer is undefined on a Q-null class; the bridge
      // divergence of the empty class is zero by the 0*ell(0/0) convention
      inner = 0.0;
    }
    bridge_p += P * inner;
    bridge_q += Q * inner;
  }
  out.rhs_reference_weighted = endpoint_term + bridge_p;
  out.rhs_optimizer_weighted = endpoint_term + bridge_q;
  return out;
}

}  // namespace nesb

#endif  // NESB_ORACLE_HPP
