// SPDX-License-Identifier: Apache-2.0
#ifndef NESB_WEAK_COST_HPP
#define NESB_WEAK_COST_HPP

#include <Eigen/Core>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "nesb/detail/al_minimize.hpp"
#include "nesb/errors.hpp"
#include "nesb/grid.hpp"

namespace nesb {

enum class WeakCostKind { TotalVariation, MartonClassical, Barycentric, MoreauYosida };

// Weak transport cost c(x, rho) on grid-supported conditional laws:
//   TotalVariation   c(x,rho) = rho({y != x});      Q_c phi = phi
//   MartonClassical  c(x,rho) = int |x-y|^p rho;    Q_c phi = c-transform
//   Barycentric      c(x,rho) = theta(x - mean rho); Q_c phi = Q_theta of convex minorant
//   MoreauYosida     c(x,rho) = (lambda/2) int |x-y|^2 rho; Q_c phi = Moreau-Yosida envelope
//
// MoreauYosida doubles as the certificate for the distributionally robust
// target: a zero weak-OT value places the terminal law inside a W2 ball
// (one-sided, via (lambda/2) W2^2 = weak_ot_value).
struct WeakCostSpec {
  WeakCostKind kind = WeakCostKind::TotalVariation;
  double p = 1.0;       // Marton exponent >= 1
  double lambda = 1.0;  // Moreau-Yosida weight > 0
  std::function<double(double)> theta;  // Barycentric penalty, convex, theta(0) = 0

  static WeakCostSpec total_variation() { return {}; }
  static WeakCostSpec marton(double p) {
    if (!(p >= 1.0)) throw InvalidArgument("WeakCostSpec: Marton requires p >= 1");
    WeakCostSpec s;
    s.kind = WeakCostKind::MartonClassical;
    s.p = p;
    return s;
  }
  static WeakCostSpec barycentric(std::function<double(double)> theta) {
    WeakCostSpec s;
    s.kind = WeakCostKind::Barycentric;
    s.theta = std::move(theta);
    return s;
  }
  static WeakCostSpec moreau_yosida(double lambda) {
    if (!(lambda > 0.0)) throw InvalidArgument("WeakCostSpec: MoreauYosida requires lambda > 0");
    WeakCostSpec s;
    s.kind = WeakCostKind::MoreauYosida;
    s.lambda = lambda;
    return s;
  }

  std::string name() const {
    switch (kind) {
      case WeakCostKind::TotalVariation: return "total_variation";
      case WeakCostKind::MartonClassical: return "marton";
      case WeakCostKind::Barycentric: return "barycentric";
      case WeakCostKind::MoreauYosida: return "moreau_yosida";
    }
    return "?";
  }
};

// Greatest convex minorant of the graph {(x_i, phi_i)} restricted to the grid,
// via the lower hull (Andrew monotone chain on already-sorted abscissae).
// Grid-restricted by construction; boundary values anchor the envelope.
inline VectorXd convex_envelope(const GridSpec& grid, const VectorXd& phi) {
  const int n = grid.n_states;
  if (phi.size() != n) throw InvalidArgument("convex_envelope: size mismatch");
  std::vector<int> hull;
  hull.reserve(n);
  for (int i = 0; i < n; ++i) {
    while (hull.size() >= 2) {
      int a = hull[hull.size() - 2], b = hull[hull.size() - 1];
      double xa = grid.point(a), xb = grid.point(b), xc = grid.point(i);
      // drop b if it lies on or above chord a-c
      if ((phi[b] - phi[a]) * (xc - xa) >= (phi[i] - phi[a]) * (xb - xa))
        hull.pop_back();
      else
        break;
    }
    hull.push_back(i);
  }
  VectorXd env(n);
  size_t seg = 0;
  for (int i = 0; i < n; ++i) {
    while (seg + 1 < hull.size() && hull[seg + 1] <= i) ++seg;
    if (hull[seg] == i) {
      env[i] = phi[i];
    } else {
      int a = hull[seg], b = hull[seg + 1];
      double t = (grid.point(i) - grid.point(a)) / (grid.point(b) - grid.point(a));
      env[i] = (1.0 - t) * phi[a] + t * phi[b];
    }
  }
  return env;
}

// (Q_c phi)(x) over the grid, per variant. Infima over y run over the grid.
inline VectorXd apply_qc(const WeakCostSpec& spec, const GridSpec& grid, const VectorXd& phi) {
  const int n = grid.n_states;
  if (n == 0 || phi.size() == 0) throw InvalidArgument("apply_qc: empty grid");
  if (phi.size() != n) throw InvalidArgument("apply_qc: phi size mismatch");
  for (int i = 0; i < n; ++i)
    if (!std::isfinite(phi[i])) throw InvalidArgument("apply_qc: phi must be finite");

  switch (spec.kind) {
    case WeakCostKind::TotalVariation:
      return phi;
    case WeakCostKind::MartonClassical: {
      VectorXd out(n);
      for (int i = 0; i < n; ++i) {
        double best = kInf;
        for (int j = 0; j < n; ++j)
          best = std::min(best, phi[j] + std::pow(std::abs(grid.point(i) - grid.point(j)), spec.p));
        out[i] = best;
      }
      return out;
    }
    case WeakCostKind::Barycentric: {
      if (!spec.theta) throw InvalidArgument("apply_qc: Barycentric needs theta");
      VectorXd env = convex_envelope(grid, phi);
      VectorXd out(n);
      for (int i = 0; i < n; ++i) {
        double best = kInf;
        for (int j = 0; j < n; ++j)
          best = std::min(best, env[j] + spec.theta(grid.point(i) - grid.point(j)));
        out[i] = best;
      }
      return out;
    }
    case WeakCostKind::MoreauYosida: {
      VectorXd out(n);
      for (int i = 0; i < n; ++i) {
        double best = kInf;
        for (int j = 0; j < n; ++j) {
          double d = grid.point(i) - grid.point(j);
          best = std::min(best, phi[j] + 0.5 * spec.lambda * d * d);
        }
        out[i] = best;
      }
      return out;
    }
  }
  throw InvalidArgument("apply_qc: unknown variant");
}

namespace detail {

// c(x_i, rho) for a grid-supported conditional law rho (row of a kernel).
inline double conditional_cost(const WeakCostSpec& spec, const GridSpec& grid, int i,
                               const VectorXd& rho) {
  const int n = grid.n_states;
  switch (spec.kind) {
    case WeakCostKind::TotalVariation:
      return 1.0 - rho[i];
    case WeakCostKind::MartonClassical: {
      double s = 0.0;
      for (int j = 0; j < n; ++j)
        s += rho[j] * std::pow(std::abs(grid.point(i) - grid.point(j)), spec.p);
      return s;
    }
    case WeakCostKind::Barycentric: {
      double mean = 0.0;
      for (int j = 0; j < n; ++j) mean += rho[j] * grid.point(j);
      return spec.theta(grid.point(i) - mean);
    }
    case WeakCostKind::MoreauYosida: {
      double s = 0.0;
      for (int j = 0; j < n; ++j) {
        double d = grid.point(i) - grid.point(j);
        s += rho[j] * 0.5 * spec.lambda * d * d;
      }
      return s;
    }
  }
  return kInf;
}

}  // namespace detail

// W_c(mu, nu): minimize sum_x mu(x) c(x, pi_x) over row-stochastic conditional
// kernels with nu as the mu-mixture of rows, by augmented-Lagrangian
// projected gradient on the kernel polytope.
inline double weak_ot_value(const WeakCostSpec& spec, const DiscreteMeasure& mu,
                            const DiscreteMeasure& nu) {
  if (!(mu.grid == nu.grid)) throw InvalidArgument("weak_ot_value: grids differ");
  const GridSpec& grid = mu.grid;
  const int n = grid.n_states;

  std::vector<int> rows;  // states charged by mu
  for (int i = 0; i < n; ++i)
    if (mu[i] > 0.0) rows.push_back(i);
  const int nr = static_cast<int>(rows.size());
  auto idx = [&](int r, int j) { return r * n + j; };

  std::vector<detail::LinearConstraint> cons;
  for (int r = 0; r < nr; ++r) {
    detail::LinearConstraint c;
    for (int j = 0; j < n; ++j) c.terms.emplace_back(idx(r, j), 1.0);
    c.rhs = 1.0;
    cons.push_back(std::move(c));
  }
  for (int j = 0; j < n; ++j) {
    detail::LinearConstraint c;
    for (int r = 0; r < nr; ++r) c.terms.emplace_back(idx(r, j), mu[rows[r]]);
    c.rhs = nu[j];
    cons.push_back(std::move(c));
  }

  const double fd_h = 1e-6;
  auto value_and_grad = [&](const VectorXd& x, VectorXd& g) {
    double total = 0.0;
    g.setZero();
    for (int r = 0; r < nr; ++r) {
      const int i = rows[r];
      const double mi = mu[i];
      switch (spec.kind) {
        case WeakCostKind::TotalVariation: {
          double rowsum = 0.0;
          for (int j = 0; j < n; ++j) rowsum += x[idx(r, j)];
          total += mi * (rowsum - x[idx(r, i)]);
          for (int j = 0; j < n; ++j) g[idx(r, j)] += mi * (j == i ? 0.0 : 1.0);
          break;
        }
        case WeakCostKind::MartonClassical:
        case WeakCostKind::MoreauYosida: {
          for (int j = 0; j < n; ++j) {
            double d = std::abs(grid.point(i) - grid.point(j));
            double cij = spec.kind == WeakCostKind::MartonClassical
                             ? std::pow(d, spec.p)
                             : 0.5 * spec.lambda * d * d;
            total += mi * cij * x[idx(r, j)];
            g[idx(r, j)] += mi * cij;
          }
          break;
        }
        case WeakCostKind::Barycentric: {
          double mass = 0.0, first = 0.0;
          for (int j = 0; j < n; ++j) {
            mass += x[idx(r, j)];
            first += x[idx(r, j)] * grid.point(j);
          }
          // theta evaluated at x_i - barycenter of the (near-normalized) row
          double mean = mass > 1e-12 ? first / mass : grid.point(i);
          double arg = grid.point(i) - mean;
          total += mi * spec.theta(arg);
          double dtheta = (spec.theta(arg + fd_h) - spec.theta(arg - fd_h)) / (2.0 * fd_h);
          for (int j = 0; j < n; ++j) {
            double dmean = mass > 1e-12 ? (grid.point(j) - mean) / mass : 0.0;
            g[idx(r, j)] += -mi * dtheta * dmean;
          }
          break;
        }
      }
    }
    return total;
  };

  // independent coupling start: every row equals nu
  VectorXd x0(nr * n);
  for (int r = 0; r < nr; ++r)
    for (int j = 0; j < n; ++j) x0[idx(r, j)] = nu[j];

  detail::AlOptions opt;
  opt.tol_feasibility = 1e-8;
  auto res = detail::al_minimize(value_and_grad, cons, std::move(x0), opt);
  if (res.feasibility > 1e-8)
    throw NumericalFailure("weak_ot_value: optimizer failed feasibility tolerance, residual = " +
                           std::to_string(res.feasibility));
  return std::max(res.objective, 0.0);
}

// mu =_c nu test: weak transport value below tol.
inline bool check_weak_target(const WeakCostSpec& spec, const DiscreteMeasure& mu,
                              const DiscreteMeasure& nu, double tol) {
  if (!(tol > 0.0)) throw InvalidArgument("check_weak_target: tol must be > 0");
  return weak_ot_value(spec, mu, nu) <= tol;
}

}  // namespace nesb

#endif  // NESB_WEAK_COST_HPP
