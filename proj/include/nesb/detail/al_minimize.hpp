// SPDX-License-Identifier: Apache-2.0
#ifndef NESB_DETAIL_AL_MINIMIZE_HPP
#define NESB_DETAIL_AL_MINIMIZE_HPP

#include <Eigen/Core>
#include <cmath>
#include <functional>
#include <limits>
#include <utility>
#include <vector>

namespace nesb::detail {

using Eigen::VectorXd;

// One linear equality constraint sum_k coeff_k * x_{idx_k} = rhs.
struct LinearConstraint {
  std::vector<std::pair<int, double>> terms;
  double rhs = 0.0;
};

struct AlOptions {
  double penalty0 = 1.0;
  double penalty_max = 1e4;  // multipliers, not the penalty, close the gap
  int inner_iters = 50;      // gradient steps between multiplier updates
  int polish_iters = 4000;   // inner budget once the penalty stops ramping
  int max_epochs = 200;
  double tol_feasibility = 1e-8;
  double tol_objective = 1e-10;   // relative objective change across epochs
  double tol_stationarity = 1e-10;  // projected-gradient norm of the inner model
  double lower_bound = 0.0;      // projection clamp
};

struct AlResult {
  VectorXd x;
  double objective = 0.0;
  double feasibility = 0.0;  // sup-norm constraint residual
  int iterations = 0;
  bool converged = false;
  bool diverged = false;  // residual stuck while penalty saturated
};

// Augmented-Lagrangian solver for  min f(x)  s.t.  Ax = b, x >= lower_bound,
// f convex. The inner minimization is accelerated projected gradient (FISTA
// with function restart and a backtracked Lipschitz estimate); multipliers
// update and the penalty doubles after every inner block.
inline AlResult al_minimize(
    const std::function<double(const VectorXd&, VectorXd&)>& value_and_grad,
    const std::vector<LinearConstraint>& constraints, VectorXd x0,
    const AlOptions& opt = {}) {
  const int n = static_cast<int>(x0.size());
  const int m = static_cast<int>(constraints.size());
  const double inf = std::numeric_limits<double>::infinity();

  VectorXd x = std::move(x0);
  for (int i = 0; i < n; ++i) x[i] = std::max(x[i], opt.lower_bound);

  VectorXd lambda = VectorXd::Zero(m);
  double rho = opt.penalty0;

  VectorXd cbuf(m), gbuf(n), scratch(n);
  auto residuals = [&](const VectorXd& v, VectorXd& out) {
    for (int j = 0; j < m; ++j) {
      double s = -constraints[j].rhs;
      for (const auto& [k, a] : constraints[j].terms) s += a * v[k];
      out[j] = s;
    }
  };
  auto al_value = [&](const VectorXd& v) {
    residuals(v, cbuf);
    double f = value_and_grad(v, scratch);
    return f + lambda.dot(cbuf) + 0.5 * rho * cbuf.squaredNorm();
  };
  auto al_value_grad = [&](const VectorXd& v, VectorXd& g) {
    residuals(v, cbuf);
    double f = value_and_grad(v, g);
    for (int j = 0; j < m; ++j) {
      double w = lambda[j] + rho * cbuf[j];
      for (const auto& [k, a] : constraints[j].terms) g[k] += w * a;
    }
    return f + lambda.dot(cbuf) + 0.5 * rho * cbuf.squaredNorm();
  };
  auto project = [&](VectorXd& v) {
    for (int i = 0; i < n; ++i) v[i] = std::max(v[i], opt.lower_bound);
  };

  AlResult out;
  double prev_obj = inf;
  double lipschitz = 1.0;
  int total_iters = 0;
  double best_feas = inf;
  int stall_epochs = 0;

  bool ramping = true;
  for (int epoch = 0; epoch < opt.max_epochs; ++epoch) {
    // FISTA block on the current augmented Lagrangian; short blocks while
    // the penalty ramps, long polishing blocks once it is frozen
    const int budget = ramping ? opt.inner_iters : opt.polish_iters;
    VectorXd y = x, x_prev = x;
    double momentum = 1.0;
    double fx = al_value(x);
    lipschitz = std::max(lipschitz * 0.25, 1e-12);
    for (int it = 0; it < budget; ++it) {
      VectorXd gy(n);
      double phi_y = al_value_grad(y, gy);
      VectorXd xn;
      double phi_n = 0.0;
      bool ok = false;
      for (int bt = 0; bt < 120; ++bt) {
        xn = y - gy / lipschitz;
        project(xn);
        phi_n = al_value(xn);
        VectorXd dxv = xn - y;
        if (phi_n <= phi_y + gy.dot(dxv) + 0.5 * lipschitz * dxv.squaredNorm() + 1e-15) {
          ok = true;
          break;
        }
        lipschitz *= 2.0;
      }
      ++total_iters;
      if (!ok || (xn - y).cwiseAbs().maxCoeff() == 0.0) break;
      double momentum_next = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * momentum * momentum));
      if (phi_n > fx) {  // function restart
        y = xn;
        momentum = 1.0;
      } else {
        y = xn + ((momentum - 1.0) / momentum_next) * (xn - x_prev);
        project(y);  // keep the extrapolation inside the objective's domain
        momentum = momentum_next;
      }
      x_prev = xn;
      x = xn;
      fx = std::min(fx, phi_n);
    }

    residuals(x, cbuf);
    double feas = m == 0 ? 0.0 : cbuf.cwiseAbs().maxCoeff();
    double obj = value_and_grad(x, scratch);
    double rel_change = std::abs(obj - prev_obj) / std::max(1.0, std::abs(obj));

    // inner stationarity of the AL model at the current penalty
    VectorXd g(n);
    al_value_grad(x, g);
    VectorXd probe = x - g / std::max(lipschitz, 1.0);
    project(probe);
    double stationarity = (x - probe).cwiseAbs().maxCoeff() * std::max(lipschitz, 1.0);

    if (feas <= opt.tol_feasibility && rel_change <= opt.tol_objective &&
        stationarity <= opt.tol_stationarity * std::max(1.0, std::abs(obj))) {
      out.converged = true;
      out.x = x;
      out.objective = obj;
      out.feasibility = feas;
      out.iterations = total_iters;
      return out;
    }
    prev_obj = obj;

    lambda += rho * cbuf;
    if (feas <= opt.tol_feasibility || rho >= opt.penalty_max)
      ramping = false;
    else
      rho *= 2.0;

    if (feas < best_feas * 0.9) {
      best_feas = feas;
      stall_epochs = 0;
    } else if (rho >= opt.penalty_max) {
      ++stall_epochs;
    }
    if (stall_epochs > 60 && feas > 1e-6) {
      out.diverged = true;
      break;
    }
  }

  residuals(x, cbuf);
  out.x = x;
  out.objective = value_and_grad(x, scratch);
  out.feasibility = m == 0 ? 0.0 : cbuf.cwiseAbs().maxCoeff();
  out.iterations = total_iters;
  out.converged = false;
  return out;
}

}  // namespace nesb::detail

#endif  // NESB_DETAIL_AL_MINIMIZE_HPP
