// SPDX-License-Identifier: Apache-2.0
#ifndef NESB_REF_CHAIN_HPP
#define NESB_REF_CHAIN_HPP

#include <Eigen/Core>
#include <cmath>
#include <functional>
#include <numbers>
#include <vector>

#include "nesb/errors.hpp"
#include "nesb/grid.hpp"

namespace nesb {

enum class KernelMode { Euler, Metropolized };

namespace detail {

inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }

// Gaussian N(mean, var) binned onto the grid; tail mass folds into the
// boundary states so rows stay stochastic. Returns escaped tail mass
// (beyond the outermost bin edges) for the discretization warning.
inline double binned_gaussian_row(const GridSpec& grid, double mean, double var,
                                  VectorXd& row) {
  const int n = grid.n_states;
  const double sd = std::sqrt(var);
  double prev = 0.0;
  for (int j = 0; j < n; ++j) {
    double cdf = j == n - 1 ? 1.0 : normal_cdf((grid.point(j) + 0.5 * grid.dx() - mean) / sd);
    row[j] = cdf - prev;
    prev = cdf;
  }
  double lo_edge = grid.x_min - 0.5 * grid.dx();
  double hi_edge = grid.x_max + 0.5 * grid.dx();
  return normal_cdf((lo_edge - mean) / sd) + 1.0 - normal_cdf((hi_edge - mean) / sd);
}

}  // namespace detail

// Discretized reference law: a time-inhomogeneous Markov chain on the state
// grid. Forward builds share one step kernel; time reversal produces
// per-step kernels.
struct ReferenceChain {
  GridSpec grid;
  TimeGridSpec time;
  VectorXd potential;  // U on the grid
  VectorXd drift;      // b = -dU/dx / 2, centered differences
  std::vector<MatrixXd> kernels;  // one row-stochastic matrix per step
  DiscreteMeasure nu0;
  bool reversible = false;
  bool discretization_warning = false;
  double escaped_mass = 0.0;

  const MatrixXd& kernel(int step) const { return kernels[step]; }
  int n_states() const { return grid.n_states; }
  int n_steps() const { return time.n_steps; }

  // Gibbs measure lambda ~ exp(-U), grid-normalized.
  VectorXd gibbs() const {
    VectorXd lam = (-(potential.array() - potential.minCoeff())).exp();
    return lam / lam.sum();
  }

  // Product kernel for steps [from, to).
  MatrixXd step_product(int from, int to) const {
    MatrixXd out = MatrixXd::Identity(n_states(), n_states());
    for (int s = from; s < to; ++s) out = out * kernels[s];
    return out;
  }
  MatrixXd full_kernel() const { return step_product(0, n_steps()); }

  // Time marginals m_0 = nu0, m_{s+1} = m_s K_s.
  std::vector<VectorXd> marginals() const {
    std::vector<VectorXd> m(n_steps() + 1);
    m[0] = nu0.weights;
    for (int s = 0; s < n_steps(); ++s) m[s + 1] = kernels[s].transpose() * m[s];
    return m;
  }
};

inline VectorXd centered_gradient(const GridSpec& grid, const VectorXd& f) {
  const int n = grid.n_states;
  const double dx = grid.dx();
  VectorXd g(n);
  g[0] = (f[1] - f[0]) / dx;
  for (int i = 1; i < n - 1; ++i) g[i] = (f[i + 1] - f[i - 1]) / (2.0 * dx);
  g[n - 1] = (f[n - 1] - f[n - 2]) / dx;
  return g;
}

// Builds the discrete reference chain for dX = b dt + dW, b = -U'/2.
// Euler: grid-binned Gaussian step, faithful to the SDE.
// Metropolized: symmetric binned-Gaussian proposal with Metropolis-Hastings
// acceptance for lambda ~ exp(-U); detailed balance holds to rounding.
inline ReferenceChain build_chain(const GridSpec& grid, const TimeGridSpec& time,
                                  const VectorXd& U, const DiscreteMeasure& nu0,
                                  KernelMode mode) {
  const int n = grid.n_states;
  if (U.size() != n) throw InvalidArgument("build_chain: potential size mismatch");
  for (int i = 0; i < n; ++i)
    if (!std::isfinite(U[i])) throw InvalidArgument("build_chain: potential must be finite");
  if (!(nu0.grid == grid)) throw InvalidArgument("build_chain: nu0 grid mismatch");

  ReferenceChain chain;
  chain.grid = grid;
  chain.time = time;
  chain.potential = U;
  chain.drift = -0.5 * centered_gradient(grid, U);
  chain.nu0 = nu0;

  const double dt = time.dt();
  MatrixXd K(n, n);
  VectorXd row(n);
  double escape = 0.0;

  if (mode == KernelMode::Euler) {
    for (int i = 0; i < n; ++i) {
      double mean = grid.point(i) + chain.drift[i] * dt;
      escape = std::max(escape, detail::binned_gaussian_row(grid, mean, dt, row));
      K.row(i) = row.transpose();
    }
    chain.reversible = false;
  } else {
    MatrixXd prop(n, n);
    for (int i = 0; i < n; ++i) {
      escape = std::max(escape, detail::binned_gaussian_row(grid, grid.point(i), dt, row));
      prop.row(i) = row.transpose();
    }
    VectorXd lam = chain.gibbs();
    K.setZero();
    for (int i = 0; i < n; ++i) {
      double stay = 0.0;
      for (int j = 0; j < n; ++j) {
        if (j == i) continue;
        double num = lam[j] * prop(j, i);
        double den = lam[i] * prop(i, j);
        double acc = den > 0.0 ? std::min(1.0, num / den) : 0.0;
        K(i, j) = prop(i, j) * acc;
        stay += K(i, j);
      }
      K(i, i) = 1.0 - stay;
    }
    chain.reversible = true;
  }

  chain.kernels.assign(time.n_steps, K);
  chain.escaped_mass = escape;
  chain.discretization_warning = escape > 1e-3;
  return chain;
}

// Joint law of (X_0, X_T): P01(x, y) = nu0(x) * (K^n)(x, y).
inline MatrixXd endpoint_kernel(const ReferenceChain& chain) {
  return chain.nu0.weights.asDiagonal() * chain.full_kernel();
}

// Exact time reversal by Bayes: the reversed step-t kernel is
//   Krev_t(y, x) = m_{n-1-t}(x) K_{n-1-t}(x, y) / m_{n-t}(y).
// States never reached (zero marginal) get a self-loop row; they carry no
// mass, so joint laws are preserved either way.
inline ReferenceChain reverse_chain(const ReferenceChain& chain) {
  const int n = chain.n_states();
  const int steps = chain.n_steps();
  auto m = chain.marginals();

  ReferenceChain rev;
  rev.grid = chain.grid;
  rev.time = chain.time;
  rev.potential = chain.potential;
  rev.drift = chain.drift;
  rev.nu0 = DiscreteMeasure(chain.grid, m[steps], /*require_probability=*/false);
  rev.escaped_mass = chain.escaped_mass;
  rev.discretization_warning = chain.discretization_warning;

  rev.kernels.resize(steps);
  for (int t = 0; t < steps; ++t) {
    const MatrixXd& K = chain.kernels[steps - 1 - t];
    const VectorXd& mfrom = m[steps - 1 - t];
    const VectorXd& mto = m[steps - t];
    MatrixXd R = MatrixXd::Zero(n, n);
    for (int y = 0; y < n; ++y) {
      if (mto[y] <= 0.0) {
        R(y, y) = 1.0;
        continue;
      }
      for (int x = 0; x < n; ++x) R(y, x) = mfrom[x] * K(x, y) / mto[y];
    }
    rev.kernels[t] = std::move(R);
  }

  VectorXd lam = chain.gibbs();
  rev.reversible =
      chain.reversible && (chain.nu0.weights - lam).cwiseAbs().maxCoeff() <= 1e-12;
  return rev;
}

using PathFunctional = std::function<double(const std::vector<int>&)>;

// E_P[f(X) | X_0 = x0, X_T = xT] by exact enumeration of interior paths.
inline double bridge_expectation(const ReferenceChain& chain, const PathFunctional& f,
                                 int x0, int xT) {
  const int n = chain.n_states();
  const int steps = chain.n_steps();
  double interior = std::pow(static_cast<double>(n), steps - 1);
  if (interior > 1e6) throw TooLarge("bridge_expectation: enumeration bound exceeded");
  if (chain.nu0[x0] <= 0.0 || chain.full_kernel()(x0, xT) <= 0.0)
    throw SupportError("bridge_expectation: endpoint pair has zero probability");

  std::vector<int> path(steps + 1);
  path[0] = x0;
  path[steps] = xT;
  double num = 0.0, den = 0.0;

  std::vector<int> odo(std::max(steps - 1, 0), 0);
  while (true) {
    for (int k = 0; k < steps - 1; ++k) path[k + 1] = odo[k];
    double w = 1.0;
    for (int s = 0; s < steps; ++s) w *= chain.kernels[s](path[s], path[s + 1]);
    if (w > 0.0) {
      num += w * f(path);
      den += w;
    }
    int carry = 0;
    while (carry < static_cast<int>(odo.size())) {
      if (++odo[carry] < n) break;
      odo[carry] = 0;
      ++carry;
    }
    if (carry == static_cast<int>(odo.size())) break;
  }
  if (den <= 0.0) throw SupportError("bridge_expectation: no path connects the endpoints");
  return num / den;
}

}  // namespace nesb

#endif  // NESB_REF_CHAIN_HPP
