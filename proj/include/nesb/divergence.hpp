// SPDX-License-Identifier: Apache-2.0
#ifndef NESB_DIVERGENCE_HPP
#define NESB_DIVERGENCE_HPP

#include <cmath>
#include <functional>
#include <limits>
#include <string>

#include "nesb/errors.hpp"
#include "nesb/grid.hpp"

namespace nesb {

enum class DivergenceKind { Entropy, ChiSquared, Tsallis, Hellinger };

// Penalty family ell with convex conjugate, its derivative, and ell''.
//
// Entropy     ell(x) = x log x - x + 1          ell*(y) = e^y - 1
// ChiSquared  ell(x) = (x-1)^2/2  on x >= 0     ell*(y) = y + y^2/2 (y >= -1), -1/2 else
// Tsallis(q)  ell(x) = (x^q-1)/(q-1) on x >= 0  ell*(y) = 1/(q-1) + ((q-1)y/q)^{q/(q-1)} (y >= 0)
// Hellinger   ell(x) = (1-sqrt(x))^2 on x >= 0  ell*(y) = y/(1-y) (y < 1), +inf else
//
// Tsallis uses the x >= 0 domain so that ell* matches the closed form above;
// on [0,1) the function dips below zero and ell*(0) = 1/(q-1) rather than 0.
struct DivergenceSpec {
  DivergenceKind kind = DivergenceKind::Entropy;
  double q = 2.0;  // Tsallis exponent, q > 1

  static DivergenceSpec entropy() { return {DivergenceKind::Entropy, 2.0}; }
  static DivergenceSpec chi_squared() { return {DivergenceKind::ChiSquared, 2.0}; }
  static DivergenceSpec tsallis(double q) {
    if (!(q > 1.0)) throw InvalidArgument("DivergenceSpec: Tsallis requires q > 1");
    return {DivergenceKind::Tsallis, q};
  }
  static DivergenceSpec hellinger() { return {DivergenceKind::Hellinger, 2.0}; }

  std::string name() const {
    switch (kind) {
      case DivergenceKind::Entropy: return "entropy";
      case DivergenceKind::ChiSquared: return "chi_squared";
      case DivergenceKind::Tsallis: return "tsallis";
      case DivergenceKind::Hellinger: return "hellinger";
    }
    return "?";
  }
};

inline double eval_ell(const DivergenceSpec& spec, double x) {
  if (std::isnan(x)) throw InvalidArgument("eval_ell: NaN input");
  if (x < 0.0) return kInf;
  switch (spec.kind) {
    case DivergenceKind::Entropy:
      return x == 0.0 ? 1.0 : x * std::log(x) - x + 1.0;
    case DivergenceKind::ChiSquared:
      return 0.5 * (x - 1.0) * (x - 1.0);
    case DivergenceKind::Tsallis:
      return (std::pow(x, spec.q) - 1.0) / (spec.q - 1.0);
    case DivergenceKind::Hellinger: {
      double s = 1.0 - std::sqrt(x);
      return s * s;
    }
  }
  return kInf;
}

inline double eval_conjugate(const DivergenceSpec& spec, double y) {
  if (std::isnan(y)) throw InvalidArgument("eval_conjugate: NaN input");
  switch (spec.kind) {
    case DivergenceKind::Entropy:
      return std::expm1(y);
    case DivergenceKind::ChiSquared:
      return y < -1.0 ? -0.5 : y + 0.5 * y * y;
    case DivergenceKind::Tsallis: {
      const double q = spec.q;
      if (y <= 0.0) return 1.0 / (q - 1.0);
      return 1.0 / (q - 1.0) + std::pow((q - 1.0) * y / q, q / (q - 1.0));
    }
    case DivergenceKind::Hellinger:
      return y >= 1.0 ? kInf : y / (1.0 - y);
  }
  return kInf;
}

inline double eval_conjugate_derivative(const DivergenceSpec& spec, double y) {
  if (std::isnan(y)) throw InvalidArgument("eval_conjugate_derivative: NaN input");
  switch (spec.kind) {
    case DivergenceKind::Entropy:
      return std::exp(y);
    case DivergenceKind::ChiSquared:
      return y < -1.0 ? 0.0 : 1.0 + y;
    case DivergenceKind::Tsallis: {
      const double q = spec.q;
      if (y <= 0.0) return 0.0;
      return std::pow((q - 1.0) * y / q, 1.0 / (q - 1.0));
    }
    case DivergenceKind::Hellinger: {
      if (y >= 1.0) throw DomainError("eval_conjugate_derivative: Hellinger needs y < 1");
      double d = 1.0 - y;
      return 1.0 / (d * d);
    }
  }
  return kInf;
}

inline double eval_ell_derivative(const DivergenceSpec& spec, double x) {
  if (std::isnan(x)) throw InvalidArgument("eval_ell_derivative: NaN input");
  switch (spec.kind) {
    case DivergenceKind::Entropy:
      return x <= 0.0 ? -kInf : std::log(x);
    case DivergenceKind::ChiSquared:
      return x - 1.0;
    case DivergenceKind::Tsallis:
      return spec.q * std::pow(x, spec.q - 1.0) / (spec.q - 1.0);
    case DivergenceKind::Hellinger:
      return x <= 0.0 ? -kInf : 1.0 - 1.0 / std::sqrt(x);
  }
  return kInf;
}

inline double eval_ell_second(const DivergenceSpec& spec, double x) {
  if (std::isnan(x)) throw InvalidArgument("eval_ell_second: NaN input");
  if (x < 0.0) return kInf;
  switch (spec.kind) {
    case DivergenceKind::Entropy:
      return x == 0.0 ? kInf : 1.0 / x;
    case DivergenceKind::ChiSquared:
      return 1.0;
    case DivergenceKind::Tsallis:
      return spec.q * std::pow(x, spec.q - 2.0);
    case DivergenceKind::Hellinger:
      return x == 0.0 ? kInf : 0.5 * std::pow(x, -1.5);
  }
  return kInf;
}

// I_ell(q|p) = sum_i p_i ell(q_i/p_i), with 0*ell(0/0) = 0 and +inf when
// q charges a p-null state.
inline double divergence_value(const DivergenceSpec& spec, const DiscreteMeasure& q,
                               const DiscreteMeasure& p) {
  if (q.size() != p.size() || !(q.grid == p.grid))
    throw InvalidArgument("divergence_value: measures live on different index sets");
  double total = 0.0;
  for (int i = 0; i < p.size(); ++i) {
    if (p[i] == 0.0) {
      if (q[i] > 0.0) return kInf;
      continue;
    }
    total += p[i] * eval_ell(spec, q[i] / p[i]);
  }
  return total;
}

namespace detail {

// Leftmost root of a nonincreasing g: smallest r with g(r) <= target.
// Bracket grows geometrically from [lo, hi]; lo_limit bounds the search from
// below (Hellinger's conjugate domain). Used by the OCE and by both
// Schroedinger sweeps, where flat stretches of g make "leftmost" the
// deterministic tie-break.
struct MonotoneRoot {
  double r = 0.0;
  double residual = 0.0;
  bool bracketed = false;
};

inline MonotoneRoot solve_monotone_root(const std::function<double(double)>& g, double target,
                                        double lo, double hi,
                                        double lo_limit = -kInf,
                                        double hi_limit = kInf,
                                        int max_iters = 200) {
  MonotoneRoot out;
  if (lo_limit > -kInf) lo = std::max(lo, lo_limit + 1e-12 * std::max(1.0, std::abs(lo_limit)));
  hi = std::min(hi, hi_limit);
  auto value = [&](double r) { return g(r); };

  double glo = value(lo);
  double step = std::max(1.0, hi - lo);
  int expand = 0;
  while (glo <= target && expand < 200) {
    // need g(lo) > target; move lo down (or toward the domain limit)
    if (lo_limit > -kInf) {
      double gap = lo - lo_limit;
      if (gap <= 1e-300) break;
      lo = lo_limit + gap / 2.0;
    } else {
      lo -= step;
      step *= 2.0;
    }
    glo = value(lo);
    ++expand;
  }
  if (glo <= target) {
    // g never exceeds target: the infimum of the root set is (at or below) lo
    out.r = lo;
    out.residual = std::abs(glo - target);
    out.bracketed = std::abs(glo - target) <= 1e-12;
    return out;
  }

  double ghi = value(hi);
  step = std::max(1.0, hi - lo);
  expand = 0;
  while (ghi > target && expand < 200 && hi < hi_limit) {
    hi = std::min(hi + step, hi_limit);
    step *= 2.0;
    ghi = value(hi);
    ++expand;
  }
  if (ghi > target) {
    out.r = hi;
    out.residual = std::abs(ghi - target);
    out.bracketed = false;
    return out;
  }

  for (int it = 0; it < max_iters; ++it) {
    double mid = 0.5 * (lo + hi);
    if (mid <= lo || mid >= hi) break;  // bracket at float resolution
    if (value(mid) > target)
      lo = mid;
    else
      hi = mid;
  }
  out.r = hi;
  out.residual = std::abs(value(hi) - target);
  out.bracketed = true;
  return out;
}

}  // namespace detail

struct OceResult {
  double value = 0.0;   // Phi_p(xi) = inf_r E_p[ell*(xi - r)] + r
  double r_star = 0.0;  // root of E_p[dell*(xi - r)] = 1
};

// Optimized certainty equivalent of xi under p, with its optimal shift.
// Throws Infeasible when E_p[ell*(xi^+)] is infinite (the integrability
// condition backing the dual representation) or when no root brackets.
inline OceResult oce_value(const DivergenceSpec& spec, const VectorXd& xi,
                           const DiscreteMeasure& p) {
  if (xi.size() != p.size()) throw InvalidArgument("oce_value: xi/p size mismatch");
  double check = 0.0;
  double xi_min = kInf, xi_max = -kInf;
  for (int i = 0; i < p.size(); ++i) {
    if (p[i] == 0.0) continue;
    if (std::isnan(xi[i])) throw InvalidArgument("oce_value: NaN in xi");
    check += p[i] * eval_conjugate(spec, std::max(xi[i], 0.0));
    xi_min = std::min(xi_min, xi[i]);
    xi_max = std::max(xi_max, xi[i]);
  }
  if (!std::isfinite(check))
    throw Infeasible("oce_value: E_p[ell*(xi^+)] is infinite");

  const double lo_limit =
      spec.kind == DivergenceKind::Hellinger ? xi_max - 1.0 : -kInf;
  auto g = [&](double r) {
    double s = 0.0;
    for (int i = 0; i < p.size(); ++i) {
      if (p[i] == 0.0) continue;
      s += p[i] * eval_conjugate_derivative(spec, xi[i] - r);
    }
    return s;
  };
  auto root = detail::solve_monotone_root(g, 1.0, xi_min - 10.0, xi_max + 10.0, lo_limit);
  if (!root.bracketed)
    throw Infeasible("oce_value: root of E_p[dell*(xi - r)] = 1 not bracketable");

  double val = root.r;
  for (int i = 0; i < p.size(); ++i) {
    if (p[i] == 0.0) continue;
    val += p[i] * eval_conjugate(spec, xi[i] - root.r);
  }
  return {val, root.r};
}

// Attaining measure q_i = p_i * dell*(xi_i - r*).
inline DiscreteMeasure oce_optimizer(const DivergenceSpec& spec, const VectorXd& xi,
                                     const DiscreteMeasure& p) {
  OceResult oce = oce_value(spec, xi, p);
  VectorXd w = VectorXd::Zero(p.size());
  for (int i = 0; i < p.size(); ++i) {
    if (p[i] == 0.0) continue;
    w[i] = p[i] * eval_conjugate_derivative(spec, xi[i] - oce.r_star);
  }
  return DiscreteMeasure(p.grid, std::move(w), /*require_probability=*/false);
}

}  // namespace nesb

#endif  // NESB_DIVERGENCE_HPP
