// SPDX-License-Identifier: Apache-2.0
#ifndef NESB_GRID_HPP
#define NESB_GRID_HPP

#include <Eigen/Core>
#include <cmath>
#include <limits>
#include <string>

#include "nesb/errors.hpp"

namespace nesb {

using Eigen::MatrixXd;
using Eigen::VectorXd;

inline constexpr double kInf = std::numeric_limits<double>::infinity();

// Uniform 1-D state grid x_min = x_0 < ... < x_{n-1} = x_max.
struct GridSpec {
  double x_min = -1.0;
  double x_max = 1.0;
  int n_states = 2;

  GridSpec() = default;
  GridSpec(double lo, double hi, int n) : x_min(lo), x_max(hi), n_states(n) {
    if (!(x_min < x_max)) throw InvalidArgument("GridSpec: x_min must be < x_max");
    if (n_states < 2) throw InvalidArgument("GridSpec: n_states must be >= 2");
  }

  double dx() const { return (x_max - x_min) / (n_states - 1); }
  double point(int i) const { return x_min + i * dx(); }
  VectorXd points() const {
    VectorXd x(n_states);
    for (int i = 0; i < n_states; ++i) x[i] = point(i);
    return x;
  }

  friend bool operator==(const GridSpec& a, const GridSpec& b) {
    return a.x_min == b.x_min && a.x_max == b.x_max && a.n_states == b.n_states;
  }
};

struct TimeGridSpec {
  double horizon = 1.0;
  int n_steps = 1;

  TimeGridSpec() = default;
  TimeGridSpec(double T, int n) : horizon(T), n_steps(n) {
    if (!(horizon > 0.0)) throw InvalidArgument("TimeGridSpec: horizon must be > 0");
    if (n_steps < 1) throw InvalidArgument("TimeGridSpec: n_steps must be >= 1");
  }

  double dt() const { return horizon / n_steps; }
  double time(int k) const { return k * dt(); }
};

// Nonnegative weights on the state grid; optionally a probability vector.
struct DiscreteMeasure {
  GridSpec grid;
  VectorXd weights;

  DiscreteMeasure() = default;
  DiscreteMeasure(GridSpec g, VectorXd w, bool require_probability = true)
      : grid(g), weights(std::move(w)) {
    if (weights.size() != grid.n_states)
      throw InvalidArgument("DiscreteMeasure: weight size does not match grid");
    for (int i = 0; i < weights.size(); ++i) {
      if (std::isnan(weights[i]) || weights[i] < 0.0)
        throw InvalidArgument("DiscreteMeasure: weights must be finite and >= 0");
    }
    if (require_probability && std::abs(weights.sum() - 1.0) > 1e-12)
      throw InvalidArgument("DiscreteMeasure: weights must sum to 1 (got " +
                            std::to_string(weights.sum()) + ")");
  }

  static DiscreteMeasure uniform(const GridSpec& g) {
    return DiscreteMeasure(g, VectorXd::Constant(g.n_states, 1.0 / g.n_states));
  }
  static DiscreteMeasure point_mass(const GridSpec& g, int i) {
    VectorXd w = VectorXd::Zero(g.n_states);
    w[i] = 1.0;
    return DiscreteMeasure(g, std::move(w));
  }
  // Normalizes an arbitrary nonnegative vector to a probability.
  static DiscreteMeasure normalized(const GridSpec& g, const VectorXd& raw) {
    double s = raw.sum();
    if (!(s > 0.0)) throw InvalidArgument("DiscreteMeasure: cannot normalize zero mass");
    return DiscreteMeasure(g, raw / s);
  }

  int size() const { return static_cast<int>(weights.size()); }
  double operator[](int i) const { return weights[i]; }
  double mean() const { return grid.points().dot(weights); }
};

}  // namespace nesb

#endif  // NESB_GRID_HPP
