// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "nesb/divergence.hpp"
#include "support/test_support.hpp"

namespace nesb {
namespace {

using testing::conjugate_by_maximization;
using testing::make_rng;
using testing::random_probability;
using testing::random_vector;

std::vector<DivergenceSpec> all_families() {
  return {DivergenceSpec::entropy(), DivergenceSpec::chi_squared(), DivergenceSpec::tsallis(2.0),
          DivergenceSpec::hellinger()};
}

GridSpec unit_grid(int n) { return GridSpec(0.0, 1.0, n); }

TEST(Divergence, EllFrozenValues) {
  EXPECT_DOUBLE_EQ(eval_ell(DivergenceSpec::entropy(), 1.0), 0.0);
  EXPECT_DOUBLE_EQ(eval_ell(DivergenceSpec::chi_squared(), 3.0), 2.0);
  EXPECT_DOUBLE_EQ(eval_ell(DivergenceSpec::tsallis(2.0), 0.5), -0.75);
  EXPECT_DOUBLE_EQ(eval_ell(DivergenceSpec::hellinger(), 4.0), 1.0);
  for (const auto& spec : all_families()) {
    EXPECT_DOUBLE_EQ(eval_ell(spec, 1.0), 0.0) << spec.name();
    EXPECT_TRUE(std::isinf(eval_ell(spec, -0.5))) << spec.name();
    EXPECT_THROW(eval_ell(spec, std::nan("")), InvalidArgument) << spec.name();
  }
}

TEST(Divergence, ConjugateFrozenValues) {
  // sup(-ell) = 0 holds for the families with ell >= 0
  EXPECT_DOUBLE_EQ(eval_conjugate(DivergenceSpec::entropy(), 0.0), 0.0);
  EXPECT_DOUBLE_EQ(eval_conjugate(DivergenceSpec::chi_squared(), 0.0), 0.0);
  EXPECT_DOUBLE_EQ(eval_conjugate(DivergenceSpec::hellinger(), 0.0), 0.0);
  // Tsallis on x >= 0 dips below zero, so its conjugate at 0 is 1/(q-1)
  EXPECT_DOUBLE_EQ(eval_conjugate(DivergenceSpec::tsallis(2.0), 0.0), 1.0);
  EXPECT_NEAR(conjugate_by_maximization(DivergenceSpec::tsallis(2.0), 0.0), 1.0, 1e-9);

  EXPECT_DOUBLE_EQ(eval_conjugate(DivergenceSpec::chi_squared(), 0.5), 0.625);
  EXPECT_NEAR(conjugate_by_maximization(DivergenceSpec::chi_squared(), 0.5), 0.625, 1e-9);
  EXPECT_DOUBLE_EQ(eval_conjugate(DivergenceSpec::chi_squared(), -2.0), -0.5);
  EXPECT_TRUE(std::isinf(eval_conjugate(DivergenceSpec::hellinger(), 1.2)));
}

TEST(Divergence, ConjugateDerivativeFrozenValues) {
  EXPECT_DOUBLE_EQ(eval_conjugate_derivative(DivergenceSpec::chi_squared(), -3.0), 0.0);
  EXPECT_DOUBLE_EQ(eval_conjugate_derivative(DivergenceSpec::entropy(), 0.0), 1.0);
  EXPECT_DOUBLE_EQ(eval_conjugate_derivative(DivergenceSpec::chi_squared(), 0.25), 1.25);
  double h = 1e-6;
  double fd = (eval_conjugate(DivergenceSpec::chi_squared(), 0.25 + h) -
               eval_conjugate(DivergenceSpec::chi_squared(), 0.25 - h)) /
              (2.0 * h);
  EXPECT_NEAR(fd, 1.25, 1e-8);
  EXPECT_THROW(eval_conjugate_derivative(DivergenceSpec::hellinger(), 1.0), DomainError);
}

TEST(Divergence, ConjugateMatchesNumericalSup) {
  auto rng = make_rng(11);
  std::uniform_real_distribution<double> u(-3.0, 0.9);
  for (const auto& spec : all_families()) {
    for (int k = 0; k < 100; ++k) {
      double y = u(rng);
      EXPECT_NEAR(eval_conjugate(spec, y), conjugate_by_maximization(spec, y), 1e-6)
          << spec.name() << " at y=" << y;
    }
  }
}

TEST(Divergence, ConjugateDerivativeMatchesFiniteDifferences) {
  auto rng = make_rng(12);
  std::uniform_real_distribution<double> u(-3.0, 0.9);
  const double h = 1e-6;
  for (const auto& spec : all_families()) {
    for (int k = 0; k < 100; ++k) {
      double y = u(rng);
      if (spec.kind == DivergenceKind::ChiSquared && std::abs(y + 1.0) < 1e-3) continue;
      if (spec.kind == DivergenceKind::Tsallis && std::abs(y) < 1e-3) continue;
      double fd = (eval_conjugate(spec, y + h) - eval_conjugate(spec, y - h)) / (2.0 * h);
      EXPECT_NEAR(eval_conjugate_derivative(spec, y), fd, 1e-6) << spec.name() << " y=" << y;
    }
  }
}

TEST(Divergence, FenchelYoungAndConvexity) {
  auto rng = make_rng(13);
  std::uniform_real_distribution<double> ux(0.0, 4.0);
  std::uniform_real_distribution<double> uy(-3.0, 0.9);
  std::uniform_real_distribution<double> ut(0.0, 1.0);
  for (const auto& spec : all_families()) {
    for (int k = 0; k < 200; ++k) {
      double x = ux(rng), y = uy(rng), t = ut(rng), x2 = ux(rng);
      EXPECT_GE(eval_ell(spec, x) + eval_conjugate(spec, y), x * y - 1e-10);
      double xstar = eval_conjugate_derivative(spec, y);
      EXPECT_NEAR(eval_ell(spec, xstar) + eval_conjugate(spec, y), xstar * y, 1e-8);
      double mix = eval_ell(spec, t * x + (1.0 - t) * x2);
      EXPECT_LE(mix, t * eval_ell(spec, x) + (1.0 - t) * eval_ell(spec, x2) + 1e-10);
    }
    // ell >= 0 on the domain (Tsallis excepted by its x >= 0 convention)
    if (spec.kind != DivergenceKind::Tsallis) {
      for (int k = 0; k < 50; ++k) EXPECT_GE(eval_ell(spec, ux(rng)), -1e-15);
    }
    // nondecreasing conjugate derivative
    double prev = -kInf;
    for (double y = -3.0; y <= 0.9; y += 0.01) {
      double d = eval_conjugate_derivative(spec, y);
      EXPECT_GE(d, prev - 1e-12);
      prev = d;
    }
  }
}

TEST(Divergence, DivergenceValueFrozen) {
  GridSpec g = unit_grid(2);
  for (const auto& spec : all_families()) {
    DiscreteMeasure p(g, VectorXd::Constant(2, 0.5));
    EXPECT_DOUBLE_EQ(divergence_value(spec, p, p), 0.0) << spec.name();
  }
  DiscreteMeasure q(g, (VectorXd(2) << 1.0, 0.0).finished());
  DiscreteMeasure p(g, (VectorXd(2) << 0.5, 0.5).finished());
  EXPECT_DOUBLE_EQ(divergence_value(DivergenceSpec::chi_squared(), q, p), 0.5);
  DiscreteMeasure point(g, (VectorXd(2) << 0.0, 1.0).finished());
  EXPECT_TRUE(std::isinf(divergence_value(DivergenceSpec::entropy(), q, point)));
  GridSpec g3 = unit_grid(3);
  DiscreteMeasure other(g3, VectorXd::Constant(3, 1.0 / 3.0));
  EXPECT_THROW(divergence_value(DivergenceSpec::entropy(), q, other), InvalidArgument);
}

TEST(Divergence, DivergenceValueNonnegativeByJensen) {
  auto rng = make_rng(14);
  GridSpec g = unit_grid(6);
  for (const auto& spec : all_families()) {
    for (int k = 0; k < 50; ++k) {
      DiscreteMeasure q(g, random_probability(rng, 6));
      DiscreteMeasure p(g, random_probability(rng, 6));
      EXPECT_GE(divergence_value(spec, q, p), -1e-12) << spec.name();
    }
  }
}

TEST(Divergence, OceFrozenValues) {
  GridSpec g = unit_grid(2);
  DiscreteMeasure uniform(g, VectorXd::Constant(2, 0.5));

  auto chi = oce_value(DivergenceSpec::chi_squared(), (VectorXd(2) << 0.0, 1.0).finished(),
                       uniform);
  EXPECT_NEAR(chi.value, 0.625, 1e-10);
  EXPECT_NEAR(chi.r_star, 0.5, 1e-10);
  auto chi_opt = oce_optimizer(DivergenceSpec::chi_squared(),
                               (VectorXd(2) << 0.0, 1.0).finished(), uniform);
  EXPECT_NEAR(chi_opt[0], 0.25, 1e-10);
  EXPECT_NEAR(chi_opt[1], 0.75, 1e-10);

  auto ent = oce_value(DivergenceSpec::entropy(),
                       (VectorXd(2) << 0.0, std::log(3.0)).finished(), uniform);
  EXPECT_NEAR(ent.value, std::log(2.0), 1e-10);
  EXPECT_NEAR(ent.r_star, std::log(2.0), 1e-10);
  auto ent_opt = oce_optimizer(DivergenceSpec::entropy(),
                               (VectorXd(2) << 0.0, std::log(3.0)).finished(), uniform);
  EXPECT_NEAR(ent_opt[0], 0.25, 1e-10);
  EXPECT_NEAR(ent_opt[1], 0.75, 1e-10);
}

TEST(Divergence, OceConstantTicketsCashInvariance) {
  GridSpec g = unit_grid(4);
  auto rng = make_rng(15);
  for (const auto& spec : all_families()) {
    DiscreteMeasure p(g, random_probability(rng, 4));
    // constant xi = c: value c, root c - ell'(1)
    double c = 0.7;
    auto oce = oce_value(spec, VectorXd::Constant(4, c), p);
    EXPECT_NEAR(oce.value, c, 1e-10) << spec.name();
    EXPECT_NEAR(oce.r_star, c - eval_ell_derivative(spec, 1.0), 1e-9) << spec.name();
    // xi = 0: optimizer is p itself
    auto opt = oce_optimizer(spec, VectorXd::Zero(4), p);
    for (int i = 0; i < 4; ++i) EXPECT_NEAR(opt[i], p[i], 1e-10) << spec.name();
    // cash invariance on random tickets (Hellinger stays inside xi + c < 1)
    bool hell = spec.kind == DivergenceKind::Hellinger;
    for (int k = 0; k < 25; ++k) {
      VectorXd xi = random_vector(rng, 4, -2.0, hell ? 0.7 : 2.0);
      double shift = random_vector(rng, 1, -1.0, hell ? 0.2 : 1.0)[0];
      auto base = oce_value(spec, xi, p);
      auto shifted = oce_value(spec, xi.array() + shift, p);
      EXPECT_NEAR(shifted.value, base.value + shift, 1e-10) << spec.name();
    }
  }
}

TEST(Divergence, OceRootResidualAndAttainment) {
  GridSpec g = unit_grid(6);
  auto rng = make_rng(16);
  for (const auto& spec : all_families()) {
    for (int k = 0; k < 50; ++k) {
      DiscreteMeasure p(g, random_probability(rng, 6));
      VectorXd xi = random_vector(rng, 6, -2.0, spec.kind == DivergenceKind::Hellinger ? 0.8 : 2.0);
      auto oce = oce_value(spec, xi, p);
      double mass = 0.0;
      for (int i = 0; i < 6; ++i)
        mass += p[i] * eval_conjugate_derivative(spec, xi[i] - oce.r_star);
      EXPECT_NEAR(mass, 1.0, 1e-10) << spec.name();

      auto q = oce_optimizer(spec, xi, p);
      EXPECT_NEAR(q.weights.sum(), 1.0, 1e-10) << spec.name();
      double attained = xi.dot(q.weights) - divergence_value(spec, q, p);
      EXPECT_NEAR(attained, oce.value, 1e-9) << spec.name();
    }
  }
}

TEST(Divergence, OceDualitySlack) {
  GridSpec g = unit_grid(6);
  auto rng = make_rng(17);
  for (const auto& spec : all_families()) {
    for (int k = 0; k < 100; ++k) {
      DiscreteMeasure p(g, random_probability(rng, 6));
      VectorXd xi = random_vector(rng, 6, -2.0, spec.kind == DivergenceKind::Hellinger ? 0.8 : 2.0);
      DiscreteMeasure q(g, random_probability(rng, 6));
      double oce = oce_value(spec, xi, p).value;
      double lower = xi.dot(q.weights) - divergence_value(spec, q, p);
      EXPECT_LE(lower, oce + 1e-10) << spec.name();
    }
  }
}

TEST(Divergence, OceInfeasibleSignals) {
  GridSpec g = unit_grid(2);
  DiscreteMeasure uniform(g, VectorXd::Constant(2, 0.5));
  // Hellinger with xi >= 1 on a charged state violates E[ell*(xi^+)] < inf
  EXPECT_THROW(oce_value(DivergenceSpec::hellinger(), (VectorXd(2) << 1.5, 0.0).finished(),
                         uniform),
               Infeasible);
}

TEST(Divergence, DataProcessingInequalityUnderMaps) {
  auto rng = make_rng(18);
  const int n = 8;
  GridSpec big = unit_grid(n);
  for (const auto& spec : all_families()) {
    for (int k = 0; k < 100; ++k) {
      DiscreteMeasure q(big, random_probability(rng, n));
      DiscreteMeasure p(big, random_probability(rng, n));
      std::uniform_int_distribution<int> classes(3, 5);
      int m = classes(rng);
      std::uniform_int_distribution<int> pick(0, m - 1);
      std::vector<int> map(n);
      for (int i = 0; i < n; ++i) map[i] = pick(rng);
      GridSpec small(0.0, 1.0, m);
      VectorXd qf = VectorXd::Zero(m), pf = VectorXd::Zero(m);
      for (int i = 0; i < n; ++i) {
        qf[map[i]] += q[i];
        pf[map[i]] += p[i];
      }
      double pushed = divergence_value(spec, DiscreteMeasure(small, qf), DiscreteMeasure(small, pf));
      double original = divergence_value(spec, q, p);
      EXPECT_LE(pushed, original + 1e-12) << spec.name();
    }
  }
}

TEST(Divergence, EllSecondMatchesFiniteDifferences) {
  for (const auto& spec : all_families()) {
    for (double x : {0.3, 0.8, 1.0, 1.7, 3.2}) {
      double h = 1e-5;
      double fd = (eval_ell_derivative(spec, x + h) - eval_ell_derivative(spec, x - h)) / (2.0 * h);
      EXPECT_NEAR(eval_ell_second(spec, x), fd, 1e-5 * std::max(1.0, std::abs(fd))) << spec.name();
    }
  }
}

}  // namespace
}  // namespace nesb
