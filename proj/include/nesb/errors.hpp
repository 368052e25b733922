// SPDX-License-Identifier: Apache-2.0
#ifndef NESB_ERRORS_HPP
#define NESB_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace nesb {

struct InvalidArgument : std::invalid_argument {
  explicit InvalidArgument(const std::string& what) : std::invalid_argument(what) {}
};

struct DomainError : std::domain_error {
  explicit DomainError(const std::string& what) : std::domain_error(what) {}
};

// A required support/reachability condition fails (zero-mass state needed).
struct SupportError : std::runtime_error {
  explicit SupportError(const std::string& what) : std::runtime_error(what) {}
};

// Enumeration bound exceeded (path tables, check-size caps).
struct TooLarge : std::runtime_error {
  explicit TooLarge(const std::string& what) : std::runtime_error(what) {}
};

// Problem has no feasible point (empty constraint set, root not bracketable).
struct Infeasible : std::runtime_error {
  explicit Infeasible(const std::string& what) : std::runtime_error(what) {}
};

// Dual functional is -inf / OCE undefined for a state charged by mu0.
struct DualInfeasible : std::runtime_error {
  explicit DualInfeasible(const std::string& what) : std::runtime_error(what) {}
};

// An iterative method ran out of iterations; message carries last residuals.
struct Unconverged : std::runtime_error {
  Unconverged(const std::string& what, double residual)
      : std::runtime_error(what), last_residual(residual) {}
  double last_residual;
};

// A discretization-quality or positivity check failed inside a scheme.
struct NumericalFailure : std::runtime_error {
  explicit NumericalFailure(const std::string& what) : std::runtime_error(what) {}
};

// Monte-Carlo estimate is statistically unusable (effective sample size).
struct StatisticalFailure : std::runtime_error {
  explicit StatisticalFailure(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace nesb

#endif  // NESB_ERRORS_HPP
