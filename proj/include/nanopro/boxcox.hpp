#pragma once

#include <span>
#include <string>

namespace nanopro {

// y -> (y^lambda - 1) / lambda, or ln y at lambda = 0.
struct BoxCoxTransform {
  double lambda = 1.0;
  std::string fitted_on;
};

inline constexpr double kBoxCoxLambdaMin = -2.0;
inline constexpr double kBoxCoxLambdaMax = 2.0;
inline constexpr double kBoxCoxGridStep = 0.01;

// Profile log-likelihood of lambda for positive data (constant terms dropped):
// -n/2 * ln(var(z)) + (lambda - 1) * sum(ln y), with var the MLE variance.
double boxcox_log_likelihood(std::span<const double> values, double lambda);

// Grid search over [-2, 2] at 0.01 followed by golden-section refinement
// within one grid step. Throws Error(NonPositive) for any value <= 0.
BoxCoxTransform fit_boxcox(std::span<const double> values, std::string fitted_on = "train");

double boxcox_apply(double y, const BoxCoxTransform& t);
// Throws Error(OutOfRange) when 1 + lambda * z <= 0.
double boxcox_invert(double z, const BoxCoxTransform& t);
// Inversion for reporting: out-of-domain values saturate, result clipped to [0, 1].
double boxcox_invert_clipped(double z, const BoxCoxTransform& t);

}  // namespace nanopro
