#include "nanopro/boxcox.hpp"

#include <cmath>
#include <limits>
#include <vector>

#include "nanopro/error.hpp"

namespace nanopro {

namespace {

// expm1 keeps the transform accurate as lambda approaches zero.
double transform_log(double log_y, double lambda) {
  if (lambda == 0.0) return log_y;
  return std::expm1(lambda * log_y) / lambda;
}

}  // namespace

double boxcox_log_likelihood(std::span<const double> values, double lambda) {
  const auto n = static_cast<double>(values.size());
  double sum_log = 0.0;
  std::vector<double> z;
  z.reserve(values.size());
  for (const double y : values) {
    const double ly = std::log(y);
    sum_log += ly;
    z.push_back(transform_log(ly, lambda));
  }
  double mean = 0.0;
  for (const double v : z) mean += v;
  mean /= n;
  double var = 0.0;
  for (const double v : z) var += (v - mean) * (v - mean);
  var /= n;
  if (!(var > 0.0)) return -std::numeric_limits<double>::infinity();
  return -0.5 * n * std::log(var) + (lambda - 1.0) * sum_log;
}

BoxCoxTransform fit_boxcox(std::span<const double> values, std::string fitted_on) {
  if (values.size() < 2) throw Error(Errc::Empty, "Box-Cox fit needs at least two values");
  for (const double y : values) {
    if (!(y > 0.0)) throw Error(Errc::NonPositive, "Box-Cox requires positive values");
  }

  const int steps = static_cast<int>(std::lround((kBoxCoxLambdaMax - kBoxCoxLambdaMin) / kBoxCoxGridStep));
  double best_lambda = kBoxCoxLambdaMin;
  double best_ll = -std::numeric_limits<double>::infinity();
  for (int i = 0; i <= steps; ++i) {
    const double lambda = kBoxCoxLambdaMin + i * kBoxCoxGridStep;
    const double ll = boxcox_log_likelihood(values, lambda);
    if (ll > best_ll) {
      best_ll = ll;
      best_lambda = lambda;
    }
  }

  // Golden-section refinement on the bracket around the best grid point.
  double lo = std::max(kBoxCoxLambdaMin, best_lambda - kBoxCoxGridStep);
  double hi = std::min(kBoxCoxLambdaMax, best_lambda + kBoxCoxGridStep);
  const double inv_phi = (std::sqrt(5.0) - 1.0) / 2.0;
  double a = hi - inv_phi * (hi - lo);
  double b = lo + inv_phi * (hi - lo);
  double fa = boxcox_log_likelihood(values, a);
  double fb = boxcox_log_likelihood(values, b);
  for (int iter = 0; iter < 60 && hi - lo > 1e-10; ++iter) {
    if (fa > fb) {
      hi = b;
      b = a;
      fb = fa;
      a = hi - inv_phi * (hi - lo);
      fa = boxcox_log_likelihood(values, a);
    } else {
      lo = a;
      a = b;
      fa = fb;
      b = lo + inv_phi * (hi - lo);
      fb = boxcox_log_likelihood(values, b);
    }
  }
  const double refined = 0.5 * (lo + hi);
  if (boxcox_log_likelihood(values, refined) >= best_ll) best_lambda = refined;
  return BoxCoxTransform{best_lambda, std::move(fitted_on)};
}

double boxcox_apply(double y, const BoxCoxTransform& t) {
  if (!(y > 0.0)) throw Error(Errc::NonPositive, "Box-Cox apply requires y > 0");
  return transform_log(std::log(y), t.lambda);
}

double boxcox_invert(double z, const BoxCoxTransform& t) {
  if (t.lambda == 0.0) return std::exp(z);
  const double base = t.lambda * z;
  if (!(1.0 + base > 0.0)) {
    throw Error(Errc::OutOfRange, "Box-Cox inverse undefined for 1 + lambda*z <= 0");
  }
  return std::exp(std::log1p(base) / t.lambda);
}

double boxcox_invert_clipped(double z, const BoxCoxTransform& t) {
  double y;
  if (t.lambda != 0.0 && !(1.0 + t.lambda * z > 0.0)) {
    y = t.lambda > 0.0 ? 0.0 : 1.0;
  } else {
    y = boxcox_invert(z, t);
  }
  if (!(y >= 0.0)) y = 0.0;
  return y > 1.0 ? 1.0 : y;
}

}  // namespace nanopro
