#pragma once

#include "cina/inference.hpp"

namespace cina {

/// Uniform weights within each group: mean(Y_T) - mean(Y_C).
AteEstimate naive_estimator(const Dataset& d);

struct PropensityModel {
  Vector coefficients;
  double intercept = 0.0;
  bool converged = false;
  int iterations = 0;

  /// P(T = 1 | x) for each row.
  Vector predict(const Matrix& covariates) const;
};

struct PropensityOptions {
  int max_iterations = 100;
  double tolerance = 1e-8;
  /// Penalty (ridge/2) ||coefficients||^2; the intercept is not penalized.
  double ridge = 1e-6;
};

/// Ridge-penalized logistic regression of T on X by Newton/IRLS with step halving.
/// Expects standardized covariates. Non-convergence returns the last iterate with
/// converged = false and a warning on stderr.
PropensityModel fit_propensity(const Dataset& d, const PropensityOptions& opts = {});

inline constexpr double kPropensityClipLow = 0.01;
inline constexpr double kPropensityClipHigh = 0.99;

/// Propensities of a logistic fit on the standardized covariates, clipped to [0.01, 0.99].
Vector clipped_propensities(const Dataset& d);

/// (1/N) sum T Y / e - (1/N) sum (1 - T) Y / (1 - e).
AteEstimate ipw_estimator(const Dataset& d);
AteEstimate ipw_from_propensities(const Dataset& d, const Vector& e);

/// IPW weights renormalized within each group, then estimate_ate.
AteEstimate self_normalized_ipw(const Dataset& d);
AteEstimate snipw_from_propensities(const Dataset& d, const Vector& e);

/// Mean of the training datasets' true ATEs. Throws ValidationError when a truth is missing.
AteEstimate mean_prediction(const std::vector<const Dataset*>& training, const Dataset& test);
/// Uses the train split of the collection.
AteEstimate mean_prediction(const DatasetCollection& training, const Dataset& test);

}  // namespace cina
