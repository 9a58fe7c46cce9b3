#include "cina/baselines.hpp"

#include "cina/error.hpp"

#include <chrono>
#include <cmath>
#include <iostream>

namespace cina {

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

double sigmoid(double z) { return z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)); }

// log(1 + exp(z)) without overflow
double softplus(double z) { return z > 0.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

// Design matrix with a leading intercept column.
Matrix with_intercept(const Matrix& x) {
  Matrix a(x.rows(), x.cols() + 1);
  a.col(0).setOnes();
  a.rightCols(x.cols()) = x;
  return a;
}

// Penalized negative log-likelihood.
double objective(const Matrix& a, const Vector& t, const Vector& theta, double ridge) {
  const Vector z = a * theta;
  double nll = 0.0;
  for (Eigen::Index i = 0; i < z.size(); ++i) nll += softplus(z(i)) - t(i) * z(i);
  return nll + 0.5 * ridge * theta.tail(theta.size() - 1).squaredNorm();
}

}  // namespace

AteEstimate naive_estimator(const Dataset& d) {
  d.validate();
  const auto t0 = std::chrono::steady_clock::now();
  BalancingWeights w;
  w.alpha.resize(d.size());
  const double nt = static_cast<double>(d.treated_count());
  const double nc = static_cast<double>(d.control_count());
  for (Eigen::Index i = 0; i < d.size(); ++i) w.alpha(i) = d.treatments(i) == 1 ? 1.0 / nt : 1.0 / nc;
  w.treated_sum = 1.0;
  w.control_sum = 1.0;
  AteEstimate est = estimate_ate(w, d);
  est.wall_time_s = seconds_since(t0);
  return est;
}

Vector PropensityModel::predict(const Matrix& covariates) const {
  Vector z = covariates * coefficients;
  z.array() += intercept;
  return z.unaryExpr([](double v) { return sigmoid(v); });
}

PropensityModel fit_propensity(const Dataset& d, const PropensityOptions& opts) {
  d.validate();
  const Matrix a = with_intercept(d.covariates);
  const Vector t = d.treatments.cast<double>();
  const Eigen::Index p = a.cols();
  Matrix penalty = Matrix::Identity(p, p) * opts.ridge;
  penalty(0, 0) = 0.0;

  Vector theta = Vector::Zero(p);
  const double mean_t = t.mean();
  theta(0) = std::log(mean_t / (1.0 - mean_t));
  double current = objective(a, t, theta, opts.ridge);

  PropensityModel m;
  for (int it = 1; it <= opts.max_iterations; ++it) {
    m.iterations = it;
    const Vector prob = (a * theta).unaryExpr([](double v) { return sigmoid(v); });
    const Vector s = prob.cwiseProduct(Vector::Ones(prob.size()) - prob);
    const Vector grad = a.transpose() * (prob - t) + penalty * theta;
    const Matrix hess = a.transpose() * s.asDiagonal() * a + penalty;
    // a tiny jitter keeps the solve defined when every s_i underflows
    const Vector step = (hess + 1e-12 * Matrix::Identity(p, p)).ldlt().solve(grad);

    double scale = 1.0;
    Vector next = theta - step;
    double value = objective(a, t, next, opts.ridge);
    for (int halvings = 0; halvings < 30 && !(value <= current); ++halvings) {
      scale *= 0.5;
      next = theta - scale * step;
      value = objective(a, t, next, opts.ridge);
    }
    if (!(value <= current)) break;  // no descent left along the Newton direction
    const double moved = (scale * step).lpNorm<Eigen::Infinity>();
    theta = next;
    current = value;
    if (moved <= opts.tolerance * (1.0 + theta.lpNorm<Eigen::Infinity>())) {
      m.converged = true;
      break;
    }
  }
  m.intercept = theta(0);
  m.coefficients = theta.tail(p - 1);
  if (!m.converged) {
    std::cerr << "warning: propensity fit for '" << d.id << "' did not converge in " << m.iterations
              << " iterations\n";
  }
  return m;
}

Vector clipped_propensities(const Dataset& d) {
  const Dataset z = standardize(d);
  return fit_propensity(z).predict(z.covariates).cwiseMax(kPropensityClipLow).cwiseMin(kPropensityClipHigh);
}

AteEstimate ipw_from_propensities(const Dataset& d, const Vector& e) {
  const double n = static_cast<double>(d.size());
  BalancingWeights w;
  w.alpha.resize(d.size());
  for (Eigen::Index i = 0; i < d.size(); ++i) {
    w.alpha(i) = (d.treatments(i) == 1 ? 1.0 / e(i) : 1.0 / (1.0 - e(i))) / n;
    (d.treatments(i) == 1 ? w.treated_sum : w.control_sum) += w.alpha(i);
  }
  AteEstimate est = estimate_ate(w, d);
  est.dataset_id = d.id;
  return est;
}

AteEstimate ipw_estimator(const Dataset& d) {
  const auto t0 = std::chrono::steady_clock::now();
  AteEstimate est = ipw_from_propensities(d, clipped_propensities(d));
  est.wall_time_s = seconds_since(t0);
  return est;
}

AteEstimate snipw_from_propensities(const Dataset& d, const Vector& e) {
  Vector raw(d.size());
  for (Eigen::Index i = 0; i < d.size(); ++i) raw(i) = d.treatments(i) == 1 ? 1.0 / e(i) : 1.0 / (1.0 - e(i));
  return estimate_ate(project_onto_A(raw, d.signs()), d);
}

AteEstimate self_normalized_ipw(const Dataset& d) {
  const auto t0 = std::chrono::steady_clock::now();
  AteEstimate est = snipw_from_propensities(d, clipped_propensities(d));
  est.wall_time_s = seconds_since(t0);
  return est;
}

AteEstimate mean_prediction(const std::vector<const Dataset*>& training, const Dataset& test) {
  const auto t0 = std::chrono::steady_clock::now();
  if (training.empty()) throw ValidationError("mean prediction needs at least one training dataset");
  double total = 0.0;
  for (const Dataset* d : training) {
    if (!d->true_ate) throw ValidationError("training dataset '" + d->id + "' has no true ATE");
    total += *d->true_ate;
  }
  AteEstimate est;
  est.value = total / static_cast<double>(training.size());
  est.dataset_id = test.id;
  est.wall_time_s = seconds_since(t0);
  return est;
}

AteEstimate mean_prediction(const DatasetCollection& training, const Dataset& test) {
  return mean_prediction(training.by_split(Split::train), test);
}

}  // namespace cina
