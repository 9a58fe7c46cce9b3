#include "cina/oracle.hpp"

#include "cina/error.hpp"

#include <algorithm>
#include <cmath>

namespace cina {

namespace {

void check_signs(const Vector& signs, Eigen::Index n) {
  if (signs.size() != n) throw ValidationError("sign vector length does not match the Gram matrix");
  const auto treated = (signs.array() > 0).count();
  if (treated == 0 || treated == n) throw DegenerateDatasetError("balancing needs both groups non-empty");
}

Matrix group_indicators(const Vector& signs) {
  Matrix a(2, signs.size());
  a.row(0) = (signs.array() > 0).cast<double>().matrix().transpose();
  a.row(1) = (signs.array() < 0).cast<double>().matrix().transpose();
  return a;
}

/// Largest eigenvalue of a symmetric PSD matrix by power iteration.
double power_lambda_max(const Matrix& k, int iterations) {
  Vector v = Vector::Ones(k.rows()).normalized();
  double lambda = 0.0;
  for (int it = 0; it < iterations; ++it) {
    Vector w = k * v;
    const double norm = w.norm();
    if (norm == 0.0) return 0.0;
    lambda = v.dot(w);
    v = w / norm;
  }
  return std::max(lambda, (k * v).norm());
}

struct PgdResult {
  Vector x;
  long iterations = 0;
  double residual = 0.0;
  bool converged = false;
};

/// Accelerated projected gradient on 0.5 x^T H x + c^T x over box n {A x = b}.
PgdResult accelerated_pgd(const Matrix& h, const Vector& c, const Matrix& a, const Vector& b, Vector x0,
                          const QpOptions& opts, double lipschitz) {
  PgdResult r;
  const double step = lipschitz > 0 ? 1.0 / lipschitz : 1.0;
  auto project = [&](const Vector& z) { return dykstra_project(z, a, b, opts.projection); };

  Vector x = project(x0);
  Vector y = x;
  double t = 1.0;
  const double scale = std::max((h * x + c).lpNorm<Eigen::Infinity>(), 1e-300);
  for (long k = 1; k <= opts.max_iterations; ++k) {
    const Vector grad = h * y + c;
    Vector x_next = project(y - step * grad);
    r.residual = (y - x_next).lpNorm<Eigen::Infinity>() / step / scale;
    r.iterations = k;
    if (r.residual <= opts.tolerance) {
      r.x = std::move(x_next);
      r.converged = true;
      return r;
    }
    // Restart momentum when it points uphill.
    if ((y - x_next).dot(x_next - x) > 0.0) t = 1.0;
    const double t_next = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
    y = x_next + ((t - 1.0) / t_next) * (x_next - x);
    x = std::move(x_next);
    t = t_next;
  }
  r.x = std::move(x);
  return r;
}

BalancingWeights finish(Vector alpha, const Matrix& kphi, const Vector& signs, const PgdResult& r,
                        const QpOptions& opts, const char* what) {
  alpha = alpha.cwiseMax(0.0).cwiseMin(1.0);
  BalancingWeights w;
  w.treated_sum = (signs.array() > 0).select(alpha.array(), 0.0).sum();
  w.control_sum = (signs.array() < 0).select(alpha.array(), 0.0).sum();
  w.objective = std::max(0.0, alpha.dot(kphi * alpha));
  w.alpha = std::move(alpha);
  w.iterations = r.iterations;
  w.residual = r.residual;
  w.converged = r.converged;
  w.stop_reason = r.converged ? "tolerance" : "iteration_cap";
  if (!r.converged && opts.throw_on_cap) {
    throw ConvergenceError(std::string(what) + ": no convergence after " + std::to_string(r.iterations) +
                               " iterations (residual " + std::to_string(r.residual) + ")",
                           r.residual, r.iterations);
  }
  return w;
}

}  // namespace

BalancingWeights project_onto_A(const Vector& alpha, const Vector& signs) {
  if (alpha.size() != signs.size()) throw ValidationError("project_onto_A: length mismatch");
  const auto n = alpha.size();
  const auto treated = (signs.array() > 0).count();
  if (treated == 0 || treated == n) throw DegenerateDatasetError("project_onto_A: a group is empty");

  Vector out = alpha.cwiseMax(0.0);
  double sums[2] = {0.0, 0.0};
  for (Eigen::Index i = 0; i < n; ++i) sums[signs(i) > 0 ? 0 : 1] += out(i);
  const double counts[2] = {static_cast<double>(treated), static_cast<double>(n - treated)};
  for (Eigen::Index i = 0; i < n; ++i) {
    const int g = signs(i) > 0 ? 0 : 1;
    out(i) = sums[g] > 0.0 ? out(i) / sums[g] : 1.0 / counts[g];
  }

  BalancingWeights w;
  w.treated_sum = (signs.array() > 0).select(out.array(), 0.0).sum();
  w.control_sum = (signs.array() < 0).select(out.array(), 0.0).sum();
  w.alpha = std::move(out);
  return w;
}

Matrix signed_kernel(const GramCache& g, const Vector& signs) {
  return signs.asDiagonal() * g.gram * signs.asDiagonal();
}

double conditional_bias_bound(const Vector& alpha, const GramCache& g, const Vector& signs) {
  if (alpha.size() != g.size() || signs.size() != g.size()) {
    throw ValidationError("conditional_bias_bound: length mismatch");
  }
  const Vector s = alpha.cwiseProduct(signs);
  return std::max(0.0, s.dot(g.gram * s));
}

Vector dykstra_project(const Vector& z, const Matrix& constraints, const Vector& rhs, const DykstraOptions& opts) {
  const Vector row_norms = constraints.rowwise().squaredNorm();
  auto affine = [&](const Vector& v) {
    const Vector resid = constraints * v - rhs;
    return Vector(v - constraints.transpose() * resid.cwiseQuotient(row_norms));
  };

  Vector x = affine(z);
  Vector p = Vector::Zero(z.size());
  for (int it = 0; it < opts.max_iterations; ++it) {
    const Vector y = (x + p).cwiseMax(0.0).cwiseMin(1.0);
    p += x - y;
    Vector x_next = affine(y);
    const double change = (x_next - x).lpNorm<Eigen::Infinity>();
    const double violation = std::max(-x_next.minCoeff(), x_next.maxCoeff() - 1.0);
    x = std::move(x_next);
    if (change <= opts.tolerance && violation <= opts.tolerance) break;
  }
  return x;
}

BalancingWeights solve_balancing_qp(const GramCache& g, const Vector& signs, const QpOptions& opts) {
  check_signs(signs, g.size());
  const Matrix kphi = signed_kernel(g, signs);
  const Matrix a = group_indicators(signs);
  const Vector b = Vector::Ones(2);

  // Start from the naive (uniform within group) weights.
  const Vector x0 = project_onto_A(Vector::Ones(signs.size()), signs).alpha;
  const double lmax = power_lambda_max(kphi, opts.power_iterations);
  const auto r = accelerated_pgd(2.0 * kphi, Vector::Zero(signs.size()), a, b, x0, opts, 2.0 * lmax);
  return finish(r.x, kphi, signs, r, opts, "solve_balancing_qp");
}

BalancingWeights solve_dual_svm(const GramCache& g, const Vector& signs, double lambda, const QpOptions& opts) {
  check_signs(signs, g.size());
  if (!(lambda >= 0.0)) throw ValidationError("solve_dual_svm: lambda must be non-negative");
  const Matrix kphi = signed_kernel(g, signs);
  const Matrix a = signs.transpose();
  const Vector b = Vector::Zero(1);
  const double lmax = power_lambda_max(kphi, opts.power_iterations);
  const Vector c = Vector::Constant(signs.size(), -2.0 * lambda);
  const auto r = accelerated_pgd(2.0 * kphi, c, a, b, Vector::Zero(signs.size()), opts, 2.0 * lmax);
  return finish(r.x, kphi, signs, r, opts, "solve_dual_svm");
}

SvmSweepResult svm_lambda_sweep(const GramCache& g, const Vector& signs, const std::vector<double>& lambdas,
                                const QpOptions& opts) {
  if (lambdas.empty()) throw ConfigError("svm_lambda_sweep: empty lambda grid");
  SvmSweepResult best;
  bool have = false;
  for (double lambda : lambdas) {
    BalancingWeights raw = solve_dual_svm(g, signs, lambda, opts);
    BalancingWeights projected = project_onto_A(raw.alpha, signs);
    projected.objective = conditional_bias_bound(projected.alpha, g, signs);
    best.log.push_back({lambda, projected.objective});
    if (!have || projected.objective < best.projected.objective) {
      have = true;
      best.best_lambda = lambda;
      best.raw = std::move(raw);
      best.projected = std::move(projected);
    }
  }
  return best;
}

std::vector<double> log_grid(double lo, double hi, int n) {
  if (n < 1 || !(lo > 0.0) || hi < lo) throw ConfigError("log_grid: need n >= 1 and 0 < lo <= hi");
  std::vector<double> out;
  if (n == 1) return {lo};
  const double ratio = std::log(hi / lo) / (n - 1);
  for (int i = 0; i < n; ++i) out.push_back(lo * std::exp(ratio * i));
  out.back() = hi;
  return out;
}

}  // namespace cina
