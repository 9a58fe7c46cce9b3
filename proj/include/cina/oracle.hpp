#pragma once

#include "cina/kernel.hpp"

#include <string>
#include <vector>

namespace cina {

/// Per-unit balancing weights. Inside the constraint set A each group sums to one.
struct BalancingWeights {
  Vector alpha;
  double treated_sum = 0.0;
  double control_sum = 0.0;
  /// alpha^T K_phi alpha at this point.
  double objective = 0.0;

  // Solver diagnostics; left at their defaults for weights that were not solved for.
  long iterations = 0;
  double residual = 0.0;
  bool converged = true;
  std::string stop_reason;
};

/// Clamp at zero, then rescale each group to sum one. A group without positive
/// mass falls back to uniform weights. Throws if either group is empty.
BalancingWeights project_onto_A(const Vector& alpha, const Vector& signs);

/// [K_phi]_ij = W_i W_j G_ij.
Matrix signed_kernel(const GramCache& g, const Vector& signs);

/// alpha^T K_phi alpha = ||sum_i alpha_i W_i phi(X_i)||^2, the adversarial
/// bound on the squared conditional bias over the unit RKHS ball.
double conditional_bias_bound(const Vector& alpha, const GramCache& g, const Vector& signs);
inline double conditional_bias_bound(const BalancingWeights& w, const GramCache& g, const Vector& signs) {
  return conditional_bias_bound(w.alpha, g, signs);
}

struct DykstraOptions {
  double tolerance = 1e-12;
  int max_iterations = 10000;
};

/// Euclidean projection onto {0 <= x <= 1} intersected with the affine set
/// {A x = b} by Dykstra's alternating projections. Rows of `constraints`
/// must be mutually orthogonal (true for the group indicators and for W).
Vector dykstra_project(const Vector& z, const Matrix& constraints, const Vector& rhs,
                       const DykstraOptions& opts = {});

struct QpOptions {
  /// Relative projected-gradient (KKT) residual at which the solver stops.
  double tolerance = 1e-7;
  long max_iterations = 100000;
  int power_iterations = 50;
  /// Throw ConvergenceError when the cap fires; otherwise return the last iterate
  /// with converged = false.
  bool throw_on_cap = true;
  DykstraOptions projection{};
};

/// min alpha^T K_phi alpha over A, by accelerated projected gradient with a
/// Dykstra projection onto A.
BalancingWeights solve_balancing_qp(const GramCache& g, const Vector& signs, const QpOptions& opts = {});

/// min alpha^T K_phi alpha - 2 lambda 1^T alpha  s.t.  W^T alpha = 0, 0 <= alpha <= 1.
/// Returned weights are the raw dual coefficients (not projected onto A);
/// `objective` holds alpha^T K_phi alpha.
BalancingWeights solve_dual_svm(const GramCache& g, const Vector& signs, double lambda,
                                const QpOptions& opts = {});

struct SvmSweepEntry {
  double lambda = 0.0;
  double projected_objective = 0.0;
};

struct SvmSweepResult {
  double best_lambda = 0.0;
  BalancingWeights raw;        // dual solution at best_lambda
  BalancingWeights projected;  // project_onto_A(raw)
  std::vector<SvmSweepEntry> log;
};

/// Solves the dual SVM at each lambda and keeps the one whose projection onto A
/// has the smallest balancing objective.
SvmSweepResult svm_lambda_sweep(const GramCache& g, const Vector& signs, const std::vector<double>& lambdas,
                                const QpOptions& opts = {});

/// n points geometrically spaced on [lo, hi] (n == 1 gives {lo}).
std::vector<double> log_grid(double lo, double hi, int n);

}  // namespace cina
