#include "cina/inference.hpp"

#include "cina/error.hpp"

#include <algorithm>
#include <chrono>
#include <numeric>

namespace cina {

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

AteEstimate estimate_ate(const BalancingWeights& weights, const Dataset& d) {
  if (weights.alpha.size() != d.size()) {
    throw ValidationError("weights have " + std::to_string(weights.alpha.size()) + " entries but dataset '" + d.id +
                          "' has " + std::to_string(d.size()) + " units");
  }
  AteEstimate est;
  est.weights = weights;
  est.dataset_id = d.id;
  double value = 0.0;
  for (Eigen::Index i = 0; i < d.size(); ++i)
    value += (d.treatments(i) == 1 ? 1.0 : -1.0) * weights.alpha(i) * d.outcomes(i);
  est.value = value;
  return est;
}

AteEstimate zero_shot_infer(const Dataset& d, const ModelParams& p) {
  if (d.dim() != p.input_dim) {
    throw ValidationError("dataset '" + d.id + "' has " + std::to_string(d.dim()) +
                          " covariates but the model was trained on " + std::to_string(p.input_dim));
  }
  const auto t0 = std::chrono::steady_clock::now();
  const ForwardOutputs f = forward_extract(d, p);
  AteEstimate est = estimate_ate(f.alpha, d);
  est.wall_time_s = seconds_since(t0);
  return est;
}

BalancingWeights oracle_weights(const Dataset& d, const QpOptions& opts) {
  const GramCache g = build_gram(standardize_forward(d.covariates).z);
  return solve_balancing_qp(g, d.signs(), opts);
}

BalancingSolver qp_solver(const QpOptions& opts) {
  return [opts](const Dataset& d) { return oracle_weights(d, opts); };
}

BalancingSolver model_solver(const ModelParams& p) {
  return [p](const Dataset& d) { return forward_extract(d, p).alpha; };
}

std::vector<Eigen::Index> nearest_units(const Dataset& d, Eigen::Index unit, Eigen::Index k) {
  if (unit < 0 || unit >= d.size()) throw ValidationError("unit index " + std::to_string(unit) + " out of range");
  if (k < 1) throw ValidationError("neighbor count must be at least 1");
  const Matrix z = standardize_forward(d.covariates).z;
  Vector dist(d.size());
  for (Eigen::Index i = 0; i < d.size(); ++i) dist(i) = (z.row(i) - z.row(unit)).squaredNorm();
  std::vector<Eigen::Index> order(static_cast<std::size_t>(d.size()));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) { return dist(a) < dist(b); });
  // the target itself sits at distance zero; keep it first even when duplicates tie
  std::stable_partition(order.begin(), order.end(), [&](Eigen::Index i) { return i == unit; });
  order.resize(static_cast<std::size_t>(std::min(k, d.size())));
  return order;
}

std::optional<double> ite_contribution(const Dataset& d, const BalancingWeights& observed,
                                       const BalancingSolver& solver, Eigen::Index i) {
  Dataset flipped = d;
  flipped.treatments(i) = 1 - d.treatments(i);
  // flipping a singleton group would leave it empty
  if (flipped.treated_count() == 0 || flipped.control_count() == 0) return std::nullopt;
  const BalancingWeights hat = solver(flipped);
  if (std::abs(hat.alpha(i)) <= kIteAlphaFloor) return std::nullopt;

  const Vector& a = observed.alpha;
  double rhs = -a(i) * d.outcomes(i);
  for (Eigen::Index j = 0; j < d.size(); ++j) {
    if (j == i) continue;
    const double same = d.treatments(j) == d.treatments(i) ? 1.0 : -1.0;
    rhs += same * (hat.alpha(j) - a(j)) * d.outcomes(j);
  }
  const double counterfactual = rhs / hat.alpha(i);
  const double wi = d.treatments(i) == 1 ? 1.0 : -1.0;
  return wi * (d.outcomes(i) - counterfactual);
}

IteEstimate estimate_ite(const Dataset& d, const BalancingSolver& solver, Eigen::Index unit, Eigen::Index k) {
  d.validate();
  IteEstimate est;
  est.unit_index = unit;
  const BalancingWeights observed = solver(d);
  for (const Eigen::Index i : nearest_units(d, unit, k)) {
    if (const auto c = ite_contribution(d, observed, solver, i)) {
      est.neighbors.push_back(i);
      est.contributing_estimates.push_back(*c);
    } else {
      est.skipped_neighbors.push_back(i);
    }
  }
  if (est.contributing_estimates.empty()) {
    throw Error("no ITE estimate for unit " + std::to_string(unit) + ": every counterfactual weight is zero");
  }
  est.neighbor_count = static_cast<Eigen::Index>(est.contributing_estimates.size());
  est.value = std::accumulate(est.contributing_estimates.begin(), est.contributing_estimates.end(), 0.0) /
              static_cast<double>(est.neighbor_count);
  return est;
}

}  // namespace cina
