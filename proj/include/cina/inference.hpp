#pragma once

#include "cina/model.hpp"

#include <functional>
#include <string>
#include <vector>

namespace cina {

struct AteEstimate {
  double value = 0.0;
  BalancingWeights weights;
  std::string dataset_id;
  double wall_time_s = 0.0;
};

/// tau_hat = sum_T alpha_i Y_i - sum_C alpha_i Y_i. Throws ValidationError on a length mismatch.
AteEstimate estimate_ate(const BalancingWeights& weights, const Dataset& d);

/// One forward pass of a trained model followed by estimate_ate. Params are not modified.
/// Throws ValidationError when the covariate dimension differs from the trained one.
AteEstimate zero_shot_infer(const Dataset& d, const ModelParams& p);

/// Maps a dataset to balancing weights in A.
using BalancingSolver = std::function<BalancingWeights(const Dataset&)>;

/// Exact QP on the exponential kernel of the standardized covariates.
BalancingSolver qp_solver(const QpOptions& opts = {});
/// Forward pass of a trained model.
BalancingSolver model_solver(const ModelParams& p);

/// Weights of the QP oracle for one dataset (same keys as qp_solver).
BalancingWeights oracle_weights(const Dataset& d, const QpOptions& opts = {});

struct IteEstimate {
  Eigen::Index unit_index = 0;
  double value = 0.0;
  Eigen::Index neighbor_count = 0;
  std::vector<Eigen::Index> neighbors;          // contributing neighbors
  std::vector<double> contributing_estimates;  // one per contributing neighbor
  std::vector<Eigen::Index> skipped_neighbors;  // |alpha_hat_i| <= kIteAlphaFloor
};

inline constexpr double kIteAlphaFloor = 1e-6;

/// The k nearest units to `unit` (itself included) by Euclidean distance on standardized covariates.
/// Ties break by index.
std::vector<Eigen::Index> nearest_units(const Dataset& d, Eigen::Index unit, Eigen::Index k);

/// Counterfactual readout for unit i: alpha from the observed signs, alpha_hat after
/// flipping W_i, then
///   alpha_hat_i Yhat_i = -alpha_i Y_i + sum_{j != i} (alpha_hat_j - alpha_j) W_i W_j Y_j.
/// Returns W_i (Y_i - Yhat_i), or nullopt when |alpha_hat_i| <= kIteAlphaFloor.
std::optional<double> ite_contribution(const Dataset& d, const BalancingWeights& observed,
                                       const BalancingSolver& solver, Eigen::Index i);

/// Mean of the neighbor contributions. Throws Error when every neighbor is skipped.
IteEstimate estimate_ite(const Dataset& d, const BalancingSolver& solver, Eigen::Index unit, Eigen::Index k = 5);

}  // namespace cina
