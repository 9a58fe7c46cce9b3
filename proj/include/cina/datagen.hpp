#pragma once

#include "cina/data.hpp"

#include <cstdint>
#include <random>
#include <vector>

namespace cina {

using Rng = std::mt19937_64;

/// Derives the seed of substream `index` from a root seed (splitmix64 mixing).
std::uint64_t substream_seed(std::uint64_t seed, std::uint64_t index);

enum class EtaPrior { fixed, shared_prior, disjoint_support_prior };

std::string to_string(EtaPrior p);
EtaPrior eta_prior_from_string(const std::string& s);

/// Fixed-graph design: correlated Gaussian covariates, logistic treatment on a
/// nonlinear feature map, linear outcome with constant effect tau.
struct SimAConfig {
  int n_datasets = 100;
  int units_min = 1024;
  int units_max = 1024;  // units drawn uniformly from [units_min, units_max]
  int dx = 10;
  double tau = -0.4;
  EtaPrior eta_prior = EtaPrior::fixed;
  double noise_variance = 0.1;
  double train_fraction = 0.6;
  double validation_fraction = 0.2;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Nonlinear, non-additive treatment feature map used by Simulation A:
/// (x0, x1, x2^2, x3, x4, x1 x2, x3 x4, x5, x6^2, x0 x6).
Vector sim_a_treatment_features(const Eigen::Ref<const Vector>& x);

/// Covariate correlation used by Simulation A: pairs (0,1),(2,3),(4,5),(6,7) at 0.5.
Matrix sim_a_covariance(int dx);

DatasetCollection gen_sim_a(const SimAConfig& cfg);

/// Linear-Gaussian structural causal model over a DAG in index order (edges i -> j only for i < j).
struct ScmSpec {
  Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic> adjacency;  // adjacency(i, j): edge i -> j
  Matrix weights;
  Vector noise_std;
  int treatment_node = 0;
  int effect_node = 1;

  int nodes() const { return static_cast<int>(adjacency.rows()); }
  /// Kahn's algorithm; throws ValidationError on a cycle.
  std::vector<int> topological_order() const;
  bool is_descendant(int from, int to) const;
  void validate() const;
};

struct ErConfig {
  int nodes = 10;
  int n_datasets = 200;
  int units = 512;
  double edge_prob_min = 0.25;
  double edge_prob_max = 0.5;
  double weight_min = 0.0;
  double weight_max = 3.0;
  double noise_min = 0.2;
  double noise_max = 2.0;
  double train_fraction = 0.6;
  double validation_fraction = 0.2;
  std::uint64_t seed = 0;

  void validate() const;
};

struct ErCollection {
  DatasetCollection collection;
  std::vector<ScmSpec> specs;
};

/// Random ER DAG with a treatment node that has the effect node as descendant.
/// Up to 100 DAG draws; throws Error if none qualifies.
ScmSpec sample_er_spec(const ErConfig& cfg, Rng& rng);

/// One dataset simulated from a spec. Covariates are every node except treatment and effect.
/// Everything is standardized afterwards and the ATE rescaled by the outcome's std.
Dataset simulate_scm(const ScmSpec& spec, int units, Rng& rng);

ErCollection gen_er_scm(const ErConfig& cfg);

/// Total causal effect of the treatment node on the effect node (sum over directed path products).
double true_ate_linear_scm(const ScmSpec& spec);

/// Mean outcome difference between do(T=1) and do(T=0). With `paired` the two
/// arms share noise draws.
double true_ate_monte_carlo(const ScmSpec& spec, long n, Rng& rng, bool paired = true);

struct MonteCarloAte {
  double mean = 0.0;
  double std_error = 0.0;
};

/// As true_ate_monte_carlo, also reporting the standard error of the mean.
MonteCarloAte monte_carlo_ate(const ScmSpec& spec, long n, Rng& rng, bool paired = true);

/// Splits [0, n) into train/validation/test by index.
std::vector<Split> make_splits(int n, double train_fraction, double validation_fraction);

}  // namespace cina
