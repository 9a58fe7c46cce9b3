#include "cina/datagen.hpp"

#include "cina/error.hpp"

#include <cmath>
#include <algorithm>
#include <deque>

namespace cina {

namespace {

constexpr int kMaxRetries = 100;

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

double normal(Rng& rng) { return std::normal_distribution<double>(0.0, 1.0)(rng); }

struct SimAParams {
  double gamma0 = 0.0;
  Vector gamma;
};

Vector sample_eta(EtaPrior prior, Split split, int dim, Rng& rng) {
  double lo = -1.0, hi = 1.0;
  if (prior == EtaPrior::disjoint_support_prior) {
    if (split == Split::test) lo = 0.0;
    else hi = 0.0;
  }
  Vector eta(dim);
  for (int k = 0; k < dim; ++k) eta(k) = uniform(rng, lo, hi);
  return eta;
}

Dataset sim_a_dataset(const SimAConfig& cfg, const SimAParams& params, const Vector& eta,
                      const Eigen::LLT<Matrix>& chol, int units, Rng& rng) {
  const Matrix l = chol.matrixL();
  const double noise_sd = std::sqrt(cfg.noise_variance);
  for (int attempt = 0; attempt < kMaxRetries; ++attempt) {
    Dataset d;
    d.covariates.resize(units, cfg.dx);
    d.treatments.resize(units);
    d.outcomes.resize(units);
    Vector z(cfg.dx);
    for (int i = 0; i < units; ++i) {
      for (int k = 0; k < cfg.dx; ++k) z(k) = normal(rng);
      const Vector x = l * z;
      d.covariates.row(i) = x.transpose();
      const double p = sigmoid(eta.dot(sim_a_treatment_features(x)));
      const int t = std::bernoulli_distribution(p)(rng) ? 1 : 0;
      d.treatments(i) = t;
      d.outcomes(i) = params.gamma0 + params.gamma.dot(x) + cfg.tau * t + noise_sd * normal(rng);
    }
    const auto nt = d.treated_count();
    if (nt > 0 && nt < units) {
      d.true_ate = cfg.tau;
      return d;
    }
  }
  throw Error("simulation A: could not draw a dataset with both groups non-empty");
}

}  // namespace

std::uint64_t substream_seed(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

std::string to_string(EtaPrior p) {
  switch (p) {
    case EtaPrior::fixed: return "fixed";
    case EtaPrior::shared_prior: return "shared_prior";
    case EtaPrior::disjoint_support_prior: return "disjoint_support_prior";
  }
  return "fixed";
}

EtaPrior eta_prior_from_string(const std::string& s) {
  if (s == "fixed") return EtaPrior::fixed;
  if (s == "shared_prior") return EtaPrior::shared_prior;
  if (s == "disjoint_support_prior") return EtaPrior::disjoint_support_prior;
  throw ConfigError("unknown eta prior '" + s + "'");
}

void SimAConfig::validate() const {
  if (n_datasets < 1) throw ConfigError("n_datasets must be positive");
  if (units_min < 2 || units_max < units_min) throw ConfigError("invalid unit range");
  if (dx != 10) throw ConfigError("simulation A is defined for dx = 10");
  if (!std::isfinite(tau)) throw ConfigError("tau must be finite");
  if (!(noise_variance >= 0.0)) throw ConfigError("noise variance must be non-negative");
  if (train_fraction < 0 || validation_fraction < 0 || train_fraction + validation_fraction > 1.0) {
    throw ConfigError("invalid split fractions");
  }
}

Vector sim_a_treatment_features(const Eigen::Ref<const Vector>& x) {
  Vector f(10);
  f << x(0), x(1), x(2) * x(2), x(3), x(4), x(1) * x(2), x(3) * x(4), x(5), x(6) * x(6), x(0) * x(6);
  return f;
}

Matrix sim_a_covariance(int dx) {
  Matrix cov = Matrix::Identity(dx, dx);
  for (int a = 0; a + 1 < 8 && a + 1 < dx; a += 2) cov(a, a + 1) = cov(a + 1, a) = 0.5;
  return cov;
}

std::vector<Split> make_splits(int n, double train_fraction, double validation_fraction) {
  const int n_train = static_cast<int>(std::lround(train_fraction * n));
  const int n_val = static_cast<int>(std::lround(validation_fraction * n));
  std::vector<Split> out(static_cast<std::size_t>(n), Split::test);
  for (int i = 0; i < n; ++i) {
    if (i < n_train) out[static_cast<std::size_t>(i)] = Split::train;
    else if (i < n_train + n_val) out[static_cast<std::size_t>(i)] = Split::validation;
  }
  return out;
}

DatasetCollection gen_sim_a(const SimAConfig& cfg) {
  cfg.validate();
  Rng root(substream_seed(cfg.seed, 0xA11CE));
  SimAParams params;
  params.gamma0 = normal(root);
  params.gamma.resize(cfg.dx);
  for (int k = 0; k < cfg.dx; ++k) params.gamma(k) = normal(root);
  const Vector shared_eta = sample_eta(EtaPrior::fixed, Split::train, 10, root);

  const Eigen::LLT<Matrix> chol(sim_a_covariance(cfg.dx));
  const auto splits = make_splits(cfg.n_datasets, cfg.train_fraction, cfg.validation_fraction);

  DatasetCollection c;
  for (int m = 0; m < cfg.n_datasets; ++m) {
    Rng rng(substream_seed(cfg.seed, static_cast<std::uint64_t>(m)));
    const auto split = splits[static_cast<std::size_t>(m)];
    const int units = cfg.units_min == cfg.units_max
                          ? cfg.units_min
                          : std::uniform_int_distribution<int>(cfg.units_min, cfg.units_max)(rng);
    const Vector eta = cfg.eta_prior == EtaPrior::fixed ? shared_eta : sample_eta(cfg.eta_prior, split, 10, rng);
    Dataset d = sim_a_dataset(cfg, params, eta, chol, units, rng);
    d.id = "sima_" + std::to_string(m);
    c.add(std::move(d), split);
  }
  return c;
}

std::vector<int> ScmSpec::topological_order() const {
  const int d = nodes();
  std::vector<int> indeg(static_cast<std::size_t>(d), 0);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j)
      if (adjacency(i, j)) ++indeg[static_cast<std::size_t>(j)];
  std::deque<int> ready;
  for (int j = 0; j < d; ++j)
    if (indeg[static_cast<std::size_t>(j)] == 0) ready.push_back(j);
  std::vector<int> order;
  while (!ready.empty()) {
    const int i = ready.front();
    ready.pop_front();
    order.push_back(i);
    for (int j = 0; j < d; ++j) {
      if (adjacency(i, j) && --indeg[static_cast<std::size_t>(j)] == 0) ready.push_back(j);
    }
  }
  if (static_cast<int>(order.size()) != d) throw ValidationError("SCM graph contains a cycle");
  return order;
}

bool ScmSpec::is_descendant(int from, int to) const {
  const int d = nodes();
  std::vector<bool> seen(static_cast<std::size_t>(d), false);
  std::vector<int> stack{from};
  while (!stack.empty()) {
    const int i = stack.back();
    stack.pop_back();
    for (int j = 0; j < d; ++j) {
      if (adjacency(i, j) && !seen[static_cast<std::size_t>(j)]) {
        if (j == to) return true;
        seen[static_cast<std::size_t>(j)] = true;
        stack.push_back(j);
      }
    }
  }
  return false;
}

void ScmSpec::validate() const {
  const int d = nodes();
  if (adjacency.cols() != d || weights.rows() != d || weights.cols() != d || noise_std.size() != d) {
    throw ValidationError("SCM spec: inconsistent shapes");
  }
  topological_order();
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j)
      if (!adjacency(i, j) && weights(i, j) != 0.0) throw ValidationError("SCM spec: weight without edge");
  if (treatment_node < 0 || treatment_node >= d || effect_node < 0 || effect_node >= d ||
      treatment_node == effect_node) {
    throw ValidationError("SCM spec: invalid treatment/effect nodes");
  }
  for (int i = 0; i < d; ++i) {
    for (int j = 0; j < d; ++j) {
      if (adjacency(i, j) && !(weights(i, j) >= 0.0 && weights(i, j) <= 3.0)) {
        throw ValidationError("SCM spec: edge weight outside [0, 3]");
      }
    }
    if (!(noise_std(i) >= 0.2 && noise_std(i) <= 2.0)) throw ValidationError("SCM spec: noise std outside [0.2, 2]");
  }
  if (!is_descendant(treatment_node, effect_node)) {
    throw ValidationError("SCM spec: effect node is not a descendant of the treatment node");
  }
}

void ErConfig::validate() const {
  if (nodes < 3) throw ConfigError("ER SCM needs at least 3 nodes");
  if (n_datasets < 1 || units < 2) throw ConfigError("invalid ER dataset counts");
  if (edge_prob_min > edge_prob_max || weight_min > weight_max || noise_min > noise_max) {
    throw ConfigError("invalid ER ranges");
  }
}

ScmSpec sample_er_spec(const ErConfig& cfg, Rng& rng) {
  const int d = cfg.nodes;
  for (int attempt = 0; attempt < kMaxRetries; ++attempt) {
    ScmSpec s;
    s.adjacency.setConstant(d, d, false);
    s.weights = Matrix::Zero(d, d);
    s.noise_std.resize(d);
    const double p = uniform(rng, cfg.edge_prob_min, cfg.edge_prob_max);
    for (int i = 0; i < d; ++i) {
      for (int j = i + 1; j < d; ++j) {
        if (std::bernoulli_distribution(p)(rng)) {
          s.adjacency(i, j) = true;
          s.weights(i, j) = uniform(rng, cfg.weight_min, cfg.weight_max);
        }
      }
    }
    for (int i = 0; i < d; ++i) s.noise_std(i) = uniform(rng, cfg.noise_min, cfg.noise_max);

    std::vector<std::pair<int, int>> pairs;
    for (int t = 0; t < d; ++t)
      for (int e = 0; e < d; ++e)
        if (t != e && s.is_descendant(t, e)) pairs.emplace_back(t, e);
    if (pairs.empty()) continue;
    const auto pick = std::uniform_int_distribution<std::size_t>(0, pairs.size() - 1)(rng);
    s.treatment_node = pairs[pick].first;
    s.effect_node = pairs[pick].second;
    return s;
  }
  throw Error("ER SCM: no DAG with a treatment->effect path after " + std::to_string(kMaxRetries) +
              " draws");
}

namespace {

/// Simulates all nodes. `forced` < 0 samples the treatment, otherwise it is set to `forced`.
void simulate_row(const ScmSpec& s, const std::vector<int>& order, const Vector& noise, double treatment_u,
                  int forced, Vector& values) {
  for (int j : order) {
    double acc = 0.0;
    for (int i = 0; i < s.nodes(); ++i)
      if (s.adjacency(i, j)) acc += s.weights(i, j) * values(i);
    if (j == s.treatment_node) {
      values(j) = forced >= 0 ? forced : (treatment_u < sigmoid(acc) ? 1.0 : 0.0);
    } else {
      values(j) = acc + s.noise_std(j) * noise(j);
    }
  }
}

}  // namespace

Dataset simulate_scm(const ScmSpec& spec, int units, Rng& rng) {
  const auto order = spec.topological_order();
  const int d = spec.nodes();
  std::vector<int> cov_nodes;
  for (int i = 0; i < d; ++i)
    if (i != spec.treatment_node && i != spec.effect_node) cov_nodes.push_back(i);

  for (int attempt = 0; attempt < kMaxRetries; ++attempt) {
    Dataset ds;
    ds.covariates.resize(units, static_cast<Eigen::Index>(cov_nodes.size()));
    ds.treatments.resize(units);
    ds.outcomes.resize(units);
    Vector values(d), noise(d);
    for (int r = 0; r < units; ++r) {
      for (int i = 0; i < d; ++i) noise(i) = normal(rng);
      simulate_row(spec, order, noise, uniform(rng, 0.0, 1.0), -1, values);
      for (std::size_t k = 0; k < cov_nodes.size(); ++k) {
        ds.covariates(r, static_cast<Eigen::Index>(k)) = values(cov_nodes[k]);
      }
      ds.treatments(r) = static_cast<int>(values(spec.treatment_node));
      ds.outcomes(r) = values(spec.effect_node);
    }
    const auto nt = ds.treated_count();
    if (nt == 0 || nt == units) continue;

    ds.covariates = standardize_columns(ds.covariates);
    const double mean = ds.outcomes.mean();
    ds.outcomes.array() -= mean;
    const double sd = std::sqrt(ds.outcomes.squaredNorm() / units);
    const double scale = sd > 0 ? sd : 1.0;
    ds.outcomes /= scale;
    ds.true_ate = true_ate_linear_scm(spec) / scale;
    return ds;
  }
  throw Error("ER SCM: could not draw a dataset with both groups non-empty");
}

ErCollection gen_er_scm(const ErConfig& cfg) {
  cfg.validate();
  ErCollection out;
  out.collection.heterogeneous_graphs = true;
  const auto splits = make_splits(cfg.n_datasets, cfg.train_fraction, cfg.validation_fraction);
  for (int m = 0; m < cfg.n_datasets; ++m) {
    Rng rng(substream_seed(cfg.seed, static_cast<std::uint64_t>(m)));
    ScmSpec spec = sample_er_spec(cfg, rng);
    Dataset d = simulate_scm(spec, cfg.units, rng);
    d.id = "er_" + std::to_string(m);
    out.collection.add(std::move(d), splits[static_cast<std::size_t>(m)]);
    out.specs.push_back(std::move(spec));
  }
  return out;
}

double true_ate_linear_scm(const ScmSpec& spec) {
  const auto order = spec.topological_order();
  // effect[j] = d x_j / d do(T), accumulated forward along the topological order.
  Vector effect = Vector::Zero(spec.nodes());
  effect(spec.treatment_node) = 1.0;
  for (int j : order) {
    if (j == spec.treatment_node) continue;
    double acc = 0.0;
    for (int i = 0; i < spec.nodes(); ++i)
      if (spec.adjacency(i, j)) acc += spec.weights(i, j) * effect(i);
    effect(j) = acc;
  }
  return effect(spec.effect_node);
}

double true_ate_monte_carlo(const ScmSpec& spec, long n, Rng& rng, bool paired) {
  return monte_carlo_ate(spec, n, rng, paired).mean;
}

MonteCarloAte monte_carlo_ate(const ScmSpec& spec, long n, Rng& rng, bool paired) {
  if (n < 1) throw ValidationError("Monte Carlo sample count must be positive");
  const auto order = spec.topological_order();
  const int d = spec.nodes();
  Vector noise1(d), noise0(d), v1(d), v0(d);
  double sum = 0.0, sum_sq = 0.0;
  for (long r = 0; r < n; ++r) {
    for (int i = 0; i < d; ++i) noise1(i) = normal(rng);
    if (paired) noise0 = noise1;
    else
      for (int i = 0; i < d; ++i) noise0(i) = normal(rng);
    simulate_row(spec, order, noise1, 0.0, 1, v1);
    simulate_row(spec, order, noise0, 0.0, 0, v0);
    const double diff = v1(spec.effect_node) - v0(spec.effect_node);
    sum += diff;
    sum_sq += diff * diff;
  }
  MonteCarloAte out;
  const double nn = static_cast<double>(n);
  out.mean = sum / nn;
  if (n > 1) {
    const double var = std::max(0.0, (sum_sq - nn * out.mean * out.mean) / (nn - 1.0));
    out.std_error = std::sqrt(var / nn);
  }
  return out;
}

}  // namespace cina
