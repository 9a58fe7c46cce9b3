#include "cina/training.hpp"

#include "cina/error.hpp"
#include "cina/parallel.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

namespace cina {

namespace {

/// Quantities that depend only on the covariates and the key map.
struct Prepared {
  Matrix keys;
  KeyMapTape tape;
  GramCache gram;
  Vector signs;
};

Prepared prepare(const Dataset& d, const ModelParams& p) {
  Prepared pre;
  pre.keys = key_map(d.covariates, p, &pre.tape);
  pre.gram = build_gram(pre.keys);
  pre.signs = d.signs();
  return pre;
}

bool keys_fixed(const ModelParams& p) { return p.key_map == KeyMapKind::identity_standardized; }

Vector model_values(const Dataset& d, const Prepared& pre, const ModelParams& p, ValueNetTape* tape) {
  if (p.amortized()) return value_net(pre.keys, pre.signs, p, tape);
  if (p.free_values.size() != d.size()) {
    throw ValidationError("dataset '" + d.id + "' has " + std::to_string(d.size()) +
                          " units but the parameters hold " + std::to_string(p.free_values.size()) + " values");
  }
  return p.free_values;
}

struct Readout {
  double ate = 0.0;
  Vector dvalues;  // d ate / d V
  Vector dnorm;    // d ate / d h
};

/// Normalized projected estimator and its derivatives.
Readout normalized_readout(const Dataset& d, const Vector& v, const Vector& h, const Vector& w) {
  const Eigen::Index n = d.size();
  Vector a = v.cwiseProduct(w).cwiseQuotient(h).cwiseMax(0.0);
  double sum[2] = {0, 0}, weighted[2] = {0, 0}, plain[2] = {0, 0};
  Eigen::Index count[2] = {0, 0};
  for (Eigen::Index i = 0; i < n; ++i) {
    const int g = w(i) > 0 ? 1 : 0;
    sum[g] += a(i);
    weighted[g] += a(i) * d.outcomes(i);
    plain[g] += d.outcomes(i);
    ++count[g];
  }
  double mean[2];
  for (int g = 0; g < 2; ++g) mean[g] = sum[g] > 0 ? weighted[g] / sum[g] : plain[g] / static_cast<double>(count[g]);
  Readout r;
  r.ate = mean[1] - mean[0];
  r.dvalues = Vector::Zero(n);
  r.dnorm = Vector::Zero(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const int g = w(i) > 0 ? 1 : 0;
    if (!(sum[g] > 0) || !(a(i) > 0)) continue;
    const double da = (g == 1 ? 1.0 : -1.0) * (d.outcomes(i) - mean[g]) / sum[g];
    r.dvalues(i) = da * w(i) / h(i);
    r.dnorm(i) = -da * v(i) * w(i) / (h(i) * h(i));
  }
  return r;
}

LossAndGrad loss_on(const Dataset& d, const Prepared& pre, const ModelParams& p, double mu, bool need_grad) {
  const Matrix& g = pre.gram.gram;
  const Vector& h = pre.gram.normalizers;
  const Vector& w = pre.signs;
  ValueNetTape vtape;
  const Vector v = model_values(d, pre, p, need_grad ? &vtape : nullptr);
  const Vector u = v.cwiseQuotient(h);
  const Vector r = g * u;

  LossAndGrad out;
  out.value = 0.5 * p.lambda * u.dot(r);
  Vector gr = Vector::Zero(d.size());
  for (Eigen::Index i = 0; i < d.size(); ++i) {
    const double slack = 1.0 - w(i) * (r(i) + p.beta0);
    if (slack > 0.0) {
      out.value += slack;
      gr(i) = -w(i);
    }
  }
  std::optional<Readout> readout;
  double residual = 0.0;
  if (mu > 0.0) {
    if (!d.true_ate) throw ValidationError("dataset '" + d.id + "' has no true ATE for the supervised loss");
    readout = normalized_readout(d, v, h, w);
    residual = readout->ate - *d.true_ate;
    out.value += mu * residual * residual;
  }
  if (!need_grad) return out;

  const Vector du = p.lambda * r + g * gr;
  Vector dv = du.cwiseQuotient(h);
  Vector dh = -du.cwiseProduct(v).cwiseQuotient(h.cwiseProduct(h));
  if (readout) {
    dv += 2.0 * mu * residual * readout->dvalues;
    dh += 2.0 * mu * residual * readout->dnorm;
  }

  out.grad = zeros_like(p);
  out.grad.beta0 = gr.sum();
  Matrix dkeys;
  if (p.amortized()) {
    dkeys = value_net_backward(pre.keys, w, p, vtape, dv, out.grad);
  } else {
    out.grad.free_values = dv;
    dkeys = Matrix::Zero(pre.keys.rows(), pre.keys.cols());
  }
  if (!keys_fixed(p)) {
    // d/dG of the penalty, the hinge readout and the row-sum normalizers.
    Matrix m = (0.5 * p.lambda) * u * u.transpose() + gr * u.transpose();
    m.colwise() += dh;
    const Matrix ds = m.cwiseProduct(g);
    dkeys += (ds + ds.transpose()) * pre.keys / std::sqrt(static_cast<double>(pre.keys.cols()));
    key_map_backward(d.covariates, p, pre.tape, dkeys, out.grad);
  }
  return out;
}

class RunLog {
 public:
  explicit RunLog(const std::optional<std::filesystem::path>& path) {
    if (!path) return;
    out_.open(*path);
    if (!out_) throw Error("cannot open run log '" + path->string() + "'");
  }
  void write(long epoch, double loss, double lr, double lambda) {
    if (!out_.is_open()) return;
    out_ << nlohmann::json{{"epoch", epoch}, {"loss", loss}, {"lr", lr}, {"lambda", lambda}}.dump() << '\n';
  }

 private:
  std::ofstream out_;
};

void check_finite(double loss, long epoch, const std::string& id) {
  if (!std::isfinite(loss)) {
    throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) + " on dataset '" + id + "'", epoch);
  }
}

void gradient_step(ModelParams& p, const ModelParams& grad, double lr) {
  unflatten(p, flatten(p) - lr * flatten(grad));
}

LossAndGrad step_loss(const Dataset& d, const Prepared& pre, const ModelParams& p, double mu, GradientMode mode) {
  if (mode == GradientMode::analytic) return loss_on(d, pre, p, mu, true);
  LossAndGrad out = loss_on(d, pre, p, mu, false);
  out.grad = numeric_gradient([&](const ModelParams& q) { return dataset_loss(d, q, mu).value; }, p);
  return out;
}

/// Same update as loss_on + gradient_step for free values on fixed keys, without per-epoch allocation.
void free_value_descent(const Dataset& d, const Prepared& pre, const TrainConfig& cfg, TrainResult& res, RunLog& log) {
  const Matrix& g = pre.gram.gram;
  const Vector& h = pre.gram.normalizers;
  const Vector& w = pre.signs;
  ModelParams& p = res.params;
  const Eigen::Index n = d.size();
  Vector u(n), r(n), gr(n), du(n);
  for (long e = 0; e < cfg.epochs; ++e) {
    u = p.free_values.cwiseQuotient(h);
    r.noalias() = g * u;
    double loss = 0.5 * p.lambda * u.dot(r);
    for (Eigen::Index i = 0; i < n; ++i) {
      const double slack = 1.0 - w(i) * (r(i) + p.beta0);
      gr(i) = slack > 0.0 ? -w(i) : 0.0;
      if (slack > 0.0) loss += slack;
    }
    check_finite(loss, e, d.id);
    const double lr = learning_rate(cfg, e);
    res.losses.push_back(loss);
    log.write(e, loss, lr, p.lambda);
    du.noalias() = g * gr;
    du += p.lambda * r;
    p.free_values -= lr * du.cwiseQuotient(h);
    p.beta0 -= lr * gr.sum();
  }
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::optional<std::filesystem::path> branch_log(const std::optional<std::filesystem::path>& base, std::size_t idx) {
  if (!base) return std::nullopt;
  auto p = *base;
  p.replace_filename(p.stem().string() + "_lambda" + std::to_string(idx) + p.extension().string());
  return p;
}

double weighted_ate(const Dataset& d, const BalancingWeights& w) {
  return w.alpha.cwiseProduct(d.signs()).dot(d.outcomes);
}

}  // namespace

std::string to_string(Trainer t) { return t == Trainer::single ? "single" : "multi"; }

Trainer trainer_from_string(const std::string& s) {
  if (s == "single") return Trainer::single;
  if (s == "multi") return Trainer::multi;
  throw ConfigError("unknown trainer '" + s + "' (expected single or multi)");
}

void TrainConfig::validate() const {
  if (!(lambda_min > 0.0) || !(lambda_max >= lambda_min)) throw ConfigError("need 0 < lambda_min <= lambda_max");
  if (grid_size < 1) throw ConfigError("grid_size must be at least 1");
  if (!(lr_min > 0.0) || !(lr_max >= lr_min)) throw ConfigError("need 0 < lr_min <= lr_max");
  if (epochs < 1) throw ConfigError("epochs must be at least 1");
  if (!(mu >= 0.0) || !std::isfinite(mu)) throw ConfigError("mu must be a finite non-negative number");
  if (key_dim < 0) throw ConfigError("key_dim must be non-negative");
}

double learning_rate(const TrainConfig& cfg, long epoch) {
  const double half = std::max(1.0, static_cast<double>(cfg.epochs) / 2.0);
  const double e = static_cast<double>(epoch);
  if (e >= half) return cfg.lr_min;
  return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + std::cos(M_PI * e / half));
}

double hinge_loss(const Dataset& d, const ModelParams& p) { return loss_on(d, prepare(d, p), p, 0.0, false).value; }

double readout_ate(const Dataset& d, const ModelParams& p) {
  const Prepared pre = prepare(d, p);
  return normalized_readout(d, model_values(d, pre, p, nullptr), pre.gram.normalizers, pre.signs).ate;
}

LossAndGrad dataset_loss(const Dataset& d, const ModelParams& p, double mu) {
  return loss_on(d, prepare(d, p), p, mu, true);
}

double supervised_loss(const DatasetCollection& c, const ModelParams& p, double mu) {
  double total = 0.0;
  for (const auto& d : c.datasets) total += loss_on(d, prepare(d, p), p, mu, false).value;
  return total;
}

LossAndGrad supervised_loss_and_grad(const DatasetCollection& c, const ModelParams& p, double mu) {
  LossAndGrad total{0.0, zeros_like(p)};
  Vector acc = flatten(total.grad);
  for (const auto& d : c.datasets) {
    const LossAndGrad lg = dataset_loss(d, p, mu);
    total.value += lg.value;
    acc += flatten(lg.grad);
  }
  unflatten(total.grad, acc);
  return total;
}

ModelParams numeric_gradient(const std::function<double(const ModelParams&)>& f, const ModelParams& p, double step) {
  const Vector theta = flatten(p);
  Vector grad(theta.size());
  ModelParams q = p;
  for (Eigen::Index i = 0; i < theta.size(); ++i) {
    Vector t = theta;
    t(i) = theta(i) + step;
    unflatten(q, t);
    const double up = f(q);
    t(i) = theta(i) - step;
    unflatten(q, t);
    const double down = f(q);
    grad(i) = (up - down) / (2.0 * step);
  }
  ModelParams g = zeros_like(p);
  unflatten(g, grad);
  return g;
}

void MultiTreatmentDataset::validate() const {
  if (treatments.rows() != covariates.rows()) throw ValidationError("treatment matrix and covariates disagree on N");
  if (treatments.cols() < 1) throw ValidationError("at least one treatment column is required");
  if (!covariates.allFinite()) throw ValidationError("covariates contain non-finite values");
  for (Eigen::Index s = 0; s < treatments.cols(); ++s) {
    const auto col = treatments.col(s);
    if (((col.array() != 0) && (col.array() != 1)).any()) {
      throw ValidationError("treatment column " + std::to_string(s) + " is not binary");
    }
    const auto treated = col.sum();
    if (treated == 0 || treated == col.size()) {
      throw DegenerateDatasetError("treatment column " + std::to_string(s) + " has an empty group");
    }
  }
}

MultiTreatmentLoss multi_treatment_loss(const MultiTreatmentDataset& d, const MultiTreatmentParams& p) {
  d.validate();
  if (p.values.rows() != d.size() || p.values.cols() != d.treatment_count() || p.beta0.size() != d.treatment_count()) {
    throw ValidationError("multi-treatment parameters do not match the dataset shape");
  }
  const GramCache g = build_gram(standardize_columns(d.covariates));
  MultiTreatmentLoss out;
  out.dvalues = Matrix::Zero(d.size(), d.treatment_count());
  out.dbeta0 = Vector::Zero(d.treatment_count());
  for (Eigen::Index s = 0; s < d.treatment_count(); ++s) {
    const Vector w = (2 * d.treatments.col(s).array() - 1).cast<double>().matrix();
    const Vector u = p.values.col(s).cwiseQuotient(g.normalizers);
    const Vector r = g.gram * u;
    out.value += 0.5 * p.lambda * u.dot(r);
    Vector gr = Vector::Zero(d.size());
    for (Eigen::Index i = 0; i < d.size(); ++i) {
      const double slack = 1.0 - w(i) * (r(i) + p.beta0(s));
      if (slack > 0.0) {
        out.value += slack;
        gr(i) = -w(i);
      }
    }
    out.dvalues.col(s) = (p.lambda * r + g.gram * gr).cwiseQuotient(g.normalizers);
    out.dbeta0(s) = gr.sum();
  }
  return out;
}

std::vector<BalancingWeights> multi_treatment_weights(const MultiTreatmentDataset& d, const MultiTreatmentParams& p) {
  d.validate();
  const GramCache g = build_gram(standardize_columns(d.covariates));
  std::vector<BalancingWeights> out;
  for (Eigen::Index s = 0; s < d.treatment_count(); ++s) {
    const Vector w = (2 * d.treatments.col(s).array() - 1).cast<double>().matrix();
    out.push_back(project_onto_A(p.lambda * p.values.col(s).cwiseProduct(w).cwiseQuotient(g.normalizers), w));
  }
  return out;
}

MultiTreatmentParams train_multi_treatment(const MultiTreatmentDataset& d, const TrainConfig& cfg, double lambda) {
  cfg.validate();
  d.validate();
  Rng rng(substream_seed(cfg.seed, 1));
  std::normal_distribution<double> norm(0.0, 0.1);
  MultiTreatmentParams p;
  p.lambda = lambda;
  p.beta0 = Vector::Zero(d.treatment_count());
  p.values.resize(d.size(), d.treatment_count());
  for (Eigen::Index s = 0; s < d.treatment_count(); ++s)
    for (Eigen::Index i = 0; i < d.size(); ++i)
      p.values(i, s) = std::abs(norm(rng)) * (2.0 * d.treatments(i, s) - 1.0);
  for (long e = 0; e < cfg.epochs; ++e) {
    const auto lg = multi_treatment_loss(d, p);
    check_finite(lg.value, e, d.id);
    const double lr = learning_rate(cfg, e);
    p.values -= lr * lg.dvalues;
    p.beta0 -= lr * lg.dbeta0;
  }
  return p;
}

TrainResult train_single(const Dataset& d, const TrainConfig& cfg, double lambda) {
  cfg.validate();
  d.validate();
  const auto t0 = std::chrono::steady_clock::now();
  TrainResult res;
  res.params = init_single(d, lambda, cfg.seed, cfg.key_map, cfg.key_dim);
  RunLog log(cfg.run_log);
  Prepared pre = prepare(d, res.params);
  res.losses.reserve(static_cast<std::size_t>(cfg.epochs));
  if (keys_fixed(res.params) && cfg.gradient_mode == GradientMode::analytic) {
    free_value_descent(d, pre, cfg, res, log);
    res.wall_time_s = seconds_since(t0);
    return res;
  }
  for (long e = 0; e < cfg.epochs; ++e) {
    if (!keys_fixed(res.params) && e > 0) pre = prepare(d, res.params);
    const LossAndGrad lg = step_loss(d, pre, res.params, 0.0, cfg.gradient_mode);
    check_finite(lg.value, e, d.id);
    const double lr = learning_rate(cfg, e);
    res.losses.push_back(lg.value);
    log.write(e, lg.value, lr, lambda);
    gradient_step(res.params, lg.grad, lr);
  }
  res.wall_time_s = seconds_since(t0);
  return res;
}

std::vector<Dataset> shuffle_units(const std::vector<const Dataset*>& datasets, Rng& rng) {
  if (datasets.empty()) return {};
  const Eigen::Index dx = datasets.front()->dim();
  Eigen::Index total = 0;
  for (const auto* d : datasets) {
    if (d->dim() != dx) throw ValidationError("cannot shuffle units across datasets of different dimension");
    total += d->size();
  }
  Matrix x(total, dx);
  Eigen::VectorXi t(total);
  Vector y(total);
  Eigen::Index at = 0;
  for (const auto* d : datasets) {
    x.middleRows(at, d->size()) = d->covariates;
    t.segment(at, d->size()) = d->treatments;
    y.segment(at, d->size()) = d->outcomes;
    at += d->size();
  }
  std::vector<Eigen::Index> perm(static_cast<std::size_t>(total));
  for (int attempt = 0; attempt < 100; ++attempt) {
    std::iota(perm.begin(), perm.end(), Eigen::Index{0});
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<Dataset> out;
    bool ok = true;
    at = 0;
    for (const auto* d : datasets) {
      Dataset s;
      s.id = d->id;
      s.true_ate = d->true_ate;
      s.covariates.resize(d->size(), dx);
      s.treatments.resize(d->size());
      s.outcomes.resize(d->size());
      for (Eigen::Index i = 0; i < d->size(); ++i) {
        const auto src = perm[static_cast<std::size_t>(at + i)];
        s.covariates.row(i) = x.row(src);
        s.treatments(i) = t(src);
        s.outcomes(i) = y(src);
      }
      at += d->size();
      if (s.treated_count() == 0 || s.control_count() == 0) ok = false;
      out.push_back(std::move(s));
    }
    if (ok) return out;
  }
  throw Error("could not shuffle units into datasets with both treatment groups");
}

TrainResult train_multi(const std::vector<const Dataset*>& datasets, bool heterogeneous_graphs,
                        const TrainConfig& cfg, double lambda) {
  cfg.validate();
  if (datasets.empty()) throw ConfigError("train_multi needs at least one training dataset");
  if (cfg.shuffle_augment && heterogeneous_graphs) {
    throw ConfigError("shuffle augmentation is not allowed on datasets from different causal graphs");
  }
  for (const auto* d : datasets) {
    d->validate();
    if (cfg.mu > 0.0 && !d->true_ate) {
      throw ValidationError("dataset '" + d->id + "' has no true ATE for the supervised loss");
    }
  }
  const auto t0 = std::chrono::steady_clock::now();
  TrainResult res;
  res.params = init_amortized(datasets.front()->dim(), lambda, cfg.seed, cfg.key_map, cfg.key_dim);
  RunLog log(cfg.run_log);
  Rng rng(substream_seed(cfg.seed, 2));

  std::vector<Dataset> shuffled;
  std::vector<Prepared> cache;
  const bool cache_keys = keys_fixed(res.params) && !cfg.shuffle_augment;
  if (cache_keys) {
    for (const auto* d : datasets) cache.push_back(prepare(*d, res.params));
  }
  std::vector<std::size_t> order(datasets.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  res.losses.reserve(static_cast<std::size_t>(cfg.epochs));
  for (long e = 0; e < cfg.epochs; ++e) {
    const double lr = learning_rate(cfg, e);
    if (cfg.shuffle_augment) shuffled = shuffle_units(datasets, rng);
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (const std::size_t m : order) {
      const Dataset& d = cfg.shuffle_augment ? shuffled[m] : *datasets[m];
      const Prepared pre = cache_keys ? Prepared{} : prepare(d, res.params);
      const LossAndGrad lg = step_loss(d, cache_keys ? cache[m] : pre, res.params, cfg.mu, cfg.gradient_mode);
      check_finite(lg.value, e, d.id);
      epoch_loss += lg.value;
      gradient_step(res.params, lg.grad, lr);
    }
    res.losses.push_back(epoch_loss);
    log.write(e, epoch_loss, lr, lambda);
  }
  res.wall_time_s = seconds_since(t0);
  return res;
}

TrainResult train_multi(const DatasetCollection& c, const TrainConfig& cfg, double lambda) {
  return train_multi(c.by_split(Split::train), c.heterogeneous_graphs, cfg, lambda);
}

SweepResult lambda_sweep(const DatasetCollection& c, const TrainConfig& cfg, Trainer trainer) {
  cfg.validate();
  const auto validation = c.by_split(Split::validation);
  if (validation.empty()) throw ValidationError("lambda sweep needs a non-empty validation split");
  for (const auto* d : validation) {
    if (!d->true_ate) throw ValidationError("validation dataset '" + d->id + "' has no true ATE");
  }
  const auto grid = log_grid(cfg.lambda_min, cfg.lambda_max, cfg.grid_size);
  std::vector<SweepEntry> log(grid.size());
  std::vector<std::optional<ModelParams>> params(grid.size());
  parallel_for(grid.size(), [&](std::size_t k) {
    TrainConfig branch = cfg;
    branch.seed = substream_seed(cfg.seed, 100 + k);
    branch.run_log = trainer == Trainer::multi ? branch_log(cfg.run_log, k) : std::nullopt;
    double err = 0.0;
    try {
    if (trainer == Trainer::multi) {
      const TrainResult r = train_multi(c, branch, grid[k]);
      for (const auto* d : validation) {
        err += std::abs(weighted_ate(*d, forward_extract(*d, r.params).alpha) - *d->true_ate);
      }
      params[k] = r.params;
    } else {
      for (const auto* d : validation) {
        const TrainResult r = train_single(*d, branch, grid[k]);
        err += std::abs(weighted_ate(*d, forward_extract(*d, r.params).alpha) - *d->true_ate);
      }
    }
    } catch (const TrainingError& e) {
      log[k] = {grid[k], std::numeric_limits<double>::infinity(), e.what()};
      return;
    }
    log[k] = {grid[k], err / static_cast<double>(validation.size()), {}};
  });
  bool any = false;
  for (const auto& entry : log) any = any || entry.error.empty();
  if (!any) throw TrainingError("every lambda on the grid diverged; first: " + log.front().error, 0);
  std::size_t best = 0;
  for (std::size_t k = 1; k < grid.size(); ++k)
    if (log[k].validation_mae < log[best].validation_mae) best = k;
  SweepResult out;
  out.best_lambda = grid[best];
  out.params = params[best];
  out.log = std::move(log);
  return out;
}

}  // namespace cina
