#pragma once

#include "cina/model.hpp"

#include <filesystem>
#include <functional>
#include <optional>
#include <vector>

namespace cina {

enum class GradientMode { analytic, numeric_check };
enum class Trainer { single, multi };

std::string to_string(Trainer t);
Trainer trainer_from_string(const std::string& s);

struct TrainConfig {
  double lambda_min = 1e-6;
  double lambda_max = 1e-2;
  int grid_size = 5;
  double lr_max = 1e-2;
  double lr_min = 1e-4;
  long epochs = 20000;
  /// Weight of the supervised ATE term. Only used when the datasets carry true ATEs.
  double mu = 1.0;
  std::uint64_t seed = 0;
  bool shuffle_augment = false;
  GradientMode gradient_mode = GradientMode::analytic;
  KeyMapKind key_map = KeyMapKind::identity_standardized;
  Eigen::Index key_dim = 0;  // linear key map width; 0 means Dx
  /// JSON-lines file receiving {epoch, loss, lr, lambda} per epoch.
  std::optional<std::filesystem::path> run_log;

  void validate() const;
};

/// Cosine decay from lr_max to lr_min over the first half of the epochs, lr_min afterwards.
double learning_rate(const TrainConfig& cfg, long epoch);

struct LossAndGrad {
  double value = 0.0;
  ModelParams grad;
};

/// Penalized hinge loss of one dataset:
///   (lambda/2) ||sum_j (V_j/h_j) phi_j||^2 + sum_i [1 - W_i((G u)_i + beta0)]_+ ,  u = V/h.
double hinge_loss(const Dataset& d, const ModelParams& p);

/// The ATE read off the model with the projected weights, without materializing them:
/// sum_T a_j Y_j / S_T - sum_C a_j Y_j / S_C with a = max(0, V W / h).
double readout_ate(const Dataset& d, const ModelParams& p);

/// hinge_loss(d) + mu (readout_ate(d) - true_ate)^2, with analytic gradient.
/// mu = 0 skips the supervised term and does not require a true ATE.
LossAndGrad dataset_loss(const Dataset& d, const ModelParams& p, double mu);

/// Sum over the collection of hinge losses plus mu times the squared ATE residuals.
/// Throws ValidationError naming the first dataset without a true ATE when mu > 0.
double supervised_loss(const DatasetCollection& c, const ModelParams& p, double mu);
LossAndGrad supervised_loss_and_grad(const DatasetCollection& c, const ModelParams& p, double mu);

/// Central finite differences of f over the trainable entries of p.
ModelParams numeric_gradient(const std::function<double(const ModelParams&)>& f, const ModelParams& p,
                             double step = 1e-5);

// ---- multiple binary treatments -------------------------------------------

struct MultiTreatmentDataset {
  Matrix covariates;             // N x Dx
  Eigen::MatrixXi treatments;    // N x S, values in {0, 1}
  std::string id;

  Eigen::Index size() const { return covariates.rows(); }
  Eigen::Index treatment_count() const { return treatments.cols(); }
  /// Throws DegenerateDatasetError naming the column with an empty group.
  void validate() const;
};

/// One value column and one intercept per treatment over shared keys.
struct MultiTreatmentParams {
  Matrix values;  // N x S
  Vector beta0;   // S
  double lambda = 1.0;
};

struct MultiTreatmentLoss {
  double value = 0.0;
  Matrix dvalues;
  Vector dbeta0;
};

/// Sum over treatments of the single-treatment penalized hinge loss on shared identity keys.
MultiTreatmentLoss multi_treatment_loss(const MultiTreatmentDataset& d, const MultiTreatmentParams& p);
/// Per-treatment weights lambda V_s W_s / h projected onto A.
std::vector<BalancingWeights> multi_treatment_weights(const MultiTreatmentDataset& d, const MultiTreatmentParams& p);
MultiTreatmentParams train_multi_treatment(const MultiTreatmentDataset& d, const TrainConfig& cfg, double lambda);

// ---- training loops -------------------------------------------------------

struct TrainResult {
  ModelParams params;
  std::vector<double> losses;  // one entry per epoch
  double wall_time_s = 0.0;
};

/// Plain gradient descent on the hinge loss of one dataset with V as free parameters.
TrainResult train_single(const Dataset& d, const TrainConfig& cfg, double lambda);

/// Gradient descent on the amortized model, one step per training dataset per epoch.
/// Uses the supervised term when cfg.mu > 0 and every dataset carries a true ATE.
TrainResult train_multi(const std::vector<const Dataset*>& datasets, bool heterogeneous_graphs,
                        const TrainConfig& cfg, double lambda);
TrainResult train_multi(const DatasetCollection& c, const TrainConfig& cfg, double lambda);

/// Redistributes all units across datasets of unchanged sizes with a random permutation.
/// Retries until every dataset has both groups.
std::vector<Dataset> shuffle_units(const std::vector<const Dataset*>& datasets, Rng& rng);

struct SweepEntry {
  double lambda = 0.0;
  double validation_mae = 0.0;
  /// Set when training diverged at this lambda; validation_mae is then +inf.
  std::string error;
};

struct SweepResult {
  double best_lambda = 0.0;
  /// Trained amortized parameters for the best lambda (multi trainer only).
  std::optional<ModelParams> params;
  std::vector<SweepEntry> log;
};

/// Trains at every grid lambda and keeps the one with the lowest validation MAE.
/// The single trainer fits each validation dataset separately. A diverging branch is
/// logged and skipped; TrainingError only when every branch diverges.
SweepResult lambda_sweep(const DatasetCollection& c, const TrainConfig& cfg, Trainer trainer);

}  // namespace cina
