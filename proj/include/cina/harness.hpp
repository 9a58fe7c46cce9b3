#pragma once

#include "cina/baselines.hpp"
#include "cina/training.hpp"

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

namespace cina {

inline constexpr const char* kCinaVersion = "0.1.0";

/// Amortized-model defaults: 4000 epochs, smaller steps than the per-dataset model
/// because the value-network gradient sums over every unit of a dataset.
inline TrainConfig multi_train_defaults() {
  TrainConfig c;
  c.epochs = 4000;
  c.lr_max = 1e-3;
  c.lr_min = 1e-5;
  return c;
}

enum class GeneratorKind { sim_a, er };
enum class EvalSplit { test, all };

/// Method names accepted in ExperimentConfig::methods.
/// naive, ipw, snipw, mean_prediction: baselines.
/// svm_oracle: exact balancing QP per dataset.
/// cina: per-dataset training with free values.
/// cina_zs / cina_zs_s: amortized model, unsupervised (mu = 0) / supervised (mu from train).
const std::vector<std::string>& known_methods();

/// How the per-dataset `cina` method picks lambda.
enum class SingleLambdaRule {
  sweep,     // lambda_sweep with the single trainer on (up to single_sweep_limit) validation datasets
  fixed,     // single_lambda
  relative,  // single_lambda_fraction times the largest lambda whose dual solution leaves the box
};

struct ExperimentConfig {
  GeneratorKind generator = GeneratorKind::sim_a;
  SimAConfig sim_a;
  ErConfig er;
  /// Manifest written by save_collection; when set the generator is not run.
  std::optional<std::filesystem::path> data;
  std::vector<std::string> methods{"naive"};
  TrainConfig train = multi_train_defaults();
  TrainConfig single_train;  // per-dataset model
  SingleLambdaRule single_rule = SingleLambdaRule::sweep;
  double single_lambda = 1e-3;
  double single_lambda_fraction = 0.9;
  int single_sweep_limit = 5;
  EvalSplit eval_split = EvalSplit::test;
  QpOptions oracle;
  std::uint64_t seed = 0;
  std::filesystem::path output_dir;

  void validate() const;
};

nlohmann::json to_json(const ExperimentConfig& cfg);
/// Missing keys keep their defaults. Throws ConfigError on unknown enum values or methods.
ExperimentConfig experiment_config_from_json(const nlohmann::json& j);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

nlohmann::json to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});
nlohmann::json to_json(const SimAConfig& cfg);
SimAConfig sim_a_config_from_json(const nlohmann::json& j, SimAConfig base = {});
nlohmann::json to_json(const ErConfig& cfg);
ErConfig er_config_from_json(const nlohmann::json& j, ErConfig base = {});

/// 64-bit FNV-1a of the canonical (sorted-key, compact) JSON dump, as 16 hex digits.
std::string config_hash(const nlohmann::json& j);

struct MaeResult {
  double mae = 0.0;
  double se = 0.0;  // sample std of |e - t| over sqrt(n); 0 for n = 1
};

/// Throws ValidationError on a length mismatch or empty input.
MaeResult compute_mae(const std::vector<double>& estimates, const std::vector<double>& truths);

struct ReportRow {
  std::string method;
  std::string dataset_id;
  double estimate = 0.0;
  double truth = 0.0;
  double abs_error = 0.0;
  double wall_time_s = 0.0;
};

struct MethodSummary {
  std::string method;
  std::size_t n = 0;
  double mae = 0.0;
  double se = 0.0;
  double mean_wall_time_s = 0.0;
};

struct EvalReport {
  std::vector<ReportRow> rows;
  std::vector<MethodSummary> summaries;
  std::uint64_t seed = 0;
  std::string config_hash;
  nlohmann::json config;
  /// Training wall time per amortized method, and other stage timings.
  std::map<std::string, double> stage_wall_time_s;
  /// Lambda chosen per method where one is selected.
  std::map<std::string, double> selected_lambda;
  bool partial = false;
  std::string failed_stage;
  std::string error;

  const MethodSummary* summary(const std::string& method) const;
};

/// Aggregates recomputed from the rows, in order of first appearance.
std::vector<MethodSummary> summarize(const std::vector<ReportRow>& rows);

nlohmann::json to_json(const EvalReport& r);
/// The report without wall-clock fields; equal for repeated runs with one seed.
nlohmann::json deterministic_view(const EvalReport& r);
std::string summary_csv(const EvalReport& r);
/// Writes report.json and summary.csv into dir.
void write_report(const EvalReport& r, const std::filesystem::path& dir);

/// Generates (or loads) the data, trains, evaluates every method on the eval split.
/// A failing stage ends the run with a partial report; the report is still written
/// when output_dir is set.
EvalReport run_experiment(const ExperimentConfig& cfg);

/// Collection produced by the configured generator (seeded by cfg.seed) or loaded from cfg.data.
DatasetCollection experiment_data(const ExperimentConfig& cfg);

/// One JSON file per dataset plus manifest.json with ids, files, splits and the graph flag.
void save_collection(const DatasetCollection& c, const std::filesystem::path& dir);
DatasetCollection load_collection(const std::filesystem::path& manifest);

/// Largest lambda at which the dual SVM solution stays strictly inside the box.
/// Below it the dual solution is (2 lambda / Q) a with a the balancing-QP solution
/// and Q = a^T K_phi a, so the box binds once 2 lambda max(a) / Q reaches one.
double box_inactive_lambda(const BalancingWeights& qp);

/// Per-dataset CInA: trains free values at `lambda` and reads out the projected weights.
AteEstimate single_dataset_cina(const Dataset& d, const TrainConfig& cfg, double lambda);

}  // namespace cina
