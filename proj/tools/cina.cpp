// Command-line front end: generate | train | infer | oracle | evaluate | sweep.

#include "cina/error.hpp"
#include "cina/harness.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <sstream>

using namespace cina;
using nlohmann::json;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c, bool out_required = true) {
  cmd->add_option("--config", c.config, "experiment config (JSON)");
  cmd->add_option("--seed", c.seed, "root seed, overrides the config");
  auto* out = cmd->add_option("--out", c.out, "output path");
  if (out_required) out->required();
}

ExperimentConfig resolve(const Common& c) {
  ExperimentConfig cfg = c.config.empty() ? experiment_config_from_json(json::object()) : load_experiment_config(c.config);
  if (c.seed) cfg.seed = *c.seed;
  return cfg;
}

void write_json(const std::filesystem::path& path, const json& j) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out << j.dump(2) << '\n';
}

json weights_summary(const BalancingWeights& w) {
  Eigen::Index support = 0;
  for (Eigen::Index i = 0; i < w.alpha.size(); ++i) support += w.alpha(i) > 0.0;
  return {{"n", w.alpha.size()},
          {"support", support},
          {"max", w.alpha.size() ? w.alpha.maxCoeff() : 0.0},
          {"treated_sum", w.treated_sum},
          {"control_sum", w.control_sum}};
}

json sweep_entry_json(const SweepEntry& e) {
  json j{{"lambda", e.lambda}};
  if (e.error.empty()) j["validation_mae"] = e.validation_mae;
  else j["diverged"] = e.error;
  return j;
}

std::vector<double> to_std(const Vector& v) { return {v.data(), v.data() + v.size()}; }

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  for (std::string item; std::getline(in, item, ',');) {
    if (item == "mean") item = "mean_prediction";
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Causal inference with attention: balancing weights, training, evaluation"};
  app.require_subcommand(1);

  Common gen_opts;
  auto* gen = app.add_subcommand("generate", "simulate a dataset collection into a directory with manifest.json");
  add_common(gen, gen_opts);

  Common train_opts;
  std::string train_data, trainer_name = "multi";
  std::optional<double> train_lambda;
  auto* train = app.add_subcommand("train", "train a model; writes checkpoint.json, run_log.jsonl and train.json");
  add_common(train, train_opts);
  train->add_option("--data", train_data, "manifest.json (multi) or a dataset file (single)");
  train->add_option("--mode,--trainer", trainer_name, "single or multi")->check(CLI::IsMember({"single", "multi"}));
  train->add_option("--lambda", train_lambda, "train at this lambda instead of sweeping");

  Common infer_opts;
  std::string checkpoint, infer_data;
  bool ite = false;
  long unit = 0, k = 5;
  auto* infer = app.add_subcommand("infer", "zero-shot ATE (or ITE) for one dataset");
  add_common(infer, infer_opts, false);
  infer->add_option("--checkpoint", checkpoint)->required();
  infer->add_option("--data", infer_data)->required();
  infer->add_flag("--ite", ite, "estimate the ITE of --unit instead of the ATE");
  infer->add_option("--unit", unit);
  infer->add_option("--k", k);

  Common oracle_opts;
  std::string oracle_data;
  auto* oracle = app.add_subcommand("oracle", "exact balancing QP for one dataset");
  add_common(oracle, oracle_opts);
  oracle->add_option("--data", oracle_data)->required();

  Common eval_opts;
  std::string baselines;
  auto* evaluate = app.add_subcommand("evaluate", "run an experiment; writes report.json and summary.csv");
  add_common(evaluate, eval_opts);
  evaluate->add_option("--baselines", baselines, "comma list of naive,ipw,snipw,mean added to the methods");

  Common sweep_opts;
  std::string sweep_trainer = "multi";
  auto* sweep = app.add_subcommand("sweep", "lambda sweep on the validation split; writes sweep.json");
  add_common(sweep, sweep_opts);
  sweep->add_option("--trainer", sweep_trainer)->check(CLI::IsMember({"single", "multi"}));

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      const ExperimentConfig cfg = resolve(gen_opts);
      save_collection(experiment_data(cfg), gen_opts.out);
      std::cout << "wrote " << (std::filesystem::path(gen_opts.out) / "manifest.json").string() << '\n';
    } else if (*train) {
      const ExperimentConfig cfg = resolve(train_opts);
      const std::filesystem::path out = train_opts.out;
      std::filesystem::create_directories(out);
      TrainConfig tc = trainer_name == "multi" ? cfg.train : cfg.single_train;
      tc.seed = cfg.seed;
      tc.run_log = out / "run_log.jsonl";
      json summary{{"trainer", trainer_name}};
      ModelParams params;
      if (trainer_name == "single") {
        if (train_data.empty()) throw ConfigError("single training needs --data <dataset file>");
        const Dataset d = load_dataset(train_data);
        const double lambda = train_lambda.value_or(cfg.single_lambda);
        const TrainResult r = train_single(d, tc, lambda);
        params = r.params;
        summary["lambda"] = lambda;
        summary["wall_time_s"] = r.wall_time_s;
        summary["final_loss"] = r.losses.back();
      } else {
        ExperimentConfig data_cfg = cfg;
        if (!train_data.empty()) data_cfg.data = train_data;
        const DatasetCollection c = experiment_data(data_cfg);
        if (train_lambda) {
          const TrainResult r = train_multi(c, tc, *train_lambda);
          params = r.params;
          summary["lambda"] = *train_lambda;
          summary["wall_time_s"] = r.wall_time_s;
          summary["final_loss"] = r.losses.back();
        } else {
          const SweepResult s = lambda_sweep(c, tc, Trainer::multi);
          params = *s.params;
          summary["lambda"] = s.best_lambda;
          json log = json::array();
          for (const auto& e : s.log) log.push_back(sweep_entry_json(e));
          summary["sweep"] = log;
        }
      }
      save_checkpoint(params, out / "checkpoint.json");
      write_json(out / "train.json", summary);
      std::cout << "wrote " << (out / "checkpoint.json").string() << '\n';
    } else if (*infer) {
      const ModelParams p = load_checkpoint(checkpoint);
      const Dataset d = load_dataset(infer_data);
      json result;
      if (ite) {
        const auto t0 = std::chrono::steady_clock::now();
        const IteEstimate e = estimate_ite(d, model_solver(p), unit, k);
        result = {{"unit", e.unit_index},
                  {"ite", e.value},
                  {"neighbor_count", e.neighbor_count},
                  {"neighbors", e.neighbors},
                  {"contributions", e.contributing_estimates},
                  {"skipped_neighbors", e.skipped_neighbors},
                  {"wall_time_s", std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()}};
      } else {
        const AteEstimate e = zero_shot_infer(d, p);
        result = {{"dataset_id", e.dataset_id},
                  {"ate", e.value},
                  {"weights", weights_summary(e.weights)},
                  {"wall_time_s", e.wall_time_s}};
      }
      if (infer_opts.out.empty()) std::cout << result.dump(2) << '\n';
      else write_json(infer_opts.out, result);
    } else if (*oracle) {
      const ExperimentConfig cfg = resolve(oracle_opts);
      const Dataset d = load_dataset(oracle_data);
      const auto t0 = std::chrono::steady_clock::now();
      const BalancingWeights w = oracle_weights(d, cfg.oracle);
      const AteEstimate e = estimate_ate(w, d);
      write_json(oracle_opts.out, {{"dataset_id", d.id},
                                   {"ate", e.value},
                                   {"objective", w.objective},
                                   {"iterations", w.iterations},
                                   {"residual", w.residual},
                                   {"converged", w.converged},
                                   {"stop_reason", w.stop_reason},
                                   {"weights", to_std(w.alpha)},
                                   {"wall_time_s", std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()}});
    } else if (*evaluate) {
      ExperimentConfig cfg = resolve(eval_opts);
      cfg.output_dir = eval_opts.out;
      for (const auto& b : split_list(baselines))
        if (std::find(cfg.methods.begin(), cfg.methods.end(), b) == cfg.methods.end()) cfg.methods.push_back(b);
      const EvalReport r = run_experiment(cfg);
      std::cout << summary_csv(r);
      if (r.partial) {
        std::cerr << "partial report: stage '" << r.failed_stage << "' failed: " << r.error << '\n';
        return 2;
      }
    } else if (*sweep) {
      const ExperimentConfig cfg = resolve(sweep_opts);
      const DatasetCollection c = experiment_data(cfg);
      const Trainer t = trainer_from_string(sweep_trainer);
      TrainConfig tc = t == Trainer::multi ? cfg.train : cfg.single_train;
      tc.seed = cfg.seed;
      const SweepResult s = lambda_sweep(c, tc, t);
      json log = json::array();
      for (const auto& e : s.log) log.push_back(sweep_entry_json(e));
      const std::filesystem::path out = sweep_opts.out;
      std::filesystem::create_directories(out);
      write_json(out / "sweep.json", {{"trainer", sweep_trainer}, {"best_lambda", s.best_lambda}, {"log", log}});
      if (s.params) save_checkpoint(*s.params, out / "checkpoint.json");
      std::cout << "best lambda " << s.best_lambda << '\n';
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
