#include <doctest.h>

#include "cina/error.hpp"
#include "cina/harness.hpp"
#include "test_util.hpp"

#include <fstream>
#include <sstream>

using namespace cina;
using cina::testing::TempDir;

namespace {

ExperimentConfig small_config() {
  ExperimentConfig cfg;
  cfg.sim_a.n_datasets = 5;
  cfg.sim_a.units_min = 48;
  cfg.sim_a.units_max = 64;
  cfg.eval_split = EvalSplit::all;
  cfg.methods = {"naive", "ipw", "snipw"};
  cfg.seed = 17;
  return cfg;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

}  // namespace

TEST_CASE("compute_mae") {
  const MaeResult zero = compute_mae({1.0}, {1.0});
  CHECK(zero.mae == 0.0);
  CHECK(zero.se == 0.0);
  const MaeResult two = compute_mae({1.0, 4.0}, {0.0, 1.0});
  CHECK(two.mae == doctest::Approx(2.0));
  // |errors| = {1, 3}: sample std sqrt(2), over sqrt(2)
  CHECK(two.se == doctest::Approx(1.0));

  Rng rng(1);
  std::vector<double> e(20), t(20);
  std::normal_distribution<double> norm(0.0, 1.0);
  for (int i = 0; i < 20; ++i) {
    e[static_cast<std::size_t>(i)] = norm(rng);
    t[static_cast<std::size_t>(i)] = norm(rng);
  }
  double sum = 0.0, sq = 0.0;
  for (int i = 0; i < 20; ++i) sum += std::abs(e[static_cast<std::size_t>(i)] - t[static_cast<std::size_t>(i)]);
  const double mean = sum / 20.0;
  for (int i = 0; i < 20; ++i) sq += std::pow(std::abs(e[static_cast<std::size_t>(i)] - t[static_cast<std::size_t>(i)]) - mean, 2);
  const MaeResult r = compute_mae(e, t);
  CHECK(r.mae == doctest::Approx(mean).epsilon(1e-14));
  CHECK(r.se == doctest::Approx(std::sqrt(sq / 19.0) / std::sqrt(20.0)).epsilon(1e-12));

  CHECK_THROWS_AS(compute_mae({1.0}, {1.0, 2.0}), ValidationError);
  CHECK_THROWS_AS(compute_mae({}, {}), ValidationError);
}

TEST_CASE("baseline pipeline end to end") {
  const ExperimentConfig cfg = small_config();
  const EvalReport r = run_experiment(cfg);
  REQUIRE_FALSE(r.partial);
  CHECK(r.rows.size() == 15);
  CHECK(r.summaries.size() == 3);
  CHECK(r.seed == 17);

  SUBCASE("aggregates recompute from the rows") {
    for (const auto& s : r.summaries) {
      std::vector<double> est, truth;
      double wall = 0.0;
      for (const auto& row : r.rows) {
        if (row.method != s.method) continue;
        est.push_back(row.estimate);
        truth.push_back(row.truth);
        wall += row.wall_time_s;
        CHECK(row.abs_error == doctest::Approx(std::abs(row.estimate - row.truth)));
      }
      const MaeResult m = compute_mae(est, truth);
      CHECK(s.n == est.size());
      CHECK(s.mae == doctest::Approx(m.mae));
      CHECK(s.se == doctest::Approx(m.se));
      CHECK(s.mean_wall_time_s == doctest::Approx(wall / static_cast<double>(est.size())));
    }
  }
  SUBCASE("naive rows match the estimator applied directly") {
    const DatasetCollection c = experiment_data(cfg);
    for (const auto& row : r.rows) {
      if (row.method != "naive") continue;
      for (const auto& d : c.datasets)
        if (d.id == row.dataset_id) {
          CHECK(row.estimate == naive_estimator(d).value);
          CHECK(row.truth == *d.true_ate);
        }
    }
  }
  SUBCASE("same seed gives the same report") {
    const EvalReport again = run_experiment(cfg);
    CHECK(deterministic_view(again) == deterministic_view(r));
    ExperimentConfig other = cfg;
    other.seed = 18;
    CHECK(deterministic_view(run_experiment(other)) != deterministic_view(r));
  }
  SUBCASE("report files") {
    TempDir tmp;
    write_report(r, tmp.path());
    const auto j = nlohmann::json::parse(slurp(tmp.path() / "report.json"));
    CHECK(j.at("metadata").at("seed").get<std::uint64_t>() == 17);
    CHECK(j.at("metadata").at("config_hash").get<std::string>() == r.config_hash);
    CHECK(j.at("rows").size() == 15);
    CHECK(j.at("metadata").contains("versions"));
    std::stringstream csv(slurp(tmp.path() / "summary.csv"));
    std::string header;
    std::getline(csv, header);
    CHECK(header == "method,mae,se,mean_wall_time_s");
    int lines = 0;
    for (std::string line; std::getline(csv, line);) lines += !line.empty();
    CHECK(lines == 3);
  }
}

TEST_CASE("the test split is the default evaluation set") {
  ExperimentConfig cfg = small_config();
  cfg.sim_a.n_datasets = 10;
  cfg.eval_split = EvalSplit::test;
  cfg.methods = {"naive", "mean_prediction"};
  const EvalReport r = run_experiment(cfg);
  REQUIRE_FALSE(r.partial);
  const DatasetCollection c = experiment_data(cfg);
  CHECK(r.summary("naive")->n == c.by_split(Split::test).size());
  double mean = 0.0;
  for (const Dataset* d : c.by_split(Split::train)) mean += *d->true_ate;
  mean /= static_cast<double>(c.by_split(Split::train).size());
  for (const auto& row : r.rows)
    if (row.method == "mean_prediction") CHECK(row.estimate == doctest::Approx(mean));
}

TEST_CASE("a failing stage yields a partial report") {
  ExperimentConfig cfg = small_config();
  cfg.methods = {"naive", "cina"};
  cfg.single_rule = SingleLambdaRule::fixed;
  cfg.single_train.epochs = 50;
  cfg.single_train.lr_max = 1e300;
  cfg.single_train.lr_min = 1e300;
  TempDir tmp;
  cfg.output_dir = tmp.path();
  const EvalReport r = run_experiment(cfg);
  CHECK(r.partial);
  CHECK(r.failed_stage == "cina");
  CHECK_FALSE(r.error.empty());
  REQUIRE(r.summary("naive") != nullptr);
  CHECK(r.summary("naive")->n == 5);
  const auto j = nlohmann::json::parse(slurp(tmp.path() / "report.json"));
  CHECK(j.at("partial").get<bool>());
  CHECK(j.at("failed_stage").get<std::string>() == "cina");
}

TEST_CASE("configuration JSON") {
  ExperimentConfig cfg = small_config();
  cfg.generator = GeneratorKind::er;
  cfg.er.nodes = 6;
  cfg.train.epochs = 123;
  cfg.train.key_map = KeyMapKind::linear_relu_standardized;
  cfg.single_rule = SingleLambdaRule::relative;
  const nlohmann::json j = to_json(cfg);
  const ExperimentConfig back = experiment_config_from_json(j);
  CHECK(to_json(back) == j);
  CHECK(config_hash(to_json(back)) == config_hash(j));

  SUBCASE("hash changes with any field") {
    ExperimentConfig a = cfg;
    a.train.lr_min *= 0.5;
    CHECK(config_hash(to_json(a)) != config_hash(j));
    ExperimentConfig b = cfg;
    b.seed += 1;
    CHECK(config_hash(to_json(b)) != config_hash(j));
    ExperimentConfig e = cfg;
    e.methods.push_back("svm_oracle");
    CHECK(config_hash(to_json(e)) != config_hash(j));
    CHECK(config_hash(j).size() == 16);
  }
  SUBCASE("missing keys keep defaults") {
    const ExperimentConfig d = experiment_config_from_json(nlohmann::json::object());
    CHECK(to_json(d) == to_json(ExperimentConfig{}));
  }
  SUBCASE("unknown values are refused") {
    nlohmann::json bad = j;
    bad["methods"] = {"naive", "magic"};
    CHECK_THROWS_AS(experiment_config_from_json(bad), ConfigError);
    bad = j;
    bad["generator"] = "nope";
    CHECK_THROWS_AS(experiment_config_from_json(bad), ConfigError);
  }
}

TEST_CASE("collections round-trip through a manifest") {
  ExperimentConfig cfg = small_config();
  cfg.generator = GeneratorKind::er;
  cfg.er.n_datasets = 4;
  cfg.er.units = 30;
  cfg.er.nodes = 5;
  const DatasetCollection c = experiment_data(cfg);
  TempDir tmp;
  save_collection(c, tmp.path());
  const DatasetCollection back = load_collection(tmp.path() / "manifest.json");
  REQUIRE(back.size() == c.size());
  CHECK(back.heterogeneous_graphs == c.heterogeneous_graphs);
  for (std::size_t i = 0; i < c.size(); ++i) {
    CHECK(back.splits[i] == c.splits[i]);
    CHECK(back.datasets[i].id == c.datasets[i].id);
    CHECK(back.datasets[i].covariates == c.datasets[i].covariates);
    CHECK(back.datasets[i].treatments == c.datasets[i].treatments);
    CHECK(back.datasets[i].outcomes == c.datasets[i].outcomes);
    CHECK(back.datasets[i].true_ate == c.datasets[i].true_ate);
  }
  ExperimentConfig loaded = cfg;
  loaded.data = tmp.path() / "manifest.json";
  loaded.methods = {"naive"};
  ExperimentConfig generated = cfg;
  generated.methods = {"naive"};
  const EvalReport a = run_experiment(loaded), b = run_experiment(generated);
  REQUIRE(a.rows.size() == b.rows.size());
  for (std::size_t i = 0; i < a.rows.size(); ++i) CHECK(a.rows[i].estimate == b.rows[i].estimate);
}

TEST_CASE("box-inactive lambda") {
  Rng rng(2);
  const Dataset d = cina::testing::random_dataset(rng, 12, 15);
  const BalancingWeights qp = oracle_weights(d);
  const double ls = box_inactive_lambda(qp);
  CHECK(ls == doctest::Approx(qp.objective / (2.0 * qp.alpha.maxCoeff())));
  CHECK(ls > 0.0);
}

TEST_CASE("per-dataset CInA with free values runs and returns weights in A") {
  Rng rng(3);
  Dataset d = cina::testing::random_dataset(rng, 20, 3, "single");
  TrainConfig cfg;
  cfg.epochs = 200;
  const AteEstimate e = single_dataset_cina(d, cfg, 0.05);
  CHECK(e.dataset_id == "single");
  CHECK(e.weights.treated_sum == doctest::Approx(1.0));
  CHECK(e.weights.control_sum == doctest::Approx(1.0));
  CHECK(e.weights.alpha.minCoeff() >= 0.0);
  CHECK(e.value == doctest::Approx(estimate_ate(e.weights, d).value));
}
