#include <doctest.h>

#include "cina/data.hpp"
#include "cina/error.hpp"
#include "test_util.hpp"

#include <fstream>

using namespace cina;
using cina::testing::TempDir;

namespace {

void write_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p);
  out << text;
}

}  // namespace

TEST_CASE("load_dataset reads a small csv file") {
  TempDir tmp;
  const auto p = tmp.path() / "small.csv";
  write_file(p, "# true_ate=-0.4\nx0,x1,t,y\n0.5,1,1,2\n1.5,2,1,3\n-1,0,0,1\n2,2,0,0\n");
  const Dataset d = load_dataset(p);
  CHECK(d.size() == 4);
  CHECK(d.dim() == 2);
  CHECK(d.treated_count() == 2);
  REQUIRE(d.true_ate.has_value());
  CHECK(*d.true_ate == doctest::Approx(-0.4));
  CHECK(d.covariates(1, 0) == 1.5);
  CHECK(d.outcomes(3) == 0.0);
}

TEST_CASE("load_dataset rejects degenerate and malformed input") {
  TempDir tmp;
  SUBCASE("all treated") {
    write_file(tmp.path() / "a.csv", "x0,t,y\n1,1,1\n2,1,1\n3,1,2\n4,1,0\n");
    CHECK_THROWS_AS(load_dataset(tmp.path() / "a.csv"), DegenerateDatasetError);
  }
  SUBCASE("non-binary treatment") {
    write_file(tmp.path() / "b.csv", "x0,t,y\n1,1,1\n2,2,1\n3,0,2\n");
    CHECK_THROWS_AS(load_dataset(tmp.path() / "b.csv"), ValidationError);
  }
  SUBCASE("unparsable cell names row and column") {
    write_file(tmp.path() / "c.csv", "x0,t,y\n1,1,1\nfoo,0,1\n");
    try {
      load_dataset(tmp.path() / "c.csv");
      FAIL("expected ParseError");
    } catch (const ParseError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("row 2") != std::string::npos);
      CHECK(msg.find("x0") != std::string::npos);
    }
  }
  SUBCASE("ragged row") {
    write_file(tmp.path() / "d.csv", "x0,t,y\n1,1,1\n2,0\n");
    CHECK_THROWS_AS(load_dataset(tmp.path() / "d.csv"), ParseError);
  }
  SUBCASE("bad header") {
    write_file(tmp.path() / "e.csv", "a,t,y\n1,1,1\n2,0,1\n");
    CHECK_THROWS_AS(load_dataset(tmp.path() / "e.csv"), ParseError);
  }
  SUBCASE("malformed json") {
    write_file(tmp.path() / "f.json", "{\"covariates\": [[1]], ");
    CHECK_THROWS_AS(load_dataset(tmp.path() / "f.json"), ParseError);
  }
}

TEST_CASE("write/load round trip preserves every value") {
  TempDir tmp;
  Rng rng(7);
  for (int trial = 0; trial < 10; ++trial) {
    Dataset d = cina::testing::random_dataset(rng, 5 + trial, 1 + trial % 4, "rt" + std::to_string(trial));
    if (trial % 2 == 0) d.true_ate = std::normal_distribution<double>(0, 3)(rng);
    for (auto fmt : {FileFormat::csv, FileFormat::json}) {
      const auto p = tmp.path() / (d.id + (fmt == FileFormat::csv ? ".csv" : ".json"));
      save_dataset(d, p, fmt);
      const Dataset back = load_dataset(p, fmt);
      CHECK((back.covariates - d.covariates).cwiseAbs().maxCoeff() <= 1e-12);
      CHECK((back.outcomes - d.outcomes).cwiseAbs().maxCoeff() <= 1e-12);
      CHECK(back.treatments == d.treatments);
      CHECK(back.true_ate.has_value() == d.true_ate.has_value());
      if (d.true_ate) CHECK(std::abs(*back.true_ate - *d.true_ate) <= 1e-12);
    }
  }
}

TEST_CASE("standardize z-scores columns with population std") {
  Dataset d;
  d.id = "s";
  d.covariates.resize(3, 2);
  d.covariates << 1, 5, 2, 5, 3, 5;
  d.treatments.resize(3);
  d.treatments << 1, 0, 1;
  d.outcomes = Vector::LinSpaced(3, 0, 2);
  d.true_ate = 1.5;
  const Dataset s = standardize(d);
  CHECK(s.covariates(0, 0) == doctest::Approx(-1.224744871391589));
  CHECK(s.covariates(1, 0) == doctest::Approx(0.0));
  CHECK(s.covariates(2, 0) == doctest::Approx(1.224744871391589));
  CHECK(s.covariates.col(1).isZero());
  CHECK(s.treatments == d.treatments);
  CHECK(s.outcomes == d.outcomes);
  CHECK(s.true_ate == d.true_ate);
}

TEST_CASE("standardize is idempotent") {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    Dataset d = cina::testing::random_dataset(rng, 10 + trial, 4);
    d.covariates.col(0) *= 50.0;
    d.covariates.col(1).array() += 1e3;
    const Dataset once = standardize(d);
    const Dataset twice = standardize(once);
    CHECK((once.covariates - twice.covariates).cwiseAbs().maxCoeff() <= 1e-10);
    for (Eigen::Index j = 0; j < once.dim(); ++j) {
      CHECK(std::abs(once.covariates.col(j).mean()) <= 1e-12);
      CHECK(once.covariates.col(j).squaredNorm() / once.size() == doctest::Approx(1.0));
    }
  }
}

TEST_CASE("signs are +-1 and stable") {
  Rng rng(3);
  const Dataset d = cina::testing::random_dataset(rng, 9, 2);
  const Vector w1 = d.signs();
  const Vector w2 = d.signs();
  CHECK(w1 == w2);
  CHECK(w1.cwiseProduct(w1).isOnes());
  for (Eigen::Index i = 0; i < d.size(); ++i) CHECK(w1(i) == 2.0 * d.treatments(i) - 1.0);
}

TEST_CASE("pad_collection masks real units") {
  Rng rng(5);
  DatasetCollection c;
  c.add(cina::testing::random_dataset(rng, 3, 2, "a"), Split::train);
  c.add(cina::testing::random_dataset(rng, 5, 2, "b"), Split::test);
  const PaddedBatch b = pad_collection(c);
  CHECK(b.max_units() == 5);
  CHECK(b.mask.row(0).count() == 3);
  CHECK(b.mask.row(1).count() == 5);
  for (Eigen::Index j = 3; j < 5; ++j) {
    CHECK(b.outcomes(0, j) == 0.0);
    CHECK(b.treatments(0, j) == 0);
    CHECK(b.covariates[0].row(j).isZero());
  }
  for (Eigen::Index m = 0; m < 2; ++m) {
    const Dataset back = unpad(b, m);
    const Dataset& orig = c.datasets[static_cast<std::size_t>(m)];
    CHECK(back.covariates == orig.covariates);
    CHECK(back.treatments == orig.treatments);
    CHECK(back.outcomes == orig.outcomes);
    CHECK(back.id == orig.id);
  }
}

TEST_CASE("pad_collection single dataset and empty collection") {
  Rng rng(6);
  DatasetCollection c;
  CHECK_THROWS_AS(pad_collection(c), ValidationError);
  c.add(cina::testing::random_dataset(rng, 4, 3, "only"), Split::train);
  const PaddedBatch b = pad_collection(c);
  CHECK(b.mask.all());
  CHECK(b.covariates[0] == c.datasets[0].covariates);
}

TEST_CASE("pad/unpad round trip over random collections") {
  Rng rng(9);
  for (int trial = 0; trial < 10; ++trial) {
    DatasetCollection c;
    const int m = 1 + trial % 4;
    for (int k = 0; k < m; ++k) {
      c.add(cina::testing::random_dataset(rng, 2 + (trial * 7 + k * 3) % 11, 3, "d" + std::to_string(k)),
            Split::train);
    }
    const PaddedBatch b = pad_collection(c);
    for (int k = 0; k < m; ++k) {
      const Dataset back = unpad(b, k);
      CHECK(back.covariates == c.datasets[static_cast<std::size_t>(k)].covariates);
      CHECK(back.outcomes == c.datasets[static_cast<std::size_t>(k)].outcomes);
      CHECK(back.treatments == c.datasets[static_cast<std::size_t>(k)].treatments);
    }
  }
}

TEST_CASE("collection validation catches duplicate ids") {
  Rng rng(1);
  DatasetCollection c;
  c.add(cina::testing::random_dataset(rng, 4, 2, "same"), Split::train);
  c.add(cina::testing::random_dataset(rng, 4, 2, "same"), Split::test);
  CHECK_THROWS_AS(c.validate(), ValidationError);
}
