#include "cina/data.hpp"

#include "cina/error.hpp"

#include <json.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

namespace cina {

namespace {

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) {
    auto b = cell.find_first_not_of(" \t\r");
    auto e = cell.find_last_not_of(" \t\r");
    out.push_back(b == std::string::npos ? std::string() : cell.substr(b, e - b + 1));
  }
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

double parse_double(const std::string& s, std::size_t row, const std::string& column) {
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    throw ParseError("row " + std::to_string(row) + ", column '" + column +
                     "': cannot parse '" + s + "' as a number");
  }
  return v;
}

Dataset load_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path.string());

  Dataset d;
  d.id = path.stem().string();
  std::string line;
  std::vector<std::string> header;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      auto pos = line.find("true_ate=");
      if (pos != std::string::npos) {
        d.true_ate = parse_double(split_line(line.substr(pos + 9)).at(0), 0, "true_ate");
      }
      continue;
    }
    header = split_line(line);
    break;
  }
  if (header.size() < 3) throw ParseError(path.string() + ": missing header x0..x{D-1},t,y");

  const std::size_t dx = header.size() - 2;
  for (std::size_t j = 0; j < dx; ++j) {
    if (header[j] != "x" + std::to_string(j)) {
      throw ParseError("header column " + std::to_string(j) + ": expected 'x" +
                       std::to_string(j) + "', got '" + header[j] + "'");
    }
  }
  if (header[dx] != "t" || header[dx + 1] != "y") {
    throw ParseError("header must end with columns 't,y'");
  }

  std::vector<std::vector<double>> rows;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    ++row;
    auto cells = split_line(line);
    if (cells.size() != header.size()) {
      throw ParseError("row " + std::to_string(row) + ": expected " +
                       std::to_string(header.size()) + " columns, got " +
                       std::to_string(cells.size()));
    }
    std::vector<double> values(cells.size());
    for (std::size_t j = 0; j < cells.size(); ++j) values[j] = parse_double(cells[j], row, header[j]);
    rows.push_back(std::move(values));
  }

  const auto n = static_cast<Eigen::Index>(rows.size());
  d.covariates.resize(n, static_cast<Eigen::Index>(dx));
  d.treatments.resize(n);
  d.outcomes.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& r = rows[static_cast<std::size_t>(i)];
    for (std::size_t j = 0; j < dx; ++j) d.covariates(i, static_cast<Eigen::Index>(j)) = r[j];
    const double t = r[dx];
    if (t != 0.0 && t != 1.0) {
      throw ValidationError("row " + std::to_string(i + 1) + ", column 't': treatment must be 0 or 1");
    }
    d.treatments(i) = static_cast<int>(t);
    d.outcomes(i) = r[dx + 1];
  }
  return d;
}

Dataset load_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }

  Dataset d;
  try {
    const auto& cov = j.at("covariates");
    const auto& t = j.at("treatments");
    const auto& y = j.at("outcomes");
    const auto n = static_cast<Eigen::Index>(cov.size());
    if (static_cast<Eigen::Index>(t.size()) != n || static_cast<Eigen::Index>(y.size()) != n) {
      throw ParseError("covariates, treatments and outcomes must have equal length");
    }
    const auto dx = n > 0 ? static_cast<Eigen::Index>(cov[0].size()) : 0;
    d.covariates.resize(n, dx);
    d.treatments.resize(n);
    d.outcomes.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto& r = cov[static_cast<std::size_t>(i)];
      if (static_cast<Eigen::Index>(r.size()) != dx) {
        throw ParseError("row " + std::to_string(i + 1) + ": expected " + std::to_string(dx) +
                         " covariates");
      }
      for (Eigen::Index k = 0; k < dx; ++k) d.covariates(i, k) = r[static_cast<std::size_t>(k)].get<double>();
      const double tv = t[static_cast<std::size_t>(i)].get<double>();
      if (tv != 0.0 && tv != 1.0) {
        throw ValidationError("row " + std::to_string(i + 1) + ", column 't': treatment must be 0 or 1");
      }
      d.treatments(i) = static_cast<int>(tv);
      d.outcomes(i) = y[static_cast<std::size_t>(i)].get<double>();
    }
    if (j.contains("true_ate") && !j["true_ate"].is_null()) d.true_ate = j["true_ate"].get<double>();
    d.id = j.value("id", path.stem().string());
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  return d;
}

}  // namespace

Vector Dataset::signs() const { return 2.0 * treatments.cast<double>().array() - 1.0; }

Eigen::Index Dataset::treated_count() const { return treatments.sum(); }

void Dataset::validate() const {
  const auto n = size();
  if (treatments.size() != n || outcomes.size() != n) {
    throw ValidationError("dataset '" + id + "': covariates, treatments and outcomes differ in length");
  }
  if (n < 2) throw DegenerateDatasetError("dataset '" + id + "': needs at least two units");
  for (Eigen::Index i = 0; i < n; ++i) {
    if (treatments(i) != 0 && treatments(i) != 1) {
      throw ValidationError("dataset '" + id + "': treatment of unit " + std::to_string(i) +
                            " is not binary");
    }
  }
  if (!covariates.allFinite()) throw ValidationError("dataset '" + id + "': non-finite covariates");
  const auto nt = treated_count();
  if (nt == 0 || nt == n) {
    throw DegenerateDatasetError("dataset '" + id + "': " +
                                 std::string(nt == 0 ? "no treated units" : "no control units"));
  }
}

std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::validation: return "validation";
    case Split::test: return "test";
  }
  return "train";
}

Split split_from_string(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "validation") return Split::validation;
  if (s == "test") return Split::test;
  throw ValidationError("unknown split '" + s + "'");
}

void DatasetCollection::add(Dataset d, Split s) {
  datasets.push_back(std::move(d));
  splits.push_back(s);
}

std::vector<const Dataset*> DatasetCollection::by_split(Split s) const {
  std::vector<const Dataset*> out;
  for (std::size_t i = 0; i < datasets.size(); ++i) {
    if (splits[i] == s) out.push_back(&datasets[i]);
  }
  return out;
}

void DatasetCollection::validate() const {
  if (splits.size() != datasets.size()) throw ValidationError("every dataset needs a split label");
  std::set<std::string> ids;
  for (const auto& d : datasets) {
    if (!ids.insert(d.id).second) throw ValidationError("duplicate dataset id '" + d.id + "'");
    d.validate();
  }
}

FileFormat format_from_path(const std::filesystem::path& path) {
  auto ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  if (ext == ".json") return FileFormat::json;
  if (ext == ".csv") return FileFormat::csv;
  throw ValidationError("cannot infer dataset format from '" + path.string() + "'");
}

Dataset load_dataset(const std::filesystem::path& path, FileFormat format) {
  Dataset d = format == FileFormat::csv ? load_csv(path) : load_json(path);
  d.validate();
  return d;
}

void save_dataset(const Dataset& d, const std::filesystem::path& path, FileFormat format) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  if (format == FileFormat::csv) {
    out << std::setprecision(17);
    if (d.true_ate) out << "# true_ate=" << *d.true_ate << '\n';
    for (Eigen::Index j = 0; j < d.dim(); ++j) out << 'x' << j << ',';
    out << "t,y\n";
    for (Eigen::Index i = 0; i < d.size(); ++i) {
      for (Eigen::Index j = 0; j < d.dim(); ++j) out << d.covariates(i, j) << ',';
      out << d.treatments(i) << ',' << d.outcomes(i) << '\n';
    }
    return;
  }
  nlohmann::json j;
  j["id"] = d.id;
  auto& cov = j["covariates"] = nlohmann::json::array();
  for (Eigen::Index i = 0; i < d.size(); ++i) {
    std::vector<double> row(static_cast<std::size_t>(d.dim()));
    for (Eigen::Index k = 0; k < d.dim(); ++k) row[static_cast<std::size_t>(k)] = d.covariates(i, k);
    cov.push_back(row);
  }
  j["treatments"] = std::vector<int>(d.treatments.data(), d.treatments.data() + d.size());
  j["outcomes"] = std::vector<double>(d.outcomes.data(), d.outcomes.data() + d.size());
  j["true_ate"] = d.true_ate ? nlohmann::json(*d.true_ate) : nlohmann::json(nullptr);
  out << j.dump();
}

Matrix standardize_columns(const Matrix& x) {
  Matrix out = x;
  const auto n = static_cast<double>(x.rows());
  if (x.rows() == 0) return out;
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    const double mean = x.col(j).mean();
    out.col(j).array() -= mean;
    const double var = out.col(j).squaredNorm() / n;
    // Columns that are constant up to rounding are centered only.
    if (var > 1e-24 * std::max(1.0, mean * mean)) out.col(j) /= std::sqrt(var);
    else out.col(j).setZero();
  }
  return out;
}

Dataset standardize(const Dataset& d) {
  Dataset out = d;
  out.covariates = standardize_columns(d.covariates);
  return out;
}

PaddedBatch pad_collection(const DatasetCollection& c) {
  if (c.datasets.empty()) throw ValidationError("cannot pad an empty collection");
  const auto dx = c.datasets.front().dim();
  Eigen::Index n_max = 0;
  for (const auto& d : c.datasets) {
    if (d.dim() != dx) throw ValidationError("dataset '" + d.id + "' has a different covariate dimension");
    n_max = std::max(n_max, d.size());
  }
  const auto m = static_cast<Eigen::Index>(c.datasets.size());
  PaddedBatch b;
  b.treatments = Eigen::MatrixXi::Zero(m, n_max);
  b.outcomes = Matrix::Zero(m, n_max);
  b.mask.setConstant(m, n_max, false);
  for (Eigen::Index k = 0; k < m; ++k) {
    const auto& d = c.datasets[static_cast<std::size_t>(k)];
    Matrix x = Matrix::Zero(n_max, dx);
    x.topRows(d.size()) = d.covariates;
    b.covariates.push_back(std::move(x));
    b.treatments.row(k).head(d.size()) = d.treatments.transpose();
    b.outcomes.row(k).head(d.size()) = d.outcomes.transpose();
    b.mask.row(k).head(d.size()).setConstant(true);
    b.ids.push_back(d.id);
    b.true_ates.push_back(d.true_ate);
  }
  return b;
}

Dataset unpad(const PaddedBatch& b, Eigen::Index m) {
  const auto n = static_cast<Eigen::Index>(b.mask.row(m).count());
  Dataset d;
  d.covariates = b.covariates[static_cast<std::size_t>(m)].topRows(n);
  d.treatments = b.treatments.row(m).head(n).transpose();
  d.outcomes = b.outcomes.row(m).head(n).transpose();
  d.true_ate = b.true_ates[static_cast<std::size_t>(m)];
  d.id = b.ids[static_cast<std::size_t>(m)];
  return d;
}

}  // namespace cina
