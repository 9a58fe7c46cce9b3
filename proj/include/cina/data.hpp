#pragma once

#include <Eigen/Dense>

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace cina {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using BoolVector = Eigen::Array<bool, Eigen::Dynamic, 1>;

/// One observational study: N units with covariates, a binary treatment and an outcome.
struct Dataset {
  Matrix covariates;  // N x Dx
  Eigen::VectorXi treatments;  // values in {0, 1}
  Vector outcomes;
  std::optional<double> true_ate;
  std::string id;

  Eigen::Index size() const { return covariates.rows(); }
  Eigen::Index dim() const { return covariates.cols(); }

  /// W_i = 2 T_i - 1.
  Vector signs() const;
  Eigen::Index treated_count() const;
  Eigen::Index control_count() const { return size() - treated_count(); }

  /// Throws ValidationError / DegenerateDatasetError when the invariants fail.
  void validate() const;
};

enum class Split { train, validation, test };

std::string to_string(Split s);
Split split_from_string(const std::string& s);

struct DatasetCollection {
  std::vector<Dataset> datasets;
  std::vector<Split> splits;
  /// Units from different datasets follow different causal graphs.
  bool heterogeneous_graphs = false;

  std::size_t size() const { return datasets.size(); }
  void add(Dataset d, Split s);
  std::vector<const Dataset*> by_split(Split s) const;
  void validate() const;
};

/// M datasets padded to a common unit count. Masked-out entries are zero.
struct PaddedBatch {
  std::vector<Matrix> covariates;  // M entries of N_max x Dx
  Eigen::MatrixXi treatments;      // M x N_max
  Matrix outcomes;                 // M x N_max
  Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic> mask;  // M x N_max, true = real unit
  std::vector<std::string> ids;
  std::vector<std::optional<double>> true_ates;

  Eigen::Index batch_size() const { return mask.rows(); }
  Eigen::Index max_units() const { return mask.cols(); }
};

enum class FileFormat { csv, json };

FileFormat format_from_path(const std::filesystem::path& path);

Dataset load_dataset(const std::filesystem::path& path, FileFormat format);
inline Dataset load_dataset(const std::filesystem::path& path) {
  return load_dataset(path, format_from_path(path));
}
void save_dataset(const Dataset& d, const std::filesystem::path& path, FileFormat format);

/// Column-wise z-scoring over the units of this dataset (population std).
/// Constant columns are centered only.
Dataset standardize(const Dataset& d);
/// Standardizes a bare matrix the same way; used by the key map.
Matrix standardize_columns(const Matrix& x);

PaddedBatch pad_collection(const DatasetCollection& c);
/// Recovers the m-th dataset from a padded batch.
Dataset unpad(const PaddedBatch& b, Eigen::Index m);

}  // namespace cina
