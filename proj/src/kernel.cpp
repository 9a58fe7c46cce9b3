#include "cina/kernel.hpp"

#include "cina/error.hpp"

#include <cmath>

namespace cina {

GramCache build_gram(const Matrix& keys) {
  if (keys.cols() < 1) throw ValidationError("keys must have at least one column");
  if (!keys.allFinite()) throw ValidationError("keys contain non-finite values");
  GramCache g;
  g.dim = keys.cols();
  const double scale = 1.0 / std::sqrt(static_cast<double>(g.dim));
  g.gram.noalias() = keys * keys.transpose();
  g.gram *= scale;
  const double worst = g.gram.maxCoeff();
  if (worst > kMaxKernelExponent) {
    throw KernelOverflowError("kernel exponent " + std::to_string(worst) +
                              " would overflow exp(); standardize the keys first");
  }
  g.gram = g.gram.array().exp().matrix();
  g.normalizers = g.gram.rowwise().sum();
  return g;
}

GramCache build_gram(const Matrix& keys, const BoolVector& mask) {
  if (mask.size() != keys.rows()) throw ValidationError("build_gram: mask length mismatch");
  Matrix masked = keys;
  for (Eigen::Index i = 0; i < keys.rows(); ++i)
    if (!mask(i)) masked.row(i).setZero();
  GramCache g = build_gram(masked);
  for (Eigen::Index i = 0; i < keys.rows(); ++i) {
    if (!mask(i)) {
      g.gram.row(i).setZero();
      g.gram.col(i).setZero();
    }
  }
  g.normalizers = g.gram.rowwise().sum();
  // Padded units keep a unit normalizer so divisions stay finite.
  for (Eigen::Index i = 0; i < keys.rows(); ++i)
    if (!mask(i)) g.normalizers(i) = 1.0;
  return g;
}

Vector attention_readout(const GramCache& g, const Vector& values) {
  if (values.size() != g.size()) throw ValidationError("attention_readout: length mismatch");
  return (g.gram * values).cwiseQuotient(g.normalizers);
}

Vector expansion_readout(const GramCache& g, const Vector& values) {
  if (values.size() != g.size()) throw ValidationError("expansion_readout: length mismatch");
  return g.gram * values.cwiseQuotient(g.normalizers);
}

double penalty_norm_sq(const GramCache& g, const Vector& values, const std::optional<BoolVector>& mask) {
  if (values.size() != g.size()) throw ValidationError("penalty_norm_sq: length mismatch");
  Vector u = values.cwiseQuotient(g.normalizers);
  if (mask) {
    if (mask->size() != g.size()) throw ValidationError("penalty_norm_sq: mask length mismatch");
    u = mask->select(u, 0.0);
  }
  // PSD quadratic form; clamp rounding noise below zero.
  return std::max(0.0, u.dot(g.gram * u));
}

}  // namespace cina
