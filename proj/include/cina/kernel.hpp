#pragma once

#include "cina/data.hpp"

#include <optional>

namespace cina {

/// Exponential-kernel Gram matrix G_ij = exp(k_i . k_j / sqrt(D)) with row sums h.
/// G is the feature-space inner product <phi(X_i), phi(X_j)> induced by softmax attention.
struct GramCache {
  Matrix gram;
  Vector normalizers;
  Eigen::Index dim = 0;

  Eigen::Index size() const { return gram.rows(); }
};

/// Largest admissible k_i . k_j / sqrt(D) before exp() is considered unsafe.
inline constexpr double kMaxKernelExponent = 700.0;

/// Throws KernelOverflowError when any scaled dot product exceeds kMaxKernelExponent.
GramCache build_gram(const Matrix& keys);

/// Gram over the real units only: masked rows/columns of G are zero and the
/// normalizers sum over real units, so padded units never enter any readout.
GramCache build_gram(const Matrix& keys, const BoolVector& mask);

/// Softmax self-attention with queries = keys: out_i = sum_j G_ij v_j / h_i.
Vector attention_readout(const GramCache& g, const Vector& values);

/// Support-vector expansion of the attention output:
/// out_i = sum_j (v_j / h_j) G_ij = <sum_j (v_j / h_j) phi_j, phi_i>.
/// This is the classifier whose penalty is penalty_norm_sq(g, v).
Vector expansion_readout(const GramCache& g, const Vector& values);

/// ||sum_j (v_j / h_j) phi(X_j)||^2 = sum_ij v_i v_j G_ij / (h_i h_j), masked units excluded.
double penalty_norm_sq(const GramCache& g, const Vector& values,
                       const std::optional<BoolVector>& mask = std::nullopt);

}  // namespace cina
