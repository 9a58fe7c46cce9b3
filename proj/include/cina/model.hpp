#pragma once

#include "cina/data.hpp"
#include "cina/datagen.hpp"
#include "cina/kernel.hpp"
#include "cina/oracle.hpp"

#include <filesystem>
#include <optional>
#include <string>

#include <json.hpp>

namespace cina {

/// y = weight * x + bias, applied row-wise to a batch of inputs.
struct Affine {
  Matrix weight;  // out x in
  Vector bias;    // out

  Eigen::Index in_dim() const { return weight.cols(); }
  Eigen::Index out_dim() const { return weight.rows(); }
  Matrix apply(const Matrix& in) const;
  bool finite() const { return weight.allFinite() && bias.allFinite(); }
};

enum class KeyMapKind { identity_standardized, linear_relu_standardized };

std::string to_string(KeyMapKind k);
KeyMapKind key_map_from_string(const std::string& s);

inline constexpr Eigen::Index kEmbedWidth = 32;
inline constexpr Eigen::Index kAttentionWidth = 2 * kEmbedWidth;

/// Amortized value network: per-unit embeddings of (W_i, k_i), per-dataset
/// standardization, one scaled dot-product attention layer over units and a
/// scalar projection.
struct ValueNetParams {
  Affine embed_w;  // 1 -> 32, relu
  Affine embed_k;  // D -> 32, relu
  Affine query;    // 64 -> 64
  Affine key;      // 64 -> 64
  Affine value;    // 64 -> 64
  Affine out_proj; // 64 -> 1
};

struct ModelParams {
  KeyMapKind key_map = KeyMapKind::identity_standardized;
  Affine key_linear;  // Dx -> D, linear key map only
  /// Set for the multi-dataset model. Otherwise V is `free_values`, one entry per unit.
  std::optional<ValueNetParams> value_net;
  Vector free_values;
  double beta0 = 0.0;
  double lambda = 1.0;
  Eigen::Index input_dim = 0;

  bool amortized() const { return value_net.has_value(); }
  Eigen::Index key_dim() const;
  /// Throws ValidationError on non-finite tensors, lambda <= 0 or inconsistent shapes.
  void validate() const;
};

/// Parameters for one dataset with V stored directly, initialized to |N(0, 0.1^2)| W.
ModelParams init_single(const Dataset& d, double lambda, std::uint64_t seed,
                        KeyMapKind kind = KeyMapKind::identity_standardized, Eigen::Index key_dim = 0);

/// Value-network parameters with uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights.
ModelParams init_amortized(Eigen::Index input_dim, double lambda, std::uint64_t seed,
                           KeyMapKind kind = KeyMapKind::identity_standardized, Eigen::Index key_dim = 0);

/// Same shapes, every entry zero. Used as a gradient accumulator.
ModelParams zeros_like(const ModelParams& p);

/// Trainable entries in a fixed order (lambda excluded).
Vector flatten(const ModelParams& p);
void unflatten(ModelParams& p, const Vector& theta);
Eigen::Index parameter_count(const ModelParams& p);

// ---- forward pieces -------------------------------------------------------

/// Column z-scoring over the real rows. Constant columns map to zero.
struct StandardizeTape {
  Matrix z;
  Vector inv_sd;  // 0 for constant columns
};

StandardizeTape standardize_forward(const Matrix& x, const BoolVector* mask = nullptr);
Matrix standardize_backward(const StandardizeTape& t, const Matrix& dz, const BoolVector* mask = nullptr);

struct KeyMapTape {
  Matrix pre;  // linear variant: X L^T + b before relu
  StandardizeTape standardized;
};

Matrix key_map(const Dataset& d, const ModelParams& p);
Matrix key_map(const Matrix& covariates, const ModelParams& p, KeyMapTape* tape = nullptr,
               const BoolVector* mask = nullptr);
/// Accumulates d(loss)/d(key_linear) into grad.
void key_map_backward(const Matrix& covariates, const ModelParams& p, const KeyMapTape& tape, const Matrix& dkeys,
                      ModelParams& grad, const BoolVector* mask = nullptr);

struct ValueNetTape {
  Matrix pre_w, pre_k;
  StandardizeTape embedded;
  Matrix q, k, v, attn, mixed;
  Vector out;  // O before the sign multiplier
};

/// V = W * relu(O * W). Masked units get V = 0 and are excluded from the attention.
Vector value_net(const Matrix& keys, const Vector& signs, const ModelParams& p, ValueNetTape* tape = nullptr,
                 const BoolVector* mask = nullptr);
/// Accumulates parameter gradients into grad.value_net and returns d(loss)/d(keys).
Matrix value_net_backward(const Matrix& keys, const Vector& signs, const ModelParams& p, const ValueNetTape& tape,
                          const Vector& dvalues, ModelParams& grad, const BoolVector* mask = nullptr);

struct ForwardOutputs {
  Matrix keys;
  GramCache gram;
  Vector values;
  Vector alpha_raw;
  BalancingWeights alpha;
};

/// alpha_raw_j = lambda V_j W_j / h_j, then projected onto A.
ForwardOutputs forward_extract(const Dataset& d, const ModelParams& p);
/// Forward pass on the m-th padded dataset. Vectors keep length N_max with zeros at padded units.
ForwardOutputs forward_extract(const PaddedBatch& b, Eigen::Index m, const ModelParams& p);

// ---- checkpoints ----------------------------------------------------------

inline constexpr int kCheckpointVersion = 1;

nlohmann::json to_json(const ModelParams& p);
/// Throws ValidationError on a version mismatch or malformed content.
ModelParams params_from_json(const nlohmann::json& j);
void save_checkpoint(const ModelParams& p, const std::filesystem::path& path);
ModelParams load_checkpoint(const std::filesystem::path& path);

}  // namespace cina
