#include "cina/model.hpp"

#include "cina/error.hpp"

#include <cmath>
#include <fstream>
#include <limits>

namespace cina {

namespace {

Matrix relu(const Matrix& x) { return x.cwiseMax(0.0); }

Matrix relu_mask(const Matrix& pre) { return (pre.array() > 0.0).cast<double>().matrix(); }

Affine random_affine(Eigen::Index in, Eigen::Index out, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  std::uniform_real_distribution<double> u(-bound, bound);
  Affine a;
  a.weight.resize(out, in);
  a.bias.resize(out);
  for (Eigen::Index i = 0; i < out; ++i)
    for (Eigen::Index j = 0; j < in; ++j) a.weight(i, j) = u(rng);
  for (Eigen::Index i = 0; i < out; ++i) a.bias(i) = u(rng);
  return a;
}

void accumulate(Affine& grad, const Matrix& dout, const Matrix& in) {
  grad.weight.noalias() += dout.transpose() * in;
  grad.bias += dout.colwise().sum().transpose();
}

void check_affine(const Affine& a, Eigen::Index in, Eigen::Index out, const char* name) {
  if (a.weight.rows() != out || a.weight.cols() != in || a.bias.size() != out) {
    throw ValidationError(std::string("model parameter '") + name + "' has shape " +
                          std::to_string(a.weight.rows()) + "x" + std::to_string(a.weight.cols()) + ", expected " +
                          std::to_string(out) + "x" + std::to_string(in));
  }
  if (!a.finite()) throw ValidationError(std::string("model parameter '") + name + "' is not finite");
}

template <class F>
void for_each_tensor(ModelParams& p, F&& f) {
  if (p.key_map == KeyMapKind::linear_relu_standardized) {
    f(p.key_linear.weight);
    f(p.key_linear.bias);
  }
  if (p.value_net) {
    for (Affine* a : {&p.value_net->embed_w, &p.value_net->embed_k, &p.value_net->query, &p.value_net->key,
                      &p.value_net->value, &p.value_net->out_proj}) {
      f(a->weight);
      f(a->bias);
    }
  } else {
    f(p.free_values);
  }
}

Vector sign_vector(const Eigen::VectorXi& t) { return (2 * t.array() - 1).cast<double>().matrix(); }

Eigen::Index real_count(const BoolVector* mask, Eigen::Index n) {
  return mask ? static_cast<Eigen::Index>(mask->count()) : n;
}

bool is_real(const BoolVector* mask, Eigen::Index i) { return !mask || (*mask)(i); }

nlohmann::json affine_to_json(const Affine& a) {
  std::vector<double> w(static_cast<std::size_t>(a.weight.size()));
  for (Eigen::Index i = 0; i < a.weight.rows(); ++i)
    for (Eigen::Index j = 0; j < a.weight.cols(); ++j)
      w[static_cast<std::size_t>(i * a.weight.cols() + j)] = a.weight(i, j);
  return {{"rows", a.weight.rows()},
          {"cols", a.weight.cols()},
          {"weight", w},
          {"bias", std::vector<double>(a.bias.data(), a.bias.data() + a.bias.size())}};
}

Affine affine_from_json(const nlohmann::json& j) {
  const auto rows = j.at("rows").get<Eigen::Index>();
  const auto cols = j.at("cols").get<Eigen::Index>();
  const auto w = j.at("weight").get<std::vector<double>>();
  const auto b = j.at("bias").get<std::vector<double>>();
  if (static_cast<Eigen::Index>(w.size()) != rows * cols || static_cast<Eigen::Index>(b.size()) != rows) {
    throw ValidationError("checkpoint: affine tensor size does not match its shape");
  }
  Affine a;
  a.weight.resize(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index k = 0; k < cols; ++k) a.weight(i, k) = w[static_cast<std::size_t>(i * cols + k)];
  a.bias = Eigen::Map<const Vector>(b.data(), rows);
  return a;
}

}  // namespace

Matrix Affine::apply(const Matrix& in) const {
  Matrix out = in * weight.transpose();
  out.rowwise() += bias.transpose();
  return out;
}

std::string to_string(KeyMapKind k) {
  return k == KeyMapKind::identity_standardized ? "identity_standardized" : "linear_relu_standardized";
}

KeyMapKind key_map_from_string(const std::string& s) {
  if (s == "identity_standardized" || s == "identity") return KeyMapKind::identity_standardized;
  if (s == "linear_relu_standardized" || s == "linear") return KeyMapKind::linear_relu_standardized;
  throw ConfigError("unknown key map '" + s + "'");
}

Eigen::Index ModelParams::key_dim() const {
  return key_map == KeyMapKind::identity_standardized ? input_dim : key_linear.out_dim();
}

void ModelParams::validate() const {
  if (!(lambda > 0.0) || !std::isfinite(lambda)) throw ValidationError("lambda must be positive and finite");
  if (!std::isfinite(beta0)) throw ValidationError("beta0 is not finite");
  if (input_dim < 1) throw ValidationError("input_dim must be positive");
  if (key_map == KeyMapKind::linear_relu_standardized) {
    if (key_linear.out_dim() < 1) throw ValidationError("linear key map needs at least one output");
    check_affine(key_linear, input_dim, key_linear.out_dim(), "key_linear");
  }
  if (value_net) {
    const auto& v = *value_net;
    check_affine(v.embed_w, 1, kEmbedWidth, "embed_w");
    check_affine(v.embed_k, key_dim(), kEmbedWidth, "embed_k");
    check_affine(v.query, kAttentionWidth, kAttentionWidth, "query");
    check_affine(v.key, kAttentionWidth, kAttentionWidth, "key");
    check_affine(v.value, kAttentionWidth, kAttentionWidth, "value");
    check_affine(v.out_proj, kAttentionWidth, 1, "out_proj");
  } else if (!free_values.allFinite()) {
    throw ValidationError("free values are not finite");
  }
}

ModelParams init_single(const Dataset& d, double lambda, std::uint64_t seed, KeyMapKind kind, Eigen::Index key_dim) {
  ModelParams p = init_amortized(d.dim(), lambda, seed, kind, key_dim);
  p.value_net.reset();
  Rng rng(substream_seed(seed, 1));
  std::normal_distribution<double> norm(0.0, 0.1);
  const Vector w = d.signs();
  p.free_values.resize(d.size());
  for (Eigen::Index i = 0; i < d.size(); ++i) p.free_values(i) = std::abs(norm(rng)) * w(i);
  return p;
}

ModelParams init_amortized(Eigen::Index input_dim, double lambda, std::uint64_t seed, KeyMapKind kind,
                           Eigen::Index key_dim) {
  if (input_dim < 1) throw ConfigError("input dimension must be positive");
  Rng rng(substream_seed(seed, 0));
  ModelParams p;
  p.key_map = kind;
  p.input_dim = input_dim;
  p.lambda = lambda;
  if (kind == KeyMapKind::linear_relu_standardized) {
    p.key_linear = random_affine(input_dim, key_dim > 0 ? key_dim : input_dim, rng);
  }
  ValueNetParams v;
  v.embed_w = random_affine(1, kEmbedWidth, rng);
  v.embed_k = random_affine(p.key_dim(), kEmbedWidth, rng);
  v.query = random_affine(kAttentionWidth, kAttentionWidth, rng);
  v.key = random_affine(kAttentionWidth, kAttentionWidth, rng);
  v.value = random_affine(kAttentionWidth, kAttentionWidth, rng);
  v.out_proj = random_affine(kAttentionWidth, 1, rng);
  p.value_net = std::move(v);
  p.validate();
  return p;
}

ModelParams zeros_like(const ModelParams& p) {
  ModelParams z = p;
  for_each_tensor(z, [](auto& t) { t.setZero(); });
  z.beta0 = 0.0;
  return z;
}

Eigen::Index parameter_count(const ModelParams& p) {
  Eigen::Index n = 1;
  for_each_tensor(const_cast<ModelParams&>(p), [&](auto& t) { n += t.size(); });
  return n;
}

Vector flatten(const ModelParams& p) {
  Vector theta(parameter_count(p));
  Eigen::Index at = 0;
  for_each_tensor(const_cast<ModelParams&>(p), [&](auto& t) {
    theta.segment(at, t.size()) = Eigen::Map<const Vector>(t.data(), t.size());
    at += t.size();
  });
  theta(at) = p.beta0;
  return theta;
}

void unflatten(ModelParams& p, const Vector& theta) {
  if (theta.size() != parameter_count(p)) throw ValidationError("unflatten: parameter vector has the wrong length");
  Eigen::Index at = 0;
  for_each_tensor(p, [&](auto& t) {
    Eigen::Map<Vector>(t.data(), t.size()) = theta.segment(at, t.size());
    at += t.size();
  });
  p.beta0 = theta(at);
}

StandardizeTape standardize_forward(const Matrix& x, const BoolVector* mask) {
  const Eigen::Index n = x.rows();
  const double count = static_cast<double>(real_count(mask, n));
  StandardizeTape t;
  t.z = Matrix::Zero(n, x.cols());
  t.inv_sd = Vector::Zero(x.cols());
  for (Eigen::Index c = 0; c < x.cols(); ++c) {
    double mean = 0.0;
    for (Eigen::Index i = 0; i < n; ++i)
      if (is_real(mask, i)) mean += x(i, c);
    mean /= count;
    double var = 0.0;
    for (Eigen::Index i = 0; i < n; ++i)
      if (is_real(mask, i)) var += (x(i, c) - mean) * (x(i, c) - mean);
    var /= count;
    if (var <= 1e-24 * std::max(1.0, mean * mean)) continue;
    t.inv_sd(c) = 1.0 / std::sqrt(var);
    for (Eigen::Index i = 0; i < n; ++i)
      if (is_real(mask, i)) t.z(i, c) = (x(i, c) - mean) * t.inv_sd(c);
  }
  return t;
}

Matrix standardize_backward(const StandardizeTape& t, const Matrix& dz, const BoolVector* mask) {
  const Eigen::Index n = dz.rows();
  const double count = static_cast<double>(real_count(mask, n));
  Matrix dx = Matrix::Zero(n, dz.cols());
  for (Eigen::Index c = 0; c < dz.cols(); ++c) {
    if (t.inv_sd(c) == 0.0) continue;
    double mean_dz = 0.0, mean_dz_z = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      if (!is_real(mask, i)) continue;
      mean_dz += dz(i, c);
      mean_dz_z += dz(i, c) * t.z(i, c);
    }
    mean_dz /= count;
    mean_dz_z /= count;
    for (Eigen::Index i = 0; i < n; ++i)
      if (is_real(mask, i)) dx(i, c) = t.inv_sd(c) * (dz(i, c) - mean_dz - t.z(i, c) * mean_dz_z);
  }
  return dx;
}

Matrix key_map(const Dataset& d, const ModelParams& p) { return key_map(d.covariates, p); }

Matrix key_map(const Matrix& covariates, const ModelParams& p, KeyMapTape* tape, const BoolVector* mask) {
  if (covariates.cols() != p.input_dim) {
    throw ValidationError("covariate dimension " + std::to_string(covariates.cols()) +
                          " does not match the model's input dimension " + std::to_string(p.input_dim));
  }
  KeyMapTape local;
  KeyMapTape& t = tape ? *tape : local;
  if (p.key_map == KeyMapKind::identity_standardized) {
    t.standardized = standardize_forward(covariates, mask);
  } else {
    t.pre = p.key_linear.apply(covariates);
    t.standardized = standardize_forward(relu(t.pre), mask);
  }
  return t.standardized.z;
}

void key_map_backward(const Matrix& covariates, const ModelParams& p, const KeyMapTape& tape, const Matrix& dkeys,
                      ModelParams& grad, const BoolVector* mask) {
  if (p.key_map == KeyMapKind::identity_standardized) return;
  const Matrix dpre = standardize_backward(tape.standardized, dkeys, mask).cwiseProduct(relu_mask(tape.pre));
  accumulate(grad.key_linear, dpre, covariates);
}

Vector value_net(const Matrix& keys, const Vector& signs, const ModelParams& p, ValueNetTape* tape,
                 const BoolVector* mask) {
  if (!p.value_net) throw ValidationError("value_net called on a model without a value network");
  if (signs.size() != keys.rows()) throw ValidationError("value_net: signs and keys disagree on unit count");
  const auto& net = *p.value_net;
  const Eigen::Index n = keys.rows();
  ValueNetTape local;
  ValueNetTape& t = tape ? *tape : local;

  t.pre_w = net.embed_w.apply(signs);
  t.pre_k = net.embed_k.apply(keys);
  Matrix e(n, kAttentionWidth);
  e << relu(t.pre_w), relu(t.pre_k);
  t.embedded = standardize_forward(e, mask);
  const Matrix& z = t.embedded.z;
  t.q = net.query.apply(z);
  t.k = net.key.apply(z);
  t.v = net.value.apply(z);

  const double scale = 1.0 / std::sqrt(static_cast<double>(kAttentionWidth));
  t.attn = (t.q * t.k.transpose()) * scale;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (!is_real(mask, i)) {
      t.attn.row(i).setZero();
      continue;
    }
    double m = -std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < n; ++j)
      if (is_real(mask, j)) m = std::max(m, t.attn(i, j));
    double s = 0.0;
    for (Eigen::Index j = 0; j < n; ++j) {
      t.attn(i, j) = is_real(mask, j) ? std::exp(t.attn(i, j) - m) : 0.0;
      s += t.attn(i, j);
    }
    t.attn.row(i) /= s;
  }
  t.mixed = t.attn * t.v;
  t.out = net.out_proj.apply(t.mixed).col(0);

  Vector values(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    values(i) = is_real(mask, i) ? signs(i) * std::max(0.0, t.out(i) * signs(i)) : 0.0;
  }
  return values;
}

Matrix value_net_backward(const Matrix& keys, const Vector& signs, const ModelParams& p, const ValueNetTape& t,
                          const Vector& dvalues, ModelParams& grad, const BoolVector* mask) {
  const auto& net = *p.value_net;
  auto& g = *grad.value_net;
  const Eigen::Index n = keys.rows();

  Vector dout(n);
  for (Eigen::Index i = 0; i < n; ++i) dout(i) = is_real(mask, i) && t.out(i) * signs(i) > 0.0 ? dvalues(i) : 0.0;
  accumulate(g.out_proj, dout, t.mixed);
  const Matrix dmixed = dout * net.out_proj.weight;

  const Matrix dattn = dmixed * t.v.transpose();
  const Matrix dv = t.attn.transpose() * dmixed;
  const Vector row_dot = (dattn.cwiseProduct(t.attn)).rowwise().sum();
  const double scale = 1.0 / std::sqrt(static_cast<double>(kAttentionWidth));
  const Matrix dscores = (t.attn.array() * (dattn.colwise() - row_dot).array()).matrix() * scale;
  const Matrix dq = dscores * t.k;
  const Matrix dk = dscores.transpose() * t.q;

  const Matrix& z = t.embedded.z;
  accumulate(g.query, dq, z);
  accumulate(g.key, dk, z);
  accumulate(g.value, dv, z);
  const Matrix dz = dq * net.query.weight + dk * net.key.weight + dv * net.value.weight;
  const Matrix de = standardize_backward(t.embedded, dz, mask);

  const Matrix dpre_w = de.leftCols(kEmbedWidth).cwiseProduct(relu_mask(t.pre_w));
  const Matrix dpre_k = de.rightCols(kEmbedWidth).cwiseProduct(relu_mask(t.pre_k));
  accumulate(g.embed_w, dpre_w, signs);
  accumulate(g.embed_k, dpre_k, keys);
  return dpre_k * net.embed_k.weight;
}

ForwardOutputs forward_extract(const Dataset& d, const ModelParams& p) {
  ForwardOutputs f;
  f.keys = key_map(d.covariates, p);
  f.gram = build_gram(f.keys);
  const Vector w = d.signs();
  if (p.amortized()) {
    f.values = value_net(f.keys, w, p);
  } else {
    if (p.free_values.size() != d.size()) {
      throw ValidationError("dataset '" + d.id + "' has " + std::to_string(d.size()) +
                            " units but the single-dataset parameters hold " +
                            std::to_string(p.free_values.size()));
    }
    f.values = p.free_values;
  }
  f.alpha_raw = p.lambda * f.values.cwiseProduct(w).cwiseQuotient(f.gram.normalizers);
  f.alpha = project_onto_A(f.alpha_raw, w);
  return f;
}

ForwardOutputs forward_extract(const PaddedBatch& b, Eigen::Index m, const ModelParams& p) {
  if (!p.amortized()) throw ConfigError("padded forward passes need the amortized value network");
  const BoolVector mask = b.mask.row(m).transpose();
  const Matrix& x = b.covariates[static_cast<std::size_t>(m)];
  const Vector w = sign_vector(b.treatments.row(m).transpose());
  ForwardOutputs f;
  f.keys = key_map(x, p, nullptr, &mask);
  f.gram = build_gram(f.keys, mask);
  f.values = value_net(f.keys, w, p, nullptr, &mask);
  f.alpha_raw = p.lambda * f.values.cwiseProduct(w).cwiseQuotient(f.gram.normalizers);

  const Eigen::Index real = mask.count();
  Vector raw_real(real), w_real(real);
  for (Eigen::Index i = 0, r = 0; i < mask.size(); ++i) {
    if (!mask(i)) continue;
    raw_real(r) = f.alpha_raw(i);
    w_real(r++) = w(i);
  }
  const BalancingWeights projected = project_onto_A(raw_real, w_real);
  f.alpha = projected;
  f.alpha.alpha = Vector::Zero(mask.size());
  for (Eigen::Index i = 0, r = 0; i < mask.size(); ++i)
    if (mask(i)) f.alpha.alpha(i) = projected.alpha(r++);
  return f;
}

nlohmann::json to_json(const ModelParams& p) {
  nlohmann::json j;
  j["format"] = "cina-checkpoint";
  j["version"] = kCheckpointVersion;
  j["key_map"] = to_string(p.key_map);
  j["input_dim"] = p.input_dim;
  j["lambda"] = p.lambda;
  j["beta0"] = p.beta0;
  if (p.key_map == KeyMapKind::linear_relu_standardized) j["key_linear"] = affine_to_json(p.key_linear);
  if (p.value_net) {
    const auto& v = *p.value_net;
    j["value_net"] = {{"embed_w", affine_to_json(v.embed_w)}, {"embed_k", affine_to_json(v.embed_k)},
                      {"query", affine_to_json(v.query)},     {"key", affine_to_json(v.key)},
                      {"value", affine_to_json(v.value)},     {"out_proj", affine_to_json(v.out_proj)}};
  } else {
    j["free_values"] = std::vector<double>(p.free_values.data(), p.free_values.data() + p.free_values.size());
  }
  return j;
}

ModelParams params_from_json(const nlohmann::json& j) {
  if (!j.is_object() || j.value("format", "") != "cina-checkpoint") {
    throw ValidationError("not a cina checkpoint");
  }
  const int version = j.at("version").get<int>();
  if (version != kCheckpointVersion) {
    throw ValidationError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  }
  try {
    ModelParams p;
    p.key_map = key_map_from_string(j.at("key_map").get<std::string>());
    p.input_dim = j.at("input_dim").get<Eigen::Index>();
    p.lambda = j.at("lambda").get<double>();
    p.beta0 = j.at("beta0").get<double>();
    if (p.key_map == KeyMapKind::linear_relu_standardized) p.key_linear = affine_from_json(j.at("key_linear"));
    if (j.contains("value_net")) {
      const auto& v = j.at("value_net");
      p.value_net = ValueNetParams{affine_from_json(v.at("embed_w")), affine_from_json(v.at("embed_k")),
                                   affine_from_json(v.at("query")),   affine_from_json(v.at("key")),
                                   affine_from_json(v.at("value")),   affine_from_json(v.at("out_proj"))};
    } else {
      const auto fv = j.at("free_values").get<std::vector<double>>();
      p.free_values = Eigen::Map<const Vector>(fv.data(), static_cast<Eigen::Index>(fv.size()));
    }
    p.validate();
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed checkpoint: ") + e.what());
  }
}

void save_checkpoint(const ModelParams& p, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out << to_json(p).dump(2) << '\n';
}

ModelParams load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open checkpoint '" + path.string() + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("checkpoint '" + path.string() + "' is not valid JSON: " + e.what());
  }
  return params_from_json(j);
}

}  // namespace cina
