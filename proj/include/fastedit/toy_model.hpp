#pragma once

// A small deterministic transformer-shaped network used as the edit target.
//
// Each layer replaces attention with a fixed causal mixing: position t sees an
// exponentially decaying average of positions <= t, projected by a learned
// d x d matrix. The MLP is up-projection (d -> d_k), an erf-based GELU, and
// the editable down-projection W (d x d_k). The GELU output at a position is
// that position's key vector; W times the key is the MLP output (the value).
//
//   h_0[t]      = E[token_t]
//   x_l         = h_l + (A h_l) M_l^T
//   k_l         = gelu(x_l U_l^T)
//   h_{l+1}     = x_l + k_l W_l^T
//   logits      = h_L E_out^T

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fastedit/binary_io.hpp"
#include "fastedit/errors.hpp"
#include "fastedit/linalg.hpp"
#include "fastedit/random.hpp"

namespace fastedit {

using Token = std::uint32_t;
using TokenSeq = std::vector<Token>;

inline constexpr std::uint32_t kCheckpointFormatVersion = 1;
inline constexpr char kCheckpointMagic[] = "EDKT";

struct ToyModelConfig {
  std::size_t vocab_size = 257;
  std::size_t hidden_dim = 64;
  std::size_t mlp_dim = 256;
  std::size_t num_layers = 4;
  std::size_t max_sequence = 32;
  std::uint64_t seed = 0;

  /// Ties mlp_dim to hidden_dim, the usual transformer ratio.
  static ToyModelConfig with_hidden(std::size_t d, std::uint64_t seed) {
    ToyModelConfig c;
    c.hidden_dim = d;
    c.mlp_dim = 4 * d;
    c.seed = seed;
    return c;
  }

  void validate() const {
    if (vocab_size < 2) reject("ToyModelConfig: vocab_size must be at least 2");
    if (hidden_dim < 1) reject("ToyModelConfig: hidden_dim must be positive");
    if (mlp_dim != 4 * hidden_dim) reject("ToyModelConfig: mlp_dim must equal 4 * hidden_dim");
    if (num_layers < 1) reject("ToyModelConfig: num_layers must be positive");
    if (max_sequence < 1) reject("ToyModelConfig: max_sequence must be positive");
    if (vocab_size > (1ull << 31)) reject("ToyModelConfig: vocab_size too large");
  }

  bool operator==(const ToyModelConfig&) const = default;
};

struct ToyLayer {
  Matrix mix;   // d x d
  Matrix up;    // d_k x d
  Matrix down;  // d x d_k, the editable matrix
};

class ToyModel {
 public:
  static constexpr double kMixingDecay = 0.7;

  ToyModel(ToyModelConfig config, Matrix embedding, std::vector<ToyLayer> layers, Matrix unembedding)
      : config_(config),
        embedding_(std::move(embedding)),
        layers_(std::move(layers)),
        unembedding_(std::move(unembedding)) {
    config_.validate();
    const auto v = static_cast<Eigen::Index>(config_.vocab_size);
    const auto d = static_cast<Eigen::Index>(config_.hidden_dim);
    const auto dk = static_cast<Eigen::Index>(config_.mlp_dim);
    auto shape = [](const Matrix& m, Eigen::Index r, Eigen::Index c, const char* what) {
      if (m.rows() != r || m.cols() != c) reject(std::string("ToyModel: bad shape for ") + what);
      if (!m.allFinite()) reject(std::string("ToyModel: non-finite parameter in ") + what);
    };
    shape(embedding_, v, d, "embedding");
    shape(unembedding_, v, d, "unembedding");
    if (layers_.size() != config_.num_layers) reject("ToyModel: layer count does not match config");
    for (const auto& l : layers_) {
      shape(l.mix, d, d, "mix");
      shape(l.up, dk, d, "up");
      shape(l.down, d, dk, "down");
    }
  }

  const ToyModelConfig& config() const noexcept { return config_; }
  const Matrix& embedding() const noexcept { return embedding_; }
  const Matrix& unembedding() const noexcept { return unembedding_; }
  const std::vector<ToyLayer>& layers() const noexcept { return layers_; }
  const ToyLayer& layer(std::size_t l) const {
    if (l >= layers_.size()) reject("ToyModel: layer index out of range");
    return layers_[l];
  }
  const Matrix& down(std::size_t l) const { return layer(l).down; }

  std::size_t hidden_dim() const noexcept { return config_.hidden_dim; }
  std::size_t key_dim() const noexcept { return config_.mlp_dim; }
  std::size_t num_layers() const noexcept { return config_.num_layers; }
  std::size_t vocab_size() const noexcept { return config_.vocab_size; }

  /// Copy with one layer's down-projection replaced.
  ToyModel with_down(std::size_t l, Matrix w) const {
    ToyModel copy = *this;
    if (l >= copy.layers_.size()) reject("apply_edit: layer index out of range");
    if (w.rows() != copy.layers_[l].down.rows() || w.cols() != copy.layers_[l].down.cols()) {
      reject("apply_edit: replacement has wrong shape");
    }
    copy.layers_[l].down = std::move(w);
    return copy;
  }

 private:
  ToyModelConfig config_;
  Matrix embedding_;
  std::vector<ToyLayer> layers_;
  Matrix unembedding_;
};

inline ToyModel build_toy_model(const ToyModelConfig& config) {
  config.validate();
  Rng rng(config.seed);
  const auto v = static_cast<Eigen::Index>(config.vocab_size);
  const auto d = static_cast<Eigen::Index>(config.hidden_dim);
  const auto dk = static_cast<Eigen::Index>(config.mlp_dim);
  auto draw = [&rng](Eigen::Index rows, Eigen::Index cols, double scale) {
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i) {
      for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = scale * rng.normal();
    }
    return m;
  };
  const double sd = std::sqrt(static_cast<double>(d));
  const double sdk = std::sqrt(static_cast<double>(dk));

  Matrix embedding = draw(v, d, 1.0);
  std::vector<ToyLayer> layers;
  layers.reserve(config.num_layers);
  for (std::size_t l = 0; l < config.num_layers; ++l) {
    ToyLayer layer;
    layer.mix = draw(d, d, 1.0 / sd);
    layer.up = draw(dk, d, 1.0 / sd);
    layer.down = draw(d, dk, 1.0 / sdk);
    layers.push_back(std::move(layer));
  }
  Matrix unembedding = draw(v, d, 2.0 / sd);
  return ToyModel(config, std::move(embedding), std::move(layers), std::move(unembedding));
}

inline ToyModel apply_edit(const ToyModel& model, std::size_t layer, const Matrix& delta) {
  const Matrix& w = model.down(layer);
  if (delta.rows() != w.rows() || delta.cols() != w.cols()) {
    reject("apply_edit: delta must be " + std::to_string(w.rows()) + "x" + std::to_string(w.cols()));
  }
  return model.with_down(layer, w + delta);
}

namespace detail {

inline double gelu(double u) { return 0.5 * u * (1.0 + std::erf(u * std::numbers::sqrt2 / 2.0)); }

inline double gelu_grad(double u) {
  const double cdf = 0.5 * (1.0 + std::erf(u * std::numbers::sqrt2 / 2.0));
  const double pdf = std::exp(-0.5 * u * u) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + u * pdf;
}

/// Row-normalized lower-triangular weights exp(-decay * (t - s)).
inline Matrix causal_mixing(std::size_t length, double decay) {
  const auto n = static_cast<Eigen::Index>(length);
  Matrix a = Matrix::Zero(n, n);
  for (Eigen::Index t = 0; t < n; ++t) {
    double z = 0.0;
    for (Eigen::Index s = 0; s <= t; ++s) {
      a(t, s) = std::exp(-decay * static_cast<double>(t - s));
      z += a(t, s);
    }
    a.row(t) /= z;
  }
  return a;
}

}  // namespace detail

/// Substitutes a fixed vector for one layer's MLP output at one position.
struct MlpOverride {
  std::size_t layer = 0;
  std::size_t position = 0;
  Vector value;
};

struct ForwardTrace {
  Matrix logits;                  // T x V; empty when the pass stopped early
  std::vector<Matrix> keys;       // per layer, T x d_k
  std::vector<Matrix> residual;   // h_l, T x d; residual[L] is the final stream
  std::vector<Matrix> mixed;      // x_l, T x d
  std::vector<Matrix> preact;     // x_l U_l^T, T x d_k

  std::size_t length() const { return residual.empty() ? 0 : static_cast<std::size_t>(residual[0].rows()); }
};

inline void validate_tokens(const ToyModel& model, std::span<const Token> tokens) {
  if (tokens.empty()) reject("forward: empty token sequence");
  if (tokens.size() > model.config().max_sequence) reject("forward: sequence longer than max_sequence");
  for (Token t : tokens) {
    if (t >= model.vocab_size()) reject("forward: token id " + std::to_string(t) + " out of range");
  }
}

/// Runs layers [0, stop_after_layer] (all layers and logits by default).
inline ForwardTrace forward(const ToyModel& model, std::span<const Token> tokens,
                            const MlpOverride* override_output = nullptr,
                            std::optional<std::size_t> stop_after_layer = std::nullopt) {
  validate_tokens(model, tokens);
  const std::size_t num_layers = model.num_layers();
  const std::size_t last = stop_after_layer.value_or(num_layers - 1);
  if (last >= num_layers) reject("forward: stop layer out of range");
  if (override_output) {
    if (override_output->layer >= num_layers) reject("forward: override layer out of range");
    if (override_output->position >= tokens.size()) reject("forward: override position out of range");
    if (override_output->value.size() != static_cast<Eigen::Index>(model.hidden_dim())) {
      reject("forward: override value has wrong length");
    }
  }

  const auto n = static_cast<Eigen::Index>(tokens.size());
  const Matrix mixing = detail::causal_mixing(tokens.size(), ToyModel::kMixingDecay);

  ForwardTrace trace;
  Matrix h(n, static_cast<Eigen::Index>(model.hidden_dim()));
  for (Eigen::Index t = 0; t < n; ++t) h.row(t) = model.embedding().row(tokens[static_cast<std::size_t>(t)]);
  trace.residual.push_back(h);

  for (std::size_t l = 0; l <= last; ++l) {
    const ToyLayer& layer = model.layers()[l];
    Matrix x = h + (mixing * h) * layer.mix.transpose();
    Matrix u = x * layer.up.transpose();
    Matrix k = u.unaryExpr(&detail::gelu);
    Matrix m = k * layer.down.transpose();
    if (override_output && override_output->layer == l) {
      m.row(static_cast<Eigen::Index>(override_output->position)) = override_output->value.transpose();
    }
    h = x + m;
    trace.mixed.push_back(std::move(x));
    trace.preact.push_back(std::move(u));
    trace.keys.push_back(std::move(k));
    trace.residual.push_back(h);
  }
  if (last == num_layers - 1) trace.logits = h * model.unembedding().transpose();
  return trace;
}

inline Vector log_softmax(const Vector& logits) {
  const double mx = logits.maxCoeff();
  const double lse = mx + std::log((logits.array() - mx).exp().sum());
  return logits.array() - lse;
}

/// Log-probabilities of the next token after the final prompt position.
inline Vector next_token_log_probs(const ToyModel& model, std::span<const Token> prompt) {
  const ForwardTrace trace = forward(model, prompt);
  return log_softmax(trace.logits.row(trace.logits.rows() - 1).transpose());
}

inline Vector extract_key(const ToyModel& model, std::size_t layer, std::span<const Token> tokens,
                          std::size_t position) {
  if (layer >= model.num_layers()) reject("extract_key: layer index out of range");
  if (position >= tokens.size()) reject("extract_key: position out of range");
  const ForwardTrace trace = forward(model, tokens, nullptr, layer);
  return trace.keys[layer].row(static_cast<Eigen::Index>(position)).transpose();
}

/// The layer's MLP output at a position in the unedited forward pass.
inline Vector mlp_output(const ToyModel& model, std::size_t layer, std::span<const Token> tokens,
                         std::size_t position) {
  return model.down(layer) * extract_key(model, layer, tokens, position);
}

struct ValueGradient {
  double log_prob = 0.0;  // log P(target) at the final position
  Vector gradient;        // d log_prob / d value
};

/// Target log-probability and its gradient with respect to the MLP output
/// `value` substituted at (layer, position). Backpropagates through every
/// downstream layer's mixing and MLP.
inline ValueGradient value_gradient(const ToyModel& model, std::size_t layer, std::span<const Token> tokens,
                                    std::size_t position, const Vector& value, Token target) {
  if (target >= model.vocab_size()) reject("value_gradient: target token out of range");
  const MlpOverride ov{layer, position, value};
  const ForwardTrace trace = forward(model, tokens, &ov);
  const auto n = static_cast<Eigen::Index>(tokens.size());
  const Vector final_logits = trace.logits.row(n - 1).transpose();
  const Vector logp = log_softmax(final_logits);

  ValueGradient out;
  out.log_prob = logp[target];

  // d log p_target / d logits = onehot - softmax.
  Vector dlogits = -logp.array().exp().matrix();
  dlogits[target] += 1.0;

  Matrix dh = Matrix::Zero(n, static_cast<Eigen::Index>(model.hidden_dim()));
  dh.row(n - 1) = (model.unembedding().transpose() * dlogits).transpose();

  const Matrix mixing = detail::causal_mixing(tokens.size(), ToyModel::kMixingDecay);
  for (std::size_t l = model.num_layers() - 1; l > layer; --l) {
    const ToyLayer& lay = model.layers()[l];
    // h_{l+1} = x + gelu(x U^T) W^T
    Matrix dk = dh * lay.down;
    Matrix du = dk.cwiseProduct(trace.preact[l].unaryExpr(&detail::gelu_grad));
    Matrix dx = dh + du * lay.up;
    // x = h + A h M^T
    dh = dx + mixing.transpose() * (dx * lay.mix);
  }
  // h_{layer+1}[position] = x[position] + value.
  out.gradient = dh.row(static_cast<Eigen::Index>(position)).transpose();
  return out;
}

struct ValueSolution {
  Vector value;
  double initial_log_prob = 0.0;
  double final_log_prob = 0.0;
};

/// Plain gradient ascent on log P(target), starting from the layer's current
/// MLP output at the position, for a fixed number of steps.
inline ValueSolution solve_value(const ToyModel& model, std::size_t layer, std::span<const Token> tokens,
                                 std::size_t position, Token target, std::size_t steps, double step_size) {
  if (steps < 1) reject("solve_value: steps must be at least 1");
  if (!(step_size > 0.0) || !std::isfinite(step_size)) reject("solve_value: step_size must be positive");
  ValueSolution sol;
  sol.value = mlp_output(model, layer, tokens, position);
  for (std::size_t i = 0; i < steps; ++i) {
    const ValueGradient g = value_gradient(model, layer, tokens, position, sol.value, target);
    if (i == 0) sol.initial_log_prob = g.log_prob;
    if (!g.gradient.allFinite() || !std::isfinite(g.log_prob)) {
      throw Error(ErrorKind::kOptimizationFailure, "solve_value: non-finite gradient at step " + std::to_string(i));
    }
    sol.value += step_size * g.gradient;
  }
  sol.final_log_prob = value_gradient(model, layer, tokens, position, sol.value, target).log_prob;
  if (!sol.value.allFinite() || !std::isfinite(sol.final_log_prob)) {
    throw Error(ErrorKind::kOptimizationFailure, "solve_value: diverged");
  }
  return sol;
}

// ---- EDKT checkpoint format -------------------------------------------------
//
//   "EDKT" | u32 version | u64 vocab | u64 hidden | u64 mlp | u64 layers |
//   u64 max_sequence | u64 seed | f64 mixing decay |
//   f64 blocks, row-major: embedding, then per layer mix, up, down,
//   then unembedding | u32 crc32 of all preceding bytes

namespace detail {

inline void put_matrix(io::ByteWriter& w, const Matrix& m) {
  w.put_f64s(std::span<const double>(m.data(), static_cast<std::size_t>(m.size())));
}

inline Matrix get_matrix(io::ByteReader& r, std::size_t rows, std::size_t cols) {
  if (r.remaining() / 8 < rows * cols) throw Error(ErrorKind::kCorruption, "checkpoint: truncated parameter block");
  Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = r.get_f64();
  return m;
}

}  // namespace detail

inline std::vector<std::uint8_t> serialize_model(const ToyModel& model) {
  const auto& c = model.config();
  io::ByteWriter w;
  w.put_magic(kCheckpointMagic);
  w.put_u32(kCheckpointFormatVersion);
  w.put_u64(c.vocab_size);
  w.put_u64(c.hidden_dim);
  w.put_u64(c.mlp_dim);
  w.put_u64(c.num_layers);
  w.put_u64(c.max_sequence);
  w.put_u64(c.seed);
  w.put_f64(ToyModel::kMixingDecay);
  detail::put_matrix(w, model.embedding());
  for (const auto& l : model.layers()) {
    detail::put_matrix(w, l.mix);
    detail::put_matrix(w, l.up);
    detail::put_matrix(w, l.down);
  }
  detail::put_matrix(w, model.unembedding());
  w.seal();
  return w.release();
}

/// CRC-32 of the serialized checkpoint body; identifies a parameter set.
inline std::uint32_t model_checksum(const ToyModel& model) {
  const auto bytes = serialize_model(model);
  io::ByteReader tail{std::span<const std::uint8_t>(bytes).last(4)};
  return tail.get_u32();
}

inline ToyModel deserialize_model(std::span<const std::uint8_t> bytes) {
  io::ByteReader r(bytes);
  if (r.get_magic(4) != kCheckpointMagic) throw Error(ErrorKind::kCorruption, "checkpoint: bad magic");
  const std::uint32_t version = r.get_u32();
  if (version != kCheckpointFormatVersion) {
    throw Error(ErrorKind::kIncompatibleVersion, "checkpoint: unsupported format version " + std::to_string(version));
  }
  r.verify_trailer("checkpoint");
  ToyModelConfig c;
  c.vocab_size = r.get_u64();
  c.hidden_dim = r.get_u64();
  c.mlp_dim = r.get_u64();
  c.num_layers = r.get_u64();
  c.max_sequence = r.get_u64();
  c.seed = r.get_u64();
  try {
    c.validate();
  } catch (const Error& e) {
    throw Error(ErrorKind::kCorruption, std::string("checkpoint: invalid config block: ") + e.what());
  }
  if (r.get_f64() != ToyModel::kMixingDecay) throw Error(ErrorKind::kIncompatibleVersion, "checkpoint: mixing decay differs");
  Matrix embedding = detail::get_matrix(r, c.vocab_size, c.hidden_dim);
  std::vector<ToyLayer> layers;
  for (std::size_t l = 0; l < c.num_layers; ++l) {
    ToyLayer layer;
    layer.mix = detail::get_matrix(r, c.hidden_dim, c.hidden_dim);
    layer.up = detail::get_matrix(r, c.mlp_dim, c.hidden_dim);
    layer.down = detail::get_matrix(r, c.hidden_dim, c.mlp_dim);
    layers.push_back(std::move(layer));
  }
  Matrix unembedding = detail::get_matrix(r, c.vocab_size, c.hidden_dim);
  if (r.remaining() != 4) throw Error(ErrorKind::kCorruption, "checkpoint: trailing bytes");
  return ToyModel(c, std::move(embedding), std::move(layers), std::move(unembedding));
}

inline void save_model(const ToyModel& model, const std::filesystem::path& path) {
  io::write_file_atomic(path, serialize_model(model));
}

inline ToyModel load_model(const std::filesystem::path& path) { return deserialize_model(io::read_file(path)); }

}  // namespace fastedit
