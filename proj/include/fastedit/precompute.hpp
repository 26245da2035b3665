#pragma once

// Reduced precomputation: stream synthetic token sequences through the model,
// harvest one key per token per layer until a budget of
// P' = d_m * d_k keys is met, and accumulate C0 = sum k k^T per layer.

#include <algorithm>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "fastedit/binary_io.hpp"
#include "fastedit/errors.hpp"
#include "fastedit/linalg.hpp"
#include "fastedit/random.hpp"
#include "fastedit/toy_model.hpp"

namespace fastedit {

inline constexpr std::uint32_t kStoreFormatVersion = 1;
inline constexpr char kStoreMagic[] = "EDKC";

/// A dynamic multiplier d_m, or FULL (use the whole configured stream).
class DynamicMultiplier {
 public:
  static DynamicMultiplier full() { return DynamicMultiplier(); }
  static DynamicMultiplier of(std::uint32_t value) {
    if (value < 1) reject("dynamic multiplier must be at least 1");
    DynamicMultiplier m;
    m.value_ = value;
    return m;
  }

  static DynamicMultiplier parse(const std::string& text) {
    if (text == "FULL" || text == "full" || text == "inf") return full();
    try {
      std::size_t used = 0;
      const long v = std::stol(text, &used);
      if (used == text.size() && v >= 1 && v <= 0xffffffffL) return of(static_cast<std::uint32_t>(v));
    } catch (const std::exception&) {
    }
    reject("invalid dynamic multiplier '" + text + "' (expected a positive integer or FULL)");
  }

  bool is_full() const noexcept { return !value_.has_value(); }
  std::uint32_t value() const {
    if (!value_) reject("FULL multiplier has no numeric value");
    return *value_;
  }

  std::string to_string() const { return value_ ? std::to_string(*value_) : "FULL"; }

  // Finite multipliers ascend; FULL sorts last.
  friend bool operator<(const DynamicMultiplier& a, const DynamicMultiplier& b) {
    if (a.is_full()) return false;
    if (b.is_full()) return true;
    return *a.value_ < *b.value_;
  }
  bool operator==(const DynamicMultiplier&) const = default;

 private:
  DynamicMultiplier() = default;
  std::optional<std::uint32_t> value_;
};

inline std::uint64_t budget_from_multiplier(std::uint64_t d_m, std::uint64_t d_k) {
  if (d_m < 1 || d_k < 1) reject("budget_from_multiplier: d_m and d_k must be positive");
  return d_m * d_k;
}

struct TokenStreamConfig {
  std::uint64_t seed = 0;
  std::size_t sequence_length = 32;
  std::size_t num_sequences = 512;

  std::uint64_t total_tokens() const { return static_cast<std::uint64_t>(sequence_length) * num_sequences; }

  void validate(const ToyModel& model) const {
    if (sequence_length < 1) reject("token stream: sequence_length must be positive");
    if (sequence_length > model.config().max_sequence) reject("token stream: sequence_length exceeds max_sequence");
    if (num_sequences < 1) reject("token stream: num_sequences must be positive");
  }
};

/// Sequence i of the stream, uniform over the vocabulary. Each sequence has
/// its own derived seed so shards can generate independently.
inline TokenSeq stream_sequence(const TokenStreamConfig& stream, std::size_t vocab_size, std::size_t index) {
  Rng rng(derive_seed(stream.seed, index));
  TokenSeq seq(stream.sequence_length);
  for (auto& t : seq) t = static_cast<Token>(rng.below(vocab_size));
  return seq;
}

struct PrecomputeBudget {
  DynamicMultiplier multiplier = DynamicMultiplier::full();
  std::size_t d_k = 0;
  std::uint64_t token_budget = 0;

  static PrecomputeBudget make(DynamicMultiplier m, std::size_t d_k, const TokenStreamConfig& stream) {
    PrecomputeBudget b;
    b.multiplier = m;
    b.d_k = d_k;
    b.token_budget = m.is_full() ? stream.total_tokens() : budget_from_multiplier(m.value(), d_k);
    return b;
  }
};

class InsufficientStreamError : public Error {
 public:
  InsufficientStreamError(std::uint64_t needed, std::uint64_t available)
      : Error(ErrorKind::kInsufficientStream,
              "token stream exhausted: budget " + std::to_string(needed) + " keys, stream provides " +
                  std::to_string(available)),
        available_(available) {}

  std::uint64_t tokens_obtained() const noexcept { return available_; }

 private:
  std::uint64_t available_;
};

struct CovarianceStore {
  std::uint32_t format_version = kStoreFormatVersion;
  std::vector<std::size_t> layers;
  std::vector<CovarianceAccumulator> accumulators;  // parallel to layers
  std::uint32_t model_checksum = 0;
  std::uint64_t stream_seed = 0;
  std::uint64_t sequence_length = 0;
  DynamicMultiplier multiplier = DynamicMultiplier::full();
  std::uint64_t token_budget = 0;

  std::size_t d_k() const { return accumulators.empty() ? 0 : accumulators.front().dim(); }
  std::uint64_t sample_count() const { return accumulators.empty() ? 0 : accumulators.front().sample_count(); }

  const CovarianceAccumulator& for_layer(std::size_t layer) const {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      if (layers[i] == layer) return accumulators[i];
    }
    reject("covariance store has no statistics for layer " + std::to_string(layer));
  }

  /// Fails loudly when the store was harvested from a different model.
  void require_model(const ToyModel& model) const {
    const auto expected = model_checksum;
    const auto actual = fastedit::model_checksum(model);
    if (expected != actual) {
      throw Error(ErrorKind::kProvenance, "covariance store was built for model checksum " + std::to_string(expected) +
                                              " but the supplied model has checksum " + std::to_string(actual));
    }
  }

  bool operator==(const CovarianceStore&) const = default;
};

/// Streams keys through the model until the budget is met. With workers > 1
/// sequences are dealt round-robin to private accumulators and merged; the
/// fixed-point accumulator makes the result identical for any worker count.
inline CovarianceStore harvest_keys(const ToyModel& model, const TokenStreamConfig& stream,
                                    std::vector<std::size_t> layers, const PrecomputeBudget& budget,
                                    unsigned workers = 1) {
  stream.validate(model);
  if (layers.empty()) reject("harvest_keys: no layers requested");
  std::sort(layers.begin(), layers.end());
  layers.erase(std::unique(layers.begin(), layers.end()), layers.end());
  if (layers.back() >= model.num_layers()) reject("harvest_keys: layer index out of range");
  if (budget.d_k != model.key_dim()) reject("harvest_keys: budget d_k does not match the model");
  if (budget.token_budget < 1) reject("harvest_keys: budget must be positive");
  if (budget.token_budget > stream.total_tokens()) {
    throw InsufficientStreamError(budget.token_budget, stream.total_tokens());
  }
  workers = std::max(1u, workers);

  const std::uint64_t len = stream.sequence_length;
  const std::size_t num_seq = static_cast<std::size_t>((budget.token_budget + len - 1) / len);
  const std::size_t deepest = layers.back();

  auto run_shard = [&](unsigned shard, std::vector<CovarianceAccumulator>& accs) {
    accs.assign(layers.size(), CovarianceAccumulator(model.key_dim()));
    for (std::size_t s = shard; s < num_seq; s += workers) {
      const TokenSeq seq = stream_sequence(stream, model.vocab_size(), s);
      const std::uint64_t start = static_cast<std::uint64_t>(s) * len;
      const auto take = static_cast<Eigen::Index>(std::min<std::uint64_t>(len, budget.token_budget - start));
      const ForwardTrace trace = forward(model, seq, nullptr, deepest);
      for (std::size_t li = 0; li < layers.size(); ++li) {
        const Matrix& keys = trace.keys[layers[li]];
        for (Eigen::Index t = 0; t < take; ++t) {
          accs[li].add(std::span<const double>(keys.row(t).data(), static_cast<std::size_t>(keys.cols())));
        }
      }
    }
  };

  std::vector<std::vector<CovarianceAccumulator>> partial(workers);
  if (workers == 1) {
    run_shard(0, partial[0]);
  } else {
    std::vector<std::exception_ptr> failures(workers);
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (unsigned w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        try {
          run_shard(w, partial[w]);
        } catch (...) {
          failures[w] = std::current_exception();
        }
      });
    }
    for (auto& t : pool) t.join();
    for (auto& f : failures) {
      if (f) std::rethrow_exception(f);
    }
  }

  CovarianceStore store;
  store.layers = layers;
  store.accumulators = std::move(partial[0]);
  for (unsigned w = 1; w < workers; ++w) {
    for (std::size_t li = 0; li < layers.size(); ++li) store.accumulators[li].merge_from(partial[w][li]);
  }
  // Stored statistics are the rounded double view, which is what the file
  // format holds.
  for (auto& acc : store.accumulators) acc = acc.rounded();
  store.model_checksum = model_checksum(model);
  store.stream_seed = stream.seed;
  store.sequence_length = stream.sequence_length;
  store.multiplier = budget.multiplier;
  store.token_budget = budget.token_budget;
  return store;
}

// ---- EDKC store format ------------------------------------------------------
//
//   "EDKC" | u32 version | u32 layer count | u64 d_k | u64 sample count |
//   provenance: u32 model checksum, u64 stream seed, u64 sequence length,
//               u32 multiplier (0 = FULL), u64 token budget,
//               u64 layer index per layer |
//   per layer: packed lower triangle (row-major, j <= i) of f64 |
//   u32 crc32 of all preceding bytes

inline std::vector<std::uint8_t> serialize_store(const CovarianceStore& store) {
  if (store.layers.size() != store.accumulators.size()) reject("save_store: layers and accumulators disagree");
  for (const auto& acc : store.accumulators) {
    if (acc.dim() != store.d_k() || acc.sample_count() != store.sample_count()) {
      reject("save_store: layer accumulators must share dimension and sample count");
    }
  }
  io::ByteWriter w;
  w.put_magic(kStoreMagic);
  w.put_u32(kStoreFormatVersion);
  w.put_u32(static_cast<std::uint32_t>(store.layers.size()));
  w.put_u64(store.d_k());
  w.put_u64(store.sample_count());
  w.put_u32(store.model_checksum);
  w.put_u64(store.stream_seed);
  w.put_u64(store.sequence_length);
  w.put_u32(store.multiplier.is_full() ? 0u : store.multiplier.value());
  w.put_u64(store.token_budget);
  for (auto l : store.layers) w.put_u64(l);
  for (const auto& acc : store.accumulators) w.put_f64s(acc.packed_lower());
  w.seal();
  return w.release();
}

inline CovarianceStore deserialize_store(std::span<const std::uint8_t> bytes) {
  io::ByteReader r(bytes);
  if (r.get_magic(4) != kStoreMagic) throw Error(ErrorKind::kCorruption, "covariance store: bad magic");
  const std::uint32_t version = r.get_u32();
  if (version != kStoreFormatVersion) {
    throw Error(ErrorKind::kIncompatibleVersion,
                "covariance store: unsupported format version " + std::to_string(version));
  }
  r.verify_trailer("covariance store");

  CovarianceStore store;
  store.format_version = version;
  const std::uint32_t num_layers = r.get_u32();
  const std::uint64_t d_k = r.get_u64();
  const std::uint64_t count = r.get_u64();
  store.model_checksum = r.get_u32();
  store.stream_seed = r.get_u64();
  store.sequence_length = r.get_u64();
  const std::uint32_t mult = r.get_u32();
  store.multiplier = mult == 0 ? DynamicMultiplier::full() : DynamicMultiplier::of(mult);
  store.token_budget = r.get_u64();
  if (d_k == 0 || d_k > (1u << 16)) throw Error(ErrorKind::kCorruption, "covariance store: implausible d_k");
  for (std::uint32_t i = 0; i < num_layers; ++i) store.layers.push_back(static_cast<std::size_t>(r.get_u64()));

  const std::size_t packed = static_cast<std::size_t>(d_k * (d_k + 1) / 2);
  if (r.remaining() != static_cast<std::size_t>(num_layers) * packed * 8 + 4) {
    throw Error(ErrorKind::kCorruption, "covariance store: payload size does not match header");
  }
  std::vector<double> buf(packed);
  for (std::uint32_t i = 0; i < num_layers; ++i) {
    for (auto& v : buf) v = r.get_f64();
    try {
      store.accumulators.push_back(CovarianceAccumulator::from_packed_lower(d_k, buf, count));
    } catch (const Error& e) {
      throw Error(ErrorKind::kCorruption, std::string("covariance store: ") + e.what());
    }
  }
  return store;
}

inline void save_store(const CovarianceStore& store, const std::filesystem::path& path) {
  io::write_file_atomic(path, serialize_store(store));
}

inline CovarianceStore load_store(const std::filesystem::path& path) {
  return deserialize_store(io::read_file(path));
}

}  // namespace fastedit
