#pragma once

// JSON run configuration. Every field is required and unknown fields are
// rejected, so one file fully records an experiment.

#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "fastedit/errors.hpp"
#include "fastedit/eval.hpp"
#include "fastedit/precompute.hpp"
#include "fastedit/solvers.hpp"
#include "fastedit/toy_model.hpp"

namespace fastedit {

struct RunConfig {
  ToyModelConfig model;
  TokenStreamConfig stream;
  std::vector<std::size_t> layers;
  unsigned workers = 1;
  std::vector<DynamicMultiplier> multipliers;
  BatchSchedule schedule;
  std::vector<Method> methods;
  HarnessConfig harness;
  FactSuiteConfig facts;
  std::string output_dir;

  void validate() const;
};

namespace detail {

class ConfigObject {
 public:
  ConfigObject(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) fail("expected an object");
  }

  const nlohmann::json& at(const std::string& key) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) fail("missing field '" + key + "'");
    return *it;
  }

  ConfigObject object(const std::string& key) { return ConfigObject(at(key), path_ + "." + key); }

  template <class T>
  T get(const std::string& key) {
    const auto& v = at(key);
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) fail("field '" + key + "' must be a boolean");
      } else if constexpr (std::is_unsigned_v<T>) {
        if (!v.is_number_unsigned()) fail("field '" + key + "' must be a non-negative integer");
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!v.is_number()) fail("field '" + key + "' must be a number");
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!v.is_string()) fail("field '" + key + "' must be a string");
      }
      return v.get<T>();
    } catch (const nlohmann::json::exception& e) {
      fail("field '" + key + "': " + e.what());
    }
  }

  /// Call after reading all fields.
  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) fail("unknown field '" + it.key() + "'");
    }
  }

  [[noreturn]] void fail(const std::string& msg) const { throw Error(ErrorKind::kConfig, "config " + path_ + ": " + msg); }

 private:
  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline DynamicMultiplier multiplier_from_json(const nlohmann::json& v) {
  if (v.is_string()) return DynamicMultiplier::parse(v.get<std::string>());
  if (v.is_number_unsigned() && v.get<std::uint64_t>() <= 0xffffffffull) {
    return DynamicMultiplier::of(v.get<std::uint32_t>());
  }
  throw Error(ErrorKind::kConfig, "config: multiplier must be a positive integer or \"FULL\"");
}

}  // namespace detail

inline void RunConfig::validate() const {
  auto wrap = [](auto&& fn) {
    try {
      fn();
    } catch (const Error& e) {
      if (e.kind() == ErrorKind::kRejectedInput) throw Error(ErrorKind::kConfig, e.what());
      throw;
    }
  };
  wrap([&] { model.validate(); });
  if (stream.sequence_length < 1 || stream.sequence_length > model.max_sequence || stream.num_sequences < 1) {
    throw Error(ErrorKind::kConfig, "config: stream length must be in [1, max_sequence] with at least one sequence");
  }
  if (layers.empty()) throw Error(ErrorKind::kConfig, "config: precompute.layers is empty");
  std::set<std::size_t> uniq(layers.begin(), layers.end());
  if (uniq.size() != layers.size()) throw Error(ErrorKind::kConfig, "config: duplicate precompute layer");
  for (auto l : layers) {
    if (l >= model.num_layers) throw Error(ErrorKind::kConfig, "config: precompute layer out of range");
  }
  if (!uniq.count(harness.edit_layer)) throw Error(ErrorKind::kConfig, "config: edit layer is not precomputed");
  if (workers < 1) throw Error(ErrorKind::kConfig, "config: workers must be at least 1");
  if (multipliers.empty()) throw Error(ErrorKind::kConfig, "config: multipliers is empty");
  for (std::size_t i = 0; i < multipliers.size(); ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      if (multipliers[i] == multipliers[j]) throw Error(ErrorKind::kConfig, "config: duplicate multiplier");
    }
  }
  wrap([&] { schedule.validate(); });
  if (methods.empty()) throw Error(ErrorKind::kConfig, "config: methods is empty");
  if (!(harness.lambda > 0.0)) throw Error(ErrorKind::kConfig, "config: solver.lambda must be positive");
  if (!harness.rho.automatic && !(harness.rho.value >= 0.0)) {
    throw Error(ErrorKind::kConfig, "config: solver.rho must be non-negative or \"auto\"");
  }
  if (!(harness.rank_tolerance > 0.0)) throw Error(ErrorKind::kConfig, "config: solver.rank_tolerance must be positive");
  if (harness.value.steps < 1 || !(harness.value.step_size > 0.0)) {
    throw Error(ErrorKind::kConfig, "config: edit value solver needs positive steps and step size");
  }
  wrap([&] { facts.validate(); });
  if (output_dir.empty()) throw Error(ErrorKind::kConfig, "config: output_dir is empty");
}

inline RunConfig parse_run_config(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kConfig, std::string("config is not valid JSON: ") + e.what());
  }
  detail::ConfigObject root(j, "$");
  RunConfig c;

  auto m = root.object("model");
  c.model.vocab_size = m.get<std::size_t>("vocab_size");
  c.model.hidden_dim = m.get<std::size_t>("hidden_dim");
  c.model.mlp_dim = m.get<std::size_t>("mlp_dim");
  c.model.num_layers = m.get<std::size_t>("num_layers");
  c.model.max_sequence = m.get<std::size_t>("max_sequence");
  c.model.seed = m.get<std::uint64_t>("seed");
  m.finish();

  auto s = root.object("stream");
  c.stream.seed = s.get<std::uint64_t>("seed");
  c.stream.sequence_length = s.get<std::size_t>("sequence_length");
  c.stream.num_sequences = s.get<std::size_t>("num_sequences");
  s.finish();

  auto p = root.object("precompute");
  c.layers = p.get<std::vector<std::size_t>>("layers");
  c.workers = p.get<unsigned>("workers");
  p.finish();

  const auto& mults = root.at("multipliers");
  if (!mults.is_array()) root.fail("multipliers must be an array");
  for (const auto& v : mults) {
    try {
      c.multipliers.push_back(detail::multiplier_from_json(v));
    } catch (const Error& e) {
      throw Error(ErrorKind::kConfig, e.what());
    }
  }

  const auto& sched = root.at("schedule");
  if (!sched.is_array()) root.fail("schedule must be an array");
  for (std::size_t i = 0; i < sched.size(); ++i) {
    detail::ConfigObject row(sched[i], "$.schedule[" + std::to_string(i) + "]");
    ScheduleRow r;
    r.batch_size = row.get<std::size_t>("batch_size");
    r.num_batches = row.get<std::size_t>("num_batches");
    row.finish();
    c.schedule.rows.push_back(r);
  }

  for (const auto& name : root.get<std::vector<std::string>>("methods")) {
    try {
      c.methods.push_back(parse_method(name));
    } catch (const Error& e) {
      throw Error(ErrorKind::kConfig, e.what());
    }
  }

  auto sv = root.object("solver");
  c.harness.lambda = sv.get<double>("lambda");
  c.harness.lambda_per_sample = sv.get<bool>("lambda_per_sample");
  const auto& rho = sv.at("rho");
  if (rho.is_string() && rho.get<std::string>() == "auto") {
    c.harness.rho.automatic = true;
  } else if (rho.is_number()) {
    c.harness.rho.value = rho.get<double>();
  } else {
    sv.fail("rho must be a number or \"auto\"");
  }
  c.harness.rank_tolerance = sv.get<double>("rank_tolerance");
  sv.finish();

  auto e = root.object("edit");
  c.harness.edit_layer = e.get<std::size_t>("layer");
  c.harness.value.steps = e.get<std::size_t>("value_steps");
  c.harness.value.step_size = e.get<double>("value_step_size");
  c.harness.batch_seed = e.get<std::uint64_t>("batch_seed");
  e.finish();

  auto f = root.object("facts");
  c.facts.count = f.get<std::size_t>("count");
  c.facts.seed = f.get<std::uint64_t>("seed");
  f.finish();

  c.output_dir = root.get<std::string>("output_dir");
  root.finish();
  c.validate();
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  return parse_run_config(std::string(bytes.begin(), bytes.end()));
}

}  // namespace fastedit
