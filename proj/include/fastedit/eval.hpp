#pragma once

// Synthetic counterfactual facts, the four editing metrics, batch schedules,
// and the dynamic-multiplier sweep with 95%-of-full threshold flags.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fastedit/errors.hpp"
#include "fastedit/linalg.hpp"
#include "fastedit/precompute.hpp"
#include "fastedit/random.hpp"
#include "fastedit/solvers.hpp"
#include "fastedit/toy_model.hpp"

namespace fastedit {

// ---- facts ------------------------------------------------------------------

struct NeighborPrompt {
  TokenSeq prompt;
  Token object = 0;  // the unedited model's answer
};

struct FactRecord {
  std::string id;
  TokenSeq subject;
  TokenSeq relation;
  Token old_object = 0;
  Token new_object = 0;
  std::vector<TokenSeq> paraphrases;  // complete prompts
  std::vector<NeighborPrompt> neighborhood;

  TokenSeq prompt() const {
    TokenSeq p = subject;
    p.insert(p.end(), relation.begin(), relation.end());
    return p;
  }

  /// Keys are read at the last subject token.
  std::size_t key_position() const { return subject.size() - 1; }
};

struct FactSuiteConfig {
  std::size_t count = 200;
  std::uint64_t seed = 0;
  std::size_t num_relations = 8;
  std::size_t subject_min_length = 2;
  std::size_t subject_max_length = 3;
  std::size_t relation_length = 2;
  std::size_t paraphrases_per_fact = 2;
  std::size_t prefix_length = 2;
  std::size_t neighbors_per_fact = 2;

  void validate() const {
    if (count < 1) reject("fact suite: count must be at least 1");
    if (num_relations < 1) reject("fact suite: num_relations must be at least 1");
    if (subject_min_length < 1 || subject_max_length < subject_min_length) reject("fact suite: bad subject length range");
    if (relation_length < 1) reject("fact suite: relation_length must be at least 1");
    if (paraphrases_per_fact < 1) reject("fact suite: need at least one paraphrase");
    if (neighbors_per_fact < 1) reject("fact suite: need at least one neighbor");
  }
};

namespace detail {

inline Token argmax_token(const Vector& logp) {
  Eigen::Index best = 0;
  logp.maxCoeff(&best);
  return static_cast<Token>(best);
}

inline TokenSeq random_tokens(Rng& rng, std::size_t n, std::size_t vocab) {
  TokenSeq s(n);
  for (auto& t : s) t = static_cast<Token>(rng.below(vocab));
  return s;
}

inline TokenSeq concat(const TokenSeq& a, const TokenSeq& b) {
  TokenSeq out = a;
  out.insert(out.end(), b.begin(), b.end());
  return out;
}

}  // namespace detail

/// Builds facts the unedited model already "knows": the old object is the
/// model's own argmax at the fact prompt, and the new object is a token the
/// model ranks below the old one at every paraphrase and below the correct
/// answer at every neighborhood prompt.
inline std::vector<FactRecord> generate_fact_suite(const ToyModel& model, const FactSuiteConfig& config) {
  config.validate();
  const std::size_t vocab = model.vocab_size();
  const std::size_t longest = config.prefix_length + config.subject_max_length + config.relation_length;
  if (longest > model.config().max_sequence) reject("fact suite: prompts would exceed max_sequence");

  Rng rng(derive_seed(config.seed, 0xfac7));
  struct Relation {
    TokenSeq phrase;
    std::vector<TokenSeq> alternatives;
  };
  std::vector<Relation> relations(config.num_relations);
  for (auto& r : relations) {
    r.phrase = detail::random_tokens(rng, config.relation_length, vocab);
    for (std::size_t j = 0; j < config.paraphrases_per_fact; ++j) {
      r.alternatives.push_back(detail::random_tokens(rng, config.relation_length, vocab));
    }
  }

  std::set<TokenSeq> used_subjects;
  auto fresh_subject = [&]() -> std::optional<TokenSeq> {
    for (int attempt = 0; attempt < 64; ++attempt) {
      const std::size_t span = config.subject_max_length - config.subject_min_length + 1;
      const std::size_t len = config.subject_min_length + static_cast<std::size_t>(rng.below(span));
      TokenSeq s = detail::random_tokens(rng, len, vocab);
      if (used_subjects.insert(s).second) return s;
    }
    return std::nullopt;
  };

  std::vector<FactRecord> facts;
  facts.reserve(config.count);
  const std::size_t max_attempts = 20 * config.count + 100;
  std::size_t attempts = 0;
  while (facts.size() < config.count) {
    if (++attempts > max_attempts) {
      throw Error(ErrorKind::kCapacity, "fact suite: could only construct " + std::to_string(facts.size()) + " of " +
                                            std::to_string(config.count) + " facts for vocab size " +
                                            std::to_string(vocab));
    }
    const Relation& rel = relations[facts.size() % relations.size()];
    auto subject = fresh_subject();
    if (!subject) continue;

    FactRecord f;
    f.id = "f" + std::to_string(facts.size());
    f.subject = *subject;
    f.relation = rel.phrase;
    const Vector logp = next_token_log_probs(model, f.prompt());
    f.old_object = detail::argmax_token(logp);

    std::vector<Vector> para_logp;
    for (const auto& alt : rel.alternatives) {
      TokenSeq p = detail::concat(detail::random_tokens(rng, config.prefix_length, vocab), detail::concat(f.subject, alt));
      para_logp.push_back(next_token_log_probs(model, p));
      f.paraphrases.push_back(std::move(p));
    }

    std::vector<Vector> nb_logp;
    bool neighbors_ok = true;
    for (std::size_t n = 0; n < config.neighbors_per_fact; ++n) {
      auto other = fresh_subject();
      if (!other) {
        neighbors_ok = false;
        break;
      }
      NeighborPrompt nb;
      nb.prompt = detail::concat(*other, rel.phrase);
      nb_logp.push_back(next_token_log_probs(model, nb.prompt));
      nb.object = detail::argmax_token(nb_logp.back());
      f.neighborhood.push_back(std::move(nb));
    }
    if (!neighbors_ok) continue;

    std::vector<Token> candidates;
    for (Token t = 0; t < vocab; ++t) {
      if (t == f.old_object) continue;
      bool ok = logp[t] < logp[f.old_object];
      for (const auto& lp : para_logp) ok = ok && lp[t] < lp[f.old_object];
      for (std::size_t n = 0; ok && n < f.neighborhood.size(); ++n) {
        ok = t != f.neighborhood[n].object && nb_logp[n][t] < nb_logp[n][f.neighborhood[n].object];
      }
      if (ok) candidates.push_back(t);
    }
    if (candidates.empty()) continue;
    f.new_object = candidates[static_cast<std::size_t>(rng.below(candidates.size()))];
    facts.push_back(std::move(f));
  }
  return facts;
}

inline nlohmann::json fact_to_json(const FactRecord& f) {
  nlohmann::json nb = nlohmann::json::array();
  for (const auto& n : f.neighborhood) nb.push_back({{"prompt", n.prompt}, {"object", n.object}});
  return {{"id", f.id},           {"subject", f.subject},         {"relation", f.relation},
          {"old_object", f.old_object}, {"new_object", f.new_object}, {"paraphrases", f.paraphrases},
          {"neighborhood", nb}};
}

inline FactRecord fact_from_json(const nlohmann::json& j) {
  try {
    FactRecord f;
    f.id = j.at("id").get<std::string>();
    f.subject = j.at("subject").get<TokenSeq>();
    f.relation = j.at("relation").get<TokenSeq>();
    f.old_object = j.at("old_object").get<Token>();
    f.new_object = j.at("new_object").get<Token>();
    f.paraphrases = j.at("paraphrases").get<std::vector<TokenSeq>>();
    for (const auto& n : j.at("neighborhood")) {
      f.neighborhood.push_back({n.at("prompt").get<TokenSeq>(), n.at("object").get<Token>()});
    }
    if (f.subject.empty()) reject("fact " + f.id + ": empty subject");
    if (f.old_object == f.new_object) reject("fact " + f.id + ": old and new object coincide");
    return f;
  } catch (const nlohmann::json::exception& e) {
    reject(std::string("malformed fact record: ") + e.what());
  }
}

inline std::string facts_to_json(const std::vector<FactRecord>& facts) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& f : facts) arr.push_back(fact_to_json(f));
  return arr.dump(1) + "\n";
}

inline std::vector<FactRecord> facts_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    reject(std::string("facts file is not valid JSON: ") + e.what());
  }
  if (!j.is_array()) reject("facts file must hold a JSON array");
  std::vector<FactRecord> facts;
  for (const auto& item : j) facts.push_back(fact_from_json(item));
  return facts;
}

// ---- metrics ----------------------------------------------------------------

namespace detail {

inline void require_in_vocab(const ToyModel& model, const FactRecord& f) {
  if (f.old_object >= model.vocab_size() || f.new_object >= model.vocab_size()) {
    reject("fact " + f.id + ": object token out of vocabulary");
  }
}

inline double new_beats_old(const ToyModel& model, const TokenSeq& prompt, const FactRecord& f) {
  const Vector lp = next_token_log_probs(model, prompt);
  return lp[f.new_object] > lp[f.old_object] ? 1.0 : 0.0;
}

}  // namespace detail

/// Percentage of facts where the new object outscores the old at the prompt.
inline double efficacy_score(const ToyModel& model, const std::vector<FactRecord>& facts) {
  if (facts.empty()) reject("efficacy_score: no facts");
  double hits = 0.0;
  for (const auto& f : facts) {
    detail::require_in_vocab(model, f);
    hits += detail::new_beats_old(model, f.prompt(), f);
  }
  return 100.0 * hits / static_cast<double>(facts.size());
}

/// Per-fact average over paraphrase prompts, then averaged over facts.
inline double paraphrase_score(const ToyModel& model, const std::vector<FactRecord>& facts) {
  if (facts.empty()) reject("paraphrase_score: no facts");
  double total = 0.0;
  for (const auto& f : facts) {
    detail::require_in_vocab(model, f);
    if (f.paraphrases.empty()) reject("fact " + f.id + ": no paraphrases");
    double hits = 0.0;
    for (const auto& p : f.paraphrases) hits += detail::new_beats_old(model, p, f);
    total += hits / static_cast<double>(f.paraphrases.size());
  }
  return 100.0 * total / static_cast<double>(facts.size());
}

/// Per-fact fraction of neighborhood prompts whose correct object still
/// outranks the injected new object, averaged over facts.
inline double neighborhood_score(const ToyModel& model, const std::vector<FactRecord>& facts) {
  if (facts.empty()) reject("neighborhood_score: no facts");
  double total = 0.0;
  for (const auto& f : facts) {
    detail::require_in_vocab(model, f);
    if (f.neighborhood.empty()) reject("fact " + f.id + ": no neighborhood prompts");
    double kept = 0.0;
    for (const auto& n : f.neighborhood) {
      const Vector lp = next_token_log_probs(model, n.prompt);
      kept += lp[n.object] > lp[f.new_object] ? 1.0 : 0.0;
    }
    total += kept / static_cast<double>(f.neighborhood.size());
  }
  return 100.0 * total / static_cast<double>(facts.size());
}

/// Harmonic mean of the three scores; zero if any of them is zero.
inline double overall_score(double es, double ps, double ns) {
  if (!(es > 0.0) || !(ps > 0.0) || !(ns > 0.0)) return 0.0;
  return 3.0 / (1.0 / es + 1.0 / ps + 1.0 / ns);
}

struct Scores {
  double es = 0.0;
  double ps = 0.0;
  double ns = 0.0;
  double s = 0.0;
};

inline Scores evaluate_facts(const ToyModel& model, const std::vector<FactRecord>& facts) {
  Scores sc;
  sc.es = efficacy_score(model, facts);
  sc.ps = paraphrase_score(model, facts);
  sc.ns = neighborhood_score(model, facts);
  sc.s = overall_score(sc.es, sc.ps, sc.ns);
  return sc;
}

// ---- schedules and edit targets ---------------------------------------------

struct ScheduleRow {
  std::size_t batch_size = 1;
  std::size_t num_batches = 1;
  bool operator==(const ScheduleRow&) const = default;
};

struct BatchSchedule {
  std::vector<ScheduleRow> rows;

  /// Batch sizes 1..1024 with the sample counts used for the GPT-class runs.
  static BatchSchedule full_scale() { return {{{1, 1000}, {16, 10}, {64, 5}, {256, 5}, {1024, 3}}}; }

  void validate() const {
    if (rows.empty()) reject("batch schedule is empty");
    std::set<std::size_t> seen;
    for (const auto& r : rows) {
      if (r.batch_size < 1 || r.num_batches < 1) reject("batch schedule: sizes and counts must be positive");
      if (!seen.insert(r.batch_size).second) reject("batch schedule: duplicate batch size");
    }
  }
};

struct ValueSolverConfig {
  std::size_t steps = 25;
  double step_size = 8.0;
};

/// Edit key and solved target value for one fact.
struct EditTarget {
  Vector key;
  Vector value;
  double initial_log_prob = 0.0;
  double final_log_prob = 0.0;
};

inline std::vector<EditTarget> prepare_edit_targets(const ToyModel& model, std::size_t layer,
                                                    const std::vector<FactRecord>& facts,
                                                    const ValueSolverConfig& value_cfg) {
  std::vector<EditTarget> out;
  out.reserve(facts.size());
  for (const auto& f : facts) {
    const TokenSeq prompt = f.prompt();
    EditTarget t;
    t.key = extract_key(model, layer, prompt, f.key_position());
    const ValueSolution v =
        solve_value(model, layer, prompt, f.key_position(), f.new_object, value_cfg.steps, value_cfg.step_size);
    t.value = v.value;
    t.initial_log_prob = v.initial_log_prob;
    t.final_log_prob = v.final_log_prob;
    out.push_back(std::move(t));
  }
  return out;
}

inline EditRequest make_edit_request(const std::vector<FactRecord>& facts, const std::vector<EditTarget>& targets,
                                     const std::vector<std::size_t>& indices) {
  if (indices.empty()) reject("make_edit_request: empty batch");
  const auto dk = targets.at(indices[0]).key.size();
  const auto d = targets.at(indices[0]).value.size();
  EditRequest req;
  req.keys.resize(dk, static_cast<Eigen::Index>(indices.size()));
  req.values.resize(d, static_cast<Eigen::Index>(indices.size()));
  for (std::size_t c = 0; c < indices.size(); ++c) {
    const auto i = indices[c];
    req.keys.col(static_cast<Eigen::Index>(c)) = targets.at(i).key;
    req.values.col(static_cast<Eigen::Index>(c)) = targets.at(i).value;
    req.fact_ids.push_back(facts.at(i).id);
  }
  return req;
}

// ---- harness ----------------------------------------------------------------

struct RhoSetting {
  bool automatic = false;  // 1e-4 * mean diagonal of the matrix being inverted
  double value = 0.0;

  std::string to_string() const {
    if (automatic) return "auto";
    std::ostringstream os;
    os << value;
    return os.str();
  }
};

struct HarnessConfig {
  std::size_t edit_layer = 1;
  double lambda = 4.0;
  // Divide lambda by the preserved-key count, i.e. weight the second-moment
  // estimate C0 / P rather than the raw sum, so budgets are compared at equal
  // preservation strength.
  bool lambda_per_sample = true;
  RhoSetting rho;
  double rank_tolerance = kDefaultRankTolerance;
  ValueSolverConfig value;
  std::uint64_t batch_seed = 0;
};

inline SolverConfig solver_config_for(Method method, const CovarianceAccumulator& cov, const EditRequest& edit,
                                      const HarnessConfig& cfg) {
  SolverConfig sc;
  sc.method = method;
  sc.rank_tolerance = cfg.rank_tolerance;
  sc.lambda = cfg.lambda;
  if (cfg.lambda_per_sample) {
    if (cov.sample_count() == 0) reject("harness: covariance has no samples");
    sc.lambda = cfg.lambda / static_cast<double>(cov.sample_count());
  }
  if (cfg.rho.automatic) {
    const Matrix m = method == Method::kMemit ? effective_matrix(cov, sc.lambda, edit, 0.0) : cov.sum_outer();
    sc.rho = 1e-4 * m.diagonal().mean();
  } else {
    sc.rho = cfg.rho.value;
  }
  return sc;
}

struct MetricsCell {
  Method method = Method::kMemit;
  std::size_t batch_size = 0;
  DynamicMultiplier multiplier = DynamicMultiplier::full();
  double es = 0.0;
  double ps = 0.0;
  double ns = 0.0;
  double s = 0.0;
  bool within_95 = false;
  bool failed = false;
  std::size_t batches_ok = 0;
  std::size_t batches_failed = 0;
  std::string diagnostics;
};

struct MetricsReport {
  std::vector<MetricsCell> cells;

  const MetricsCell* find(Method m, std::size_t batch_size, const DynamicMultiplier& dm) const {
    for (const auto& c : cells) {
      if (c.method == m && c.batch_size == batch_size && c.multiplier == dm) return &c;
    }
    return nullptr;
  }
};

namespace detail {

/// Without-replacement batches for one schedule row.
inline std::vector<std::vector<std::size_t>> sample_batches(std::size_t num_facts, const ScheduleRow& row,
                                                            std::uint64_t seed) {
  if (row.batch_size * row.num_batches > num_facts) {
    throw Error(ErrorKind::kCapacity, "schedule row (" + std::to_string(row.batch_size) + " x " +
                                          std::to_string(row.num_batches) + ") needs more than the " +
                                          std::to_string(num_facts) + " available facts");
  }
  std::vector<std::size_t> perm(num_facts);
  for (std::size_t i = 0; i < num_facts; ++i) perm[i] = i;
  Rng rng(derive_seed(seed, row.batch_size));
  rng.shuffle(perm);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t b = 0; b < row.num_batches; ++b) {
    batches.emplace_back(perm.begin() + static_cast<std::ptrdiff_t>(b * row.batch_size),
                         perm.begin() + static_cast<std::ptrdiff_t>((b + 1) * row.batch_size));
  }
  return batches;
}

inline void flag_thresholds(MetricsReport& report) {
  for (auto& c : report.cells) {
    if (c.multiplier.is_full()) {
      c.within_95 = true;
      continue;
    }
    const MetricsCell* base = report.find(c.method, c.batch_size, DynamicMultiplier::full());
    c.within_95 = base != nullptr && !c.failed && c.s >= 0.95 * base->s;
  }
}

}  // namespace detail

/// Evaluates one method over every (batch size, store) cell. Each batch is
/// edited on a fresh copy of the unedited model; scores are averaged over
/// batches and S is the harmonic mean of the averages. A singular solve
/// marks its cell failed and the run continues.
inline std::vector<MetricsCell> run_schedule(const ToyModel& model, const std::vector<CovarianceStore>& stores,
                                             const BatchSchedule& schedule, Method method, const HarnessConfig& cfg,
                                             const std::vector<FactRecord>& facts,
                                             const std::vector<EditTarget>& targets) {
  schedule.validate();
  if (stores.empty()) reject("run_schedule: no covariance stores");
  if (targets.size() != facts.size()) reject("run_schedule: one edit target per fact required");
  for (const auto& st : stores) st.require_model(model);

  std::vector<MetricsCell> cells;
  for (const auto& row : schedule.rows) {
    const auto batches = detail::sample_batches(facts.size(), row, cfg.batch_seed);
    for (const auto& store : stores) {
      MetricsCell cell;
      cell.method = method;
      cell.batch_size = row.batch_size;
      cell.multiplier = store.multiplier;
      const CovarianceAccumulator& cov = store.for_layer(cfg.edit_layer);
      Scores sum;
      for (const auto& idx : batches) {
        const EditRequest req = make_edit_request(facts, targets, idx);
        try {
          const SolverConfig sc = solver_config_for(method, cov, req, cfg);
          const EditSolution sol = solve_edit(model.down(cfg.edit_layer), cov, req, sc);
          const ToyModel edited = apply_edit(model, cfg.edit_layer, sol.delta);
          std::vector<FactRecord> batch_facts;
          for (auto i : idx) batch_facts.push_back(facts[i]);
          const Scores sc_batch = evaluate_facts(edited, batch_facts);
          sum.es += sc_batch.es;
          sum.ps += sc_batch.ps;
          sum.ns += sc_batch.ns;
          ++cell.batches_ok;
        } catch (const Error& e) {
          if (e.kind() != ErrorKind::kSingularSystem && e.kind() != ErrorKind::kInfeasibleConstraint) throw;
          if (cell.diagnostics.empty()) cell.diagnostics = e.what();
          ++cell.batches_failed;
        }
      }
      cell.failed = cell.batches_failed > 0;
      if (cell.batches_ok > 0) {
        const double n = static_cast<double>(cell.batches_ok);
        cell.es = sum.es / n;
        cell.ps = sum.ps / n;
        cell.ns = sum.ns / n;
        cell.s = overall_score(cell.es, cell.ps, cell.ns);
      }
      cells.push_back(std::move(cell));
    }
  }
  MetricsReport tmp{cells};
  detail::flag_thresholds(tmp);
  return tmp.cells;
}

struct SweepResult {
  MetricsReport report;
  std::vector<CovarianceStore> stores;  // one per multiplier, in request order
};

/// One precompute per multiplier, reused across methods and batch sizes.
inline std::vector<CovarianceStore> precompute_stores(const ToyModel& model, const TokenStreamConfig& stream,
                                                      const std::vector<std::size_t>& layers,
                                                      const std::vector<DynamicMultiplier>& multipliers,
                                                      unsigned workers = 1) {
  if (multipliers.empty()) reject("sweep: no multipliers");
  for (std::size_t i = 0; i < multipliers.size(); ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      if (multipliers[i] == multipliers[j]) reject("sweep: duplicate multiplier " + multipliers[i].to_string());
    }
  }
  std::vector<CovarianceStore> stores;
  for (const auto& m : multipliers) {
    stores.push_back(harvest_keys(model, stream, layers, PrecomputeBudget::make(m, model.key_dim(), stream), workers));
  }
  return stores;
}

inline SweepResult sweep_multiplier(const ToyModel& model, const TokenStreamConfig& stream,
                                    const std::vector<std::size_t>& layers,
                                    const std::vector<DynamicMultiplier>& multipliers, const BatchSchedule& schedule,
                                    const std::vector<Method>& methods, const HarnessConfig& cfg,
                                    const std::vector<FactRecord>& facts, unsigned workers = 1) {
  if (methods.empty()) reject("sweep: no methods");
  schedule.validate();
  SweepResult result;
  result.stores = precompute_stores(model, stream, layers, multipliers, workers);
  const auto targets = prepare_edit_targets(model, cfg.edit_layer, facts, cfg.value);
  for (Method m : methods) {
    auto cells = run_schedule(model, result.stores, schedule, m, cfg, facts, targets);
    result.report.cells.insert(result.report.cells.end(), cells.begin(), cells.end());
  }
  return result;
}

// ---- export -----------------------------------------------------------------

inline constexpr char kReportCsvHeader[] = "method,batch_size,dynamic_multiplier,es,ps,ns,s,within_95,failed";

/// Scores are exported rounded to four decimals in both formats.
inline double round4(double x) { return std::round(x * 1e4) / 1e4; }

inline std::string report_to_csv(const MetricsReport& report) {
  std::string out = std::string(kReportCsvHeader) + "\n";
  char buf[64];
  for (const auto& c : report.cells) {
    out += std::string(to_string(c.method)) + "," + std::to_string(c.batch_size) + "," + c.multiplier.to_string();
    for (double v : {c.es, c.ps, c.ns, c.s}) {
      std::snprintf(buf, sizeof buf, ",%.4f", round4(v));
      out += buf;
    }
    out += c.within_95 ? ",true" : ",false";
    out += c.failed ? ",true\n" : ",false\n";
  }
  return out;
}

inline nlohmann::json report_to_json(const MetricsReport& report) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& c : report.cells) {
    nlohmann::json dm = c.multiplier.is_full() ? nlohmann::json("FULL") : nlohmann::json(c.multiplier.value());
    arr.push_back({{"method", std::string(to_string(c.method))},
                   {"batch_size", c.batch_size},
                   {"dynamic_multiplier", dm},
                   {"es", round4(c.es)},
                   {"ps", round4(c.ps)},
                   {"ns", round4(c.ns)},
                   {"s", round4(c.s)},
                   {"within_95", c.within_95},
                   {"failed", c.failed},
                   {"batches_ok", c.batches_ok},
                   {"batches_failed", c.batches_failed},
                   {"diagnostics", c.diagnostics}});
  }
  return arr;
}

/// Smallest multiplier whose every batch-size cell (for the given method, or
/// all methods) is within 95% of FULL and not failed.
inline std::optional<DynamicMultiplier> smallest_within_threshold(const MetricsReport& report,
                                                                  std::optional<Method> method = std::nullopt) {
  std::vector<DynamicMultiplier> levels;
  for (const auto& c : report.cells) {
    if (std::find(levels.begin(), levels.end(), c.multiplier) == levels.end()) levels.push_back(c.multiplier);
  }
  std::sort(levels.begin(), levels.end());
  for (const auto& dm : levels) {
    bool all = true;
    bool any = false;
    for (const auto& c : report.cells) {
      if (!(c.multiplier == dm) || (method && c.method != *method)) continue;
      any = true;
      all = all && c.within_95 && !c.failed;
    }
    if (any && all) return dm;
  }
  return std::nullopt;
}

inline std::string summary_text(const MetricsReport& report, const std::vector<Method>& methods) {
  std::string out = "method,smallest_multiplier_within_95\n";
  auto name = [](const std::optional<DynamicMultiplier>& m) { return m ? m->to_string() : std::string("none"); };
  for (Method m : methods) out += std::string(to_string(m)) + "," + name(smallest_within_threshold(report, m)) + "\n";
  out += "ALL," + name(smallest_within_threshold(report)) + "\n";
  return out;
}

}  // namespace fastedit
