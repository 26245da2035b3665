#include <gtest/gtest.h>

#include <set>
#include <sstream>

#include "fastedit/eval.hpp"
#include "support/oracles.hpp"

namespace fe = fastedit;
using fe::DynamicMultiplier;
using fe::FactRecord;
using fe::Matrix;

namespace {

const fe::ToyModel& default_model() {
  static const fe::ToyModel m = fe::build_toy_model(fe::ToyModelConfig::with_hidden(16, 7));
  return m;
}

std::vector<FactRecord> suite(std::size_t n, std::uint64_t seed = 1) {
  fe::FactSuiteConfig c;
  c.count = n;
  c.seed = seed;
  return fe::generate_fact_suite(default_model(), c);
}

std::size_t count_lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

}  // namespace

TEST(OverallScore, HarmonicMean) {
  EXPECT_NEAR(fe::overall_score(100.0, 96.56, 80.19), 91.38, 0.01);
  EXPECT_DOUBLE_EQ(fe::overall_score(42.0, 42.0, 42.0), 42.0);
  EXPECT_NEAR(fe::overall_score(50.0, 50.0, 100.0), 60.0, 1e-12);
  EXPECT_EQ(fe::overall_score(0.0, 90.0, 90.0), 0.0);
  EXPECT_EQ(fe::overall_score(90.0, 90.0, 0.0), 0.0);
}

TEST(OverallScore, BoundedByMinimumForPositiveInputs) {
  fe::Rng rng(3);
  for (int i = 0; i < 200; ++i) {
    const double a = 0.01 + 99.99 * rng.uniform(), b = 0.01 + 99.99 * rng.uniform(), c = 0.01 + 99.99 * rng.uniform();
    const double s = fe::overall_score(a, b, c);
    EXPECT_LE(s, std::max({a, b, c}) + 1e-12);
    EXPECT_GE(s, std::min({a, b, c}) - 1e-12);
    EXPECT_LE(s, (a + b + c) / 3.0 + 1e-12);
  }
}

TEST(FactSuite, DeterministicAndDistinct) {
  const auto a = suite(100), b = suite(100);
  EXPECT_EQ(fe::facts_to_json(a), fe::facts_to_json(b));
  std::set<std::pair<fe::TokenSeq, fe::TokenSeq>> pairs;
  std::set<std::string> ids;
  for (const auto& f : a) {
    pairs.insert({f.subject, f.relation});
    ids.insert(f.id);
  }
  EXPECT_EQ(pairs.size(), 100u);
  EXPECT_EQ(ids.size(), 100u);
  EXPECT_NE(fe::facts_to_json(suite(100, 2)), fe::facts_to_json(a));
}

TEST(FactSuite, KnownBeforeEditing) {
  const auto facts = suite(60);
  for (const auto& f : facts) {
    EXPECT_NE(f.old_object, f.new_object);
    const auto lp = fe::next_token_log_probs(default_model(), f.prompt());
    EXPECT_GT(lp[f.old_object], lp[f.new_object]);
    EXPECT_FALSE(f.paraphrases.empty());
    EXPECT_FALSE(f.neighborhood.empty());
  }
  const auto sc = fe::evaluate_facts(default_model(), facts);
  EXPECT_EQ(sc.es, 0.0);
  EXPECT_EQ(sc.ps, 0.0);
  EXPECT_EQ(sc.ns, 100.0);
  EXPECT_EQ(sc.s, 0.0);
}

TEST(FactSuite, CapacityErrorForTinyVocab) {
  auto c = fe::ToyModelConfig::with_hidden(4, 1);
  c.vocab_size = 2;
  const auto tiny = fe::build_toy_model(c);
  fe::FactSuiteConfig fc;
  fc.count = 50;
  try {
    fe::generate_fact_suite(tiny, fc);
    FAIL();
  } catch (const fe::Error& e) {
    EXPECT_EQ(e.kind(), fe::ErrorKind::kCapacity);
  }
}

TEST(FactSuite, JsonRoundTrip) {
  const auto facts = suite(5);
  const auto back = fe::facts_from_json(fe::facts_to_json(facts));
  EXPECT_EQ(fe::facts_to_json(back), fe::facts_to_json(facts));
  EXPECT_THROW(fe::facts_from_json("{\"not\": \"an array\"}"), fe::Error);
  EXPECT_THROW(fe::facts_from_json("[{\"id\": 3}]"), fe::Error);
}

TEST(Metrics, DegenerateParaphraseEqualsEfficacy) {
  auto facts = suite(20);
  for (auto& f : facts) f.paraphrases = {f.prompt()};
  // Flip half the facts so the score is not trivially zero.
  for (std::size_t i = 0; i < facts.size(); i += 2) std::swap(facts[i].old_object, facts[i].new_object);
  EXPECT_DOUBLE_EQ(fe::paraphrase_score(default_model(), facts), fe::efficacy_score(default_model(), facts));
  EXPECT_DOUBLE_EQ(fe::efficacy_score(default_model(), facts), 50.0);
}

TEST(Metrics, PerFactParaphraseAveraging) {
  const auto facts = suite(2);
  // Each fact's old object is the argmax at its own prompt, so with the two
  // objects swapped in, "new" wins on one prompt and loses on the other.
  ASSERT_NE(facts[0].old_object, facts[1].old_object);
  FactRecord mixed = facts[0];
  mixed.new_object = facts[0].old_object;
  mixed.old_object = facts[1].old_object;
  mixed.paraphrases = {facts[0].prompt(), facts[1].prompt()};
  EXPECT_DOUBLE_EQ(fe::paraphrase_score(default_model(), {mixed}), 50.0);
  EXPECT_DOUBLE_EQ(fe::paraphrase_score(default_model(), {mixed, facts[1]}), 25.0);
}

TEST(Metrics, EmptyFactsRejected) {
  EXPECT_THROW(fe::efficacy_score(default_model(), {}), fe::Error);
  EXPECT_THROW(fe::neighborhood_score(default_model(), {}), fe::Error);
}

TEST(Metrics, ZeroedMlpsHurtNeighborhood) {
  const auto facts = suite(40);
  fe::HarnessConfig hc;
  const auto targets = fe::prepare_edit_targets(default_model(), 1, facts, hc.value);
  fe::TokenStreamConfig s;
  s.seed = 2;
  s.num_sequences = 256;
  const auto store = fe::harvest_keys(default_model(), s, {1},
                                      fe::PrecomputeBudget::make(DynamicMultiplier::full(), 64, s));
  std::vector<std::size_t> idx{0, 1, 2, 3};
  const auto req = fe::make_edit_request(facts, targets, idx);
  const auto sc = fe::solver_config_for(fe::Method::kEmmet, store.for_layer(1), req, hc);
  const auto sol = fe::solve_edit(default_model().down(1), store.for_layer(1), req, sc);
  const auto edited = fe::apply_edit(default_model(), 1, sol.delta);
  std::vector<FactRecord> batch(facts.begin(), facts.begin() + 4);
  fe::ToyModel corrupted = default_model();
  for (std::size_t l = 0; l < corrupted.num_layers(); ++l) corrupted = corrupted.with_down(l, Matrix::Zero(16, 64));
  EXPECT_GT(fe::efficacy_score(edited, batch), 0.0);
  EXPECT_LT(fe::neighborhood_score(corrupted, facts), fe::neighborhood_score(edited, facts));
}

TEST(Schedule, FullScaleDefault) {
  const auto s = fe::BatchSchedule::full_scale();
  ASSERT_EQ(s.rows.size(), 5u);
  EXPECT_EQ(s.rows[0], (fe::ScheduleRow{1, 1000}));
  EXPECT_EQ(s.rows[4], (fe::ScheduleRow{1024, 3}));
  EXPECT_NO_THROW(s.validate());
  EXPECT_THROW((fe::BatchSchedule{{{0, 1}}}.validate()), fe::Error);
  EXPECT_THROW((fe::BatchSchedule{{{1, 0}}}.validate()), fe::Error);
  EXPECT_THROW((fe::BatchSchedule{{}}.validate()), fe::Error);
}

class HarnessTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    facts_ = new std::vector<FactRecord>(suite(24));
    stream_.seed = 4;
    stream_.sequence_length = 16;
    stream_.num_sequences = 64;  // 1024 tokens = 16 * d_k
    cfg_.lambda = 4.0;
    result_ = new fe::SweepResult(fe::sweep_multiplier(
        default_model(), stream_, {1}, {DynamicMultiplier::of(1), DynamicMultiplier::of(4), DynamicMultiplier::full()},
        schedule_, {fe::Method::kMemit, fe::Method::kEmmet}, cfg_, *facts_));
  }
  static void TearDownTestSuite() {
    delete result_;
    delete facts_;
  }

  static inline std::vector<FactRecord>* facts_ = nullptr;
  static inline fe::TokenStreamConfig stream_;
  static inline fe::HarnessConfig cfg_;
  static inline fe::BatchSchedule schedule_{{{1, 6}, {4, 3}}};
  static inline fe::SweepResult* result_ = nullptr;
};

TEST_F(HarnessTest, CellBookkeeping) {
  EXPECT_EQ(result_->stores.size(), 3u);
  EXPECT_EQ(result_->report.cells.size(), 2u * 2u * 3u);
  for (const auto& c : result_->report.cells) {
    for (double v : {c.es, c.ps, c.ns, c.s}) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 100.0);
    }
    if (c.es > 0 && c.ps > 0 && c.ns > 0) {
      EXPECT_DOUBLE_EQ(c.s, fe::overall_score(c.es, c.ps, c.ns));
    }
    if (c.multiplier.is_full()) {
      EXPECT_TRUE(c.within_95);
    }
    EXPECT_EQ(c.batches_ok + c.batches_failed, c.batch_size == 1 ? 6u : 3u);
  }
}

TEST_F(HarnessTest, ThresholdFlagsFollowBaseline) {
  const auto& r = result_->report;
  for (const auto& c : r.cells) {
    const auto* base = r.find(c.method, c.batch_size, DynamicMultiplier::full());
    ASSERT_NE(base, nullptr);
    if (!c.multiplier.is_full()) {
      EXPECT_EQ(c.within_95, !c.failed && c.s >= 0.95 * base->s);
    }
  }
}

TEST_F(HarnessTest, CsvAndJsonAgree) {
  const std::string csv = fe::report_to_csv(result_->report);
  const auto json = fe::report_to_json(result_->report);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), fe::kReportCsvHeader);
  EXPECT_EQ(count_lines(csv), result_->report.cells.size() + 1);
  ASSERT_EQ(json.size(), result_->report.cells.size());
  std::istringstream in(csv);
  std::string line;
  std::getline(in, line);
  for (const auto& obj : json) {
    std::getline(in, line);
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", obj["s"].get<double>());
    EXPECT_NE(line.find(std::string(",") + buf + ","), std::string::npos) << line;
    EXPECT_EQ(line.substr(0, line.find(',')), obj["method"].get<std::string>());
  }
}

TEST_F(HarnessTest, RepeatRunIsByteIdentical) {
  const auto again = fe::sweep_multiplier(
      default_model(), stream_, {1}, {DynamicMultiplier::of(1), DynamicMultiplier::of(4), DynamicMultiplier::full()},
      schedule_, {fe::Method::kMemit, fe::Method::kEmmet}, cfg_, *facts_);
  EXPECT_EQ(fe::report_to_csv(again.report), fe::report_to_csv(result_->report));
}

TEST_F(HarnessTest, SummaryNamesConfiguredMultiplierOrNone) {
  const std::string s = fe::summary_text(result_->report, {fe::Method::kMemit, fe::Method::kEmmet});
  EXPECT_EQ(s.rfind("method,smallest_multiplier_within_95\n", 0), 0u);
  std::istringstream in(s);
  std::string line;
  std::getline(in, line);
  int rows = 0;
  while (std::getline(in, line)) {
    const std::string v = line.substr(line.find(',') + 1);
    EXPECT_TRUE(v == "1" || v == "4" || v == "FULL" || v == "none") << v;
    ++rows;
  }
  EXPECT_EQ(rows, 3);
}

TEST(Harness, FullOnlySummaryIsFull) {
  fe::MetricsReport r;
  fe::MetricsCell c;
  c.batch_size = 1;
  c.s = 50;
  r.cells.push_back(c);
  fe::detail::flag_thresholds(r);
  EXPECT_TRUE(r.cells[0].within_95);
  EXPECT_EQ(fe::smallest_within_threshold(r)->to_string(), "FULL");
}

TEST(Harness, EqualScoreIsWithinThreshold) {
  fe::MetricsReport r;
  fe::MetricsCell full, two;
  full.s = two.s = 80.0;
  two.multiplier = DynamicMultiplier::of(2);
  r.cells = {full, two};
  fe::detail::flag_thresholds(r);
  EXPECT_TRUE(r.cells[1].within_95);
  r.cells[1].s = 0.95 * 80.0 - 1e-9;
  fe::detail::flag_thresholds(r);
  EXPECT_FALSE(r.cells[1].within_95);
}

TEST(Harness, InsufficientFactsIsCapacityError) {
  const auto facts = suite(4);
  fe::HarnessConfig hc;
  const auto targets = fe::prepare_edit_targets(default_model(), 1, facts, hc.value);
  fe::TokenStreamConfig s;
  s.num_sequences = 8;
  const auto st =
      fe::harvest_keys(default_model(), s, {1}, fe::PrecomputeBudget::make(DynamicMultiplier::full(), 64, s));
  try {
    fe::run_schedule(default_model(), {st}, fe::BatchSchedule{{{2, 3}}}, fe::Method::kMemit, hc, facts, targets);
    FAIL();
  } catch (const fe::Error& e) {
    EXPECT_EQ(e.kind(), fe::ErrorKind::kCapacity);
  }
}

TEST(Harness, SingularCellMarkedFailedAndRunContinues) {
  const auto facts = suite(8);
  fe::HarnessConfig hc;
  const auto targets = fe::prepare_edit_targets(default_model(), 1, facts, hc.value);
  fe::TokenStreamConfig tiny;
  tiny.num_sequences = 2;
  tiny.sequence_length = 16;
  // 32 preserved keys, below d_k - 1 = 63: C_eff is singular at rho = 0.
  const auto thin =
      fe::harvest_keys(default_model(), tiny, {1}, fe::PrecomputeBudget::make(DynamicMultiplier::full(), 64, tiny));
  const auto cells = fe::run_schedule(default_model(), {thin}, fe::BatchSchedule{{{1, 4}, {2, 2}}},
                                      fe::Method::kMemit, hc, facts, targets);
  ASSERT_EQ(cells.size(), 2u);
  for (const auto& c : cells) {
    EXPECT_TRUE(c.failed);
    EXPECT_EQ(c.batches_ok, 0u);
    EXPECT_FALSE(c.diagnostics.empty());
    EXPECT_TRUE(c.within_95);  // FULL is its own baseline
  }
}
