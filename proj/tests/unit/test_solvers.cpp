#include <gtest/gtest.h>

#include "fastedit/solvers.hpp"
#include "support/oracles.hpp"

namespace fe = fastedit;
using fe::Matrix;

namespace {

fe::SolverConfig config_for(fe::Method m, double lambda = 1.0, double rho = 0.0) {
  fe::SolverConfig c;
  c.method = m;
  c.lambda = lambda;
  c.rho = rho;
  return c;
}

}  // namespace

TEST(Method, ParseAndPrint) {
  EXPECT_EQ(fe::parse_method("MEMIT"), fe::Method::kMemit);
  EXPECT_EQ(fe::parse_method("EMMET"), fe::Method::kEmmet);
  EXPECT_EQ(fe::to_string(fe::Method::kEmmet), "EMMET");
  EXPECT_THROW(fe::parse_method("ROMEO"), fe::Error);
}

TEST(MinPreservedKeys, Arithmetic) {
  EXPECT_EQ(fe::min_preserved_keys(6400, 1), 6399u);
  EXPECT_EQ(fe::min_preserved_keys(16384, 1), 16383u);
  EXPECT_EQ(fe::min_preserved_keys(32, 4), 28u);
  EXPECT_EQ(fe::min_preserved_keys(4, 8), 0u);
}

TEST(EffectiveMatrix, AssemblesTerms) {
  const auto inst = fe::testing::random_instance(11, 3, 5, 12, 2);
  const Matrix c = fe::effective_matrix(inst.cov, 2.0, inst.request, 0.25);
  Matrix expect = 2.0 * inst.k0 * inst.k0.transpose() + inst.ke * inst.ke.transpose();
  expect.diagonal().array() += 0.25;
  EXPECT_LE((c - expect).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_EQ(c, c.transpose());
}

TEST(Memit, MatchesStackedLeastSquares) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto inst = fe::testing::random_instance(100 + seed, 4, 8, 20, 3);
    const double lambda = 0.5 + static_cast<double>(seed % 4);
    const auto sol = fe::memit_delta(inst.w0, inst.cov, inst.request, config_for(fe::Method::kMemit, lambda));
    const Matrix oracle = fe::testing::stacked_least_squares(inst.w0, inst.k0, inst.ke, inst.v, lambda);
    EXPECT_LE((inst.w0 + sol.delta - oracle).norm(), 1e-8) << "seed " << seed;
  }
}

TEST(Memit, RhoMatchesRidgeOracle) {
  const auto inst = fe::testing::random_instance(7, 3, 6, 4, 1);  // P + B < d_k: needs rho
  const auto sol = fe::memit_delta(inst.w0, inst.cov, inst.request, config_for(fe::Method::kMemit, 1.0, 0.3));
  const Matrix oracle = fe::testing::stacked_least_squares(inst.w0, inst.k0, inst.ke, inst.v, 1.0, 0.3);
  EXPECT_LE((inst.w0 + sol.delta - oracle).norm(), 1e-8);
  EXPECT_DOUBLE_EQ(sol.rho_used, 0.3);
}

TEST(Memit, ObjectiveIsMinimalUnderPerturbation) {
  const auto inst = fe::testing::random_instance(13, 3, 6, 15, 2);
  const auto sol = fe::memit_delta(inst.w0, inst.cov, inst.request, config_for(fe::Method::kMemit, 2.0));
  const Matrix w = inst.w0 + sol.delta;
  auto total = [&](const Matrix& wh) {
    const auto t = fe::objective_value(wh, inst.w0, inst.cov, inst.request, 2.0);
    return t.preservation + t.memorization;
  };
  fe::Rng rng(1);
  const double best = total(w);
  for (int i = 0; i < 10; ++i) EXPECT_GT(total(w + 1e-4 * fe::testing::gaussian(rng, 3, 6)), best);
}

TEST(Memit, SingularEffectiveMatrixReportsSolvability) {
  const auto inst = fe::testing::random_instance(17, 3, 10, 5, 2);  // rank 7 < 10
  try {
    fe::memit_delta(inst.w0, inst.cov, inst.request, config_for(fe::Method::kMemit));
    FAIL() << "expected SolvabilityError";
  } catch (const fe::SolvabilityError& e) {
    EXPECT_EQ(e.kind(), fe::ErrorKind::kSingularSystem);
    EXPECT_EQ(e.report().effective_rank, 7u);
    EXPECT_EQ(e.report().theoretical_minimum, 8u);
    EXPECT_FALSE(e.report().meets_minimum);
    EXPECT_FALSE(e.report().invertible);
  }
}

TEST(Memit, RejectsWrongMethodAndShapes) {
  auto inst = fe::testing::random_instance(19, 3, 6, 12, 2);
  EXPECT_THROW(fe::memit_delta(inst.w0, inst.cov, inst.request, config_for(fe::Method::kEmmet)), fe::Error);
  fe::EditRequest bad = inst.request;
  bad.values = Matrix::Zero(4, 2);
  EXPECT_THROW(fe::memit_delta(inst.w0, inst.cov, bad, config_for(fe::Method::kMemit)), fe::Error);
  bad = inst.request;
  bad.fact_ids.pop_back();
  EXPECT_THROW(fe::memit_delta(inst.w0, inst.cov, bad, config_for(fe::Method::kMemit)), fe::Error);
}

TEST(Emmet, SatisfiesConstraintsAndMatchesKkt) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto inst = fe::testing::random_instance(200 + seed, 5, 9, 24, 1 + seed % 4);
    const auto sol = fe::emmet_delta(inst.w0, inst.cov, inst.request, config_for(fe::Method::kEmmet));
    const Matrix w = inst.w0 + sol.delta;
    EXPECT_LE((w * inst.ke - inst.v).norm(), 1e-8) << "seed " << seed;
    EXPECT_LE(sol.memorization_residual, 1e-8);
    const Matrix oracle = fe::testing::constrained_oracle(inst.w0, inst.k0, inst.ke, inst.v);
    EXPECT_LE((w - oracle).norm(), 1e-8) << "seed " << seed;
  }
}

TEST(Emmet, DependentEditKeysAreInfeasible) {
  auto inst = fe::testing::random_instance(23, 3, 6, 12, 2);
  inst.request.keys.col(1) = 2.0 * inst.request.keys.col(0);
  try {
    fe::emmet_delta(inst.w0, inst.cov, inst.request, config_for(fe::Method::kEmmet));
    FAIL();
  } catch (const fe::Error& e) {
    EXPECT_EQ(e.kind(), fe::ErrorKind::kInfeasibleConstraint);
  }
}

TEST(Emmet, SingularCovarianceRaises) {
  const auto inst = fe::testing::random_instance(29, 3, 10, 4, 1);
  EXPECT_THROW(fe::emmet_delta(inst.w0, inst.cov, inst.request, config_for(fe::Method::kEmmet)),
               fe::SolvabilityError);
}

TEST(Rome, EqualsEmmetAtBatchOne) {
  const auto inst = fe::testing::random_instance(31, 4, 8, 16, 1);
  const auto cfg = config_for(fe::Method::kEmmet);
  EXPECT_EQ(fe::rome_delta(inst.w0, inst.cov, inst.request, cfg).delta,
            fe::emmet_delta(inst.w0, inst.cov, inst.request, cfg).delta);
  const auto two = fe::testing::random_instance(31, 4, 8, 16, 2);
  EXPECT_THROW(fe::rome_delta(two.w0, two.cov, two.request, cfg), fe::Error);
}

TEST(Solvers, ZeroResidualGivesZeroDelta) {
  auto inst = fe::testing::random_instance(37, 3, 6, 20, 2);
  inst.request.values = inst.w0 * inst.request.keys;
  EXPECT_EQ(fe::memit_delta(inst.w0, inst.cov, inst.request, config_for(fe::Method::kMemit)).delta.norm(), 0.0);
  EXPECT_EQ(fe::emmet_delta(inst.w0, inst.cov, inst.request, config_for(fe::Method::kEmmet)).delta.norm(), 0.0);
}

TEST(Solvability, ThresholdAtDkMinusB) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto below = fe::testing::random_instance(300 + seed, 2, 12, 10, 1);
    const auto at = fe::testing::random_instance(300 + seed, 2, 12, 11, 1);
    EXPECT_FALSE(fe::check_solvability(below.cov, below.request, 1.0, 0.0).invertible);
    auto r = fe::check_solvability(at.cov, at.request, 1.0, 0.0);
    EXPECT_TRUE(r.invertible);
    EXPECT_TRUE(r.meets_minimum);
    EXPECT_EQ(r.theoretical_minimum, 11u);
  }
}

TEST(Objective, TraceFormEqualsExplicitForm) {
  const auto inst = fe::testing::random_instance(41, 4, 7, 30, 2);
  fe::Rng rng(2);
  const Matrix w = inst.w0 + fe::testing::gaussian(rng, 4, 7, 0.1);
  const auto t = fe::objective_value(w, inst.w0, inst.cov, inst.request, 3.0);
  const double explicit_form = 3.0 * ((w - inst.w0) * inst.k0).squaredNorm();
  EXPECT_LE(fe::testing::relative_error(t.preservation, explicit_form), 1e-9);
  EXPECT_DOUBLE_EQ(t.memorization, (w * inst.ke - inst.v).squaredNorm());
}

TEST(SolverConfig, Validation) {
  auto c = config_for(fe::Method::kMemit, 0.0);
  EXPECT_THROW(c.validate(), fe::Error);
  c = config_for(fe::Method::kMemit, 1.0, -1.0);
  EXPECT_THROW(c.validate(), fe::Error);
}
