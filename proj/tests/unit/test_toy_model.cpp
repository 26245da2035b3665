#include <gtest/gtest.h>

#include <filesystem>

#include "fastedit/toy_model.hpp"
#include "support/oracles.hpp"

namespace fe = fastedit;
using fe::Matrix;
using fe::TokenSeq;
using fe::Vector;

namespace {

fe::ToyModel small_model(std::uint64_t seed = 3) {
  auto c = fe::ToyModelConfig::with_hidden(8, seed);
  c.vocab_size = 50;
  c.num_layers = 3;
  c.max_sequence = 12;
  return fe::build_toy_model(c);
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("fastedit_toy_" + name);
}

}  // namespace

TEST(ToyModel, SameSeedSameWeights) {
  const auto a = small_model(3), b = small_model(3), c = small_model(4);
  EXPECT_EQ(fe::serialize_model(a), fe::serialize_model(b));
  EXPECT_NE(fe::model_checksum(a), fe::model_checksum(c));
}

TEST(ToyModel, ConfigValidation) {
  auto c = fe::ToyModelConfig::with_hidden(8, 1);
  c.mlp_dim = 30;
  EXPECT_THROW(c.validate(), fe::Error);
  c = fe::ToyModelConfig::with_hidden(0, 1);
  EXPECT_THROW(c.validate(), fe::Error);
}

TEST(ToyModel, ForwardShapesAndCausality) {
  const auto m = small_model();
  const TokenSeq a{1, 2, 3, 4}, b{1, 2, 3, 9};
  const auto ta = fe::forward(m, a), tb = fe::forward(m, b);
  EXPECT_EQ(ta.logits.rows(), 4);
  EXPECT_EQ(ta.logits.cols(), 50);
  ASSERT_EQ(ta.keys.size(), 3u);
  EXPECT_EQ(ta.keys[1].cols(), 32);
  // Changing the last token leaves earlier positions untouched.
  EXPECT_EQ(ta.logits.topRows(3), tb.logits.topRows(3));
  EXPECT_NE(ta.logits.row(3), tb.logits.row(3));
}

TEST(ToyModel, RejectsBadTokens) {
  const auto m = small_model();
  EXPECT_THROW(fe::forward(m, TokenSeq{}), fe::Error);
  EXPECT_THROW(fe::forward(m, TokenSeq{1, 50}), fe::Error);
  EXPECT_THROW(fe::forward(m, TokenSeq(13, 1)), fe::Error);
}

TEST(ToyModel, KeyIsDownProjectionInput) {
  const auto m = small_model();
  const TokenSeq s{5, 6, 7};
  const Vector k = fe::extract_key(m, 1, s, 1);
  const auto tr = fe::forward(m, s);
  EXPECT_EQ(k, Vector(tr.keys[1].row(1).transpose()));
  EXPECT_EQ(fe::mlp_output(m, 1, s, 1), Vector(m.down(1) * k));
}

TEST(ToyModel, OverrideWithOwnOutputIsNoOp) {
  const auto m = small_model();
  const TokenSeq s{5, 6, 7, 8};
  const fe::MlpOverride ov{1, 2, fe::mlp_output(m, 1, s, 2)};
  EXPECT_LE((fe::forward(m, s, &ov).logits - fe::forward(m, s).logits).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(ToyModel, LogSoftmaxNormalizes) {
  const auto m = small_model();
  const Vector lp = fe::next_token_log_probs(m, TokenSeq{1, 2});
  EXPECT_NEAR(lp.array().exp().sum(), 1.0, 1e-12);
}

TEST(ToyModel, ValueGradientMatchesFiniteDifferences) {
  const auto m = small_model();
  const TokenSeq s{3, 14, 15, 9, 2};
  for (std::size_t layer : {0u, 1u, 2u}) {
    const Vector v0 = fe::mlp_output(m, layer, s, 1);
    const auto g = fe::value_gradient(m, layer, s, 1, v0, 7);
    auto f = [&](const Vector& v) { return fe::value_gradient(m, layer, s, 1, v, 7).log_prob; };
    EXPECT_LE(fe::testing::max_fd_relative_error(f, v0, g.gradient, 1e-5), 1e-4) << "layer " << layer;
  }
}

TEST(ToyModel, SolveValueRaisesTargetProbability) {
  const auto m = small_model();
  const TokenSeq s{3, 14, 15};
  const auto sol = fe::solve_value(m, 1, s, 1, 11, 25, 8.0);
  EXPECT_GT(sol.final_log_prob, sol.initial_log_prob);
  EXPECT_THROW(fe::solve_value(m, 1, s, 1, 11, 0, 1.0), fe::Error);
  EXPECT_THROW(fe::solve_value(m, 1, s, 1, 99, 5, 1.0), fe::Error);
}

TEST(ToyModel, ApplyEditChangesOnlyOneLayer) {
  const auto m = small_model();
  Matrix delta = Matrix::Constant(8, 32, 0.01);
  const auto e = fe::apply_edit(m, 1, delta);
  EXPECT_EQ(e.down(0), m.down(0));
  EXPECT_EQ(e.down(1), m.down(1) + delta);
  EXPECT_EQ(e.down(2), m.down(2));
  EXPECT_EQ(fe::apply_edit(m, 1, Matrix::Zero(8, 32)).down(1), m.down(1));
  EXPECT_THROW(fe::apply_edit(m, 1, Matrix::Zero(8, 31)), fe::Error);
  EXPECT_THROW(fe::apply_edit(m, 3, delta), fe::Error);
}

TEST(Checkpoint, RoundTripIsBitwise) {
  const auto m = small_model();
  const auto bytes = fe::serialize_model(m);
  const auto back = fe::deserialize_model(bytes);
  EXPECT_EQ(fe::serialize_model(back), bytes);
  const auto path = temp_path("roundtrip.edkt");
  fe::save_model(m, path);
  EXPECT_EQ(fe::io::read_file(path), bytes);
  EXPECT_EQ(fe::model_checksum(fe::load_model(path)), fe::model_checksum(m));
  std::filesystem::remove(path);
}

TEST(Checkpoint, DetectsCorruptionTruncationAndVersion) {
  const auto bytes = fe::serialize_model(small_model());
  auto expect_kind = [](std::vector<std::uint8_t> b, fe::ErrorKind kind) {
    try {
      fe::deserialize_model(b);
      ADD_FAILURE() << "expected failure";
    } catch (const fe::Error& e) {
      EXPECT_EQ(e.kind(), kind) << e.what();
    }
  };
  auto flipped = bytes;
  flipped[bytes.size() / 2] ^= 0x40;
  expect_kind(flipped, fe::ErrorKind::kCorruption);
  expect_kind(std::vector<std::uint8_t>(bytes.begin(), bytes.begin() + 40), fe::ErrorKind::kCorruption);
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  expect_kind(bad_magic, fe::ErrorKind::kCorruption);
  auto bumped = bytes;
  bumped[4] = 2;
  expect_kind(bumped, fe::ErrorKind::kIncompatibleVersion);
}

TEST(Checkpoint, MissingFileIsIoError) {
  try {
    fe::load_model(temp_path("does_not_exist.edkt"));
    FAIL();
  } catch (const fe::Error& e) {
    EXPECT_EQ(e.kind(), fe::ErrorKind::kIo);
  }
}
