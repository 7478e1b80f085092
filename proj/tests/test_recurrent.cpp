#include <gtest/gtest.h>

#include <cmath>

#include "castle/parallel.hpp"
#include "castle/recurrent.hpp"
#include "castle/rng.hpp"
#include "oracles.hpp"
#include "testutil.hpp"

namespace {

using castle::Mat;
using castle::MaskKind;

TEST(Project, IdentityWeightsCopyInput) {
  castle::Rng rng(11);
  const Mat x = rng.normal_matrix<double>(5, 3);
  castle::HeadParams<double> params{Mat::identity(3), Mat::identity(3),
                                    Mat::identity(3), Mat::identity(3),
                                    Mat::identity(3), Mat::identity(3)};
  const auto proj = castle::project(x, params);
  EXPECT_TRUE(castle::exactly_equal(proj.lookahead_q, x));
  EXPECT_TRUE(castle::exactly_equal(proj.causal_v, x));
  EXPECT_EQ(proj.seq_len(), 5u);
  EXPECT_EQ(proj.head_dim(), 3u);
}

TEST(Project, MatchesReferenceMatmulPerSequence) {
  castle::Rng rng(12);
  const Mat x = rng.normal_matrix<double>(4, 6);
  const auto params = testutil::random_params(rng, 6, 2);
  const auto proj = castle::project(x, params);
  EXPECT_LE(castle::max_abs_diff(proj.lookahead_q, oracle::matmul_ref(x, params.lookahead_q)), 1e-12);
  EXPECT_LE(castle::max_abs_diff(proj.lookahead_k, oracle::matmul_ref(x, params.lookahead_k)), 1e-12);
  EXPECT_LE(castle::max_abs_diff(proj.lookahead_v, oracle::matmul_ref(x, params.lookahead_v)), 1e-12);
  EXPECT_LE(castle::max_abs_diff(proj.causal_q, oracle::matmul_ref(x, params.causal_q)), 1e-12);
  EXPECT_LE(castle::max_abs_diff(proj.causal_k, oracle::matmul_ref(x, params.causal_k)), 1e-12);
  EXPECT_LE(castle::max_abs_diff(proj.causal_v, oracle::matmul_ref(x, params.causal_v)), 1e-12);
}

TEST(Project, PerturbingOneTokenOnlyChangesItsRows) {
  castle::Rng rng(13);
  Mat x = rng.normal_matrix<double>(6, 4);
  const auto params = testutil::random_params(rng, 4, 3);
  const auto before = castle::project(x, params);
  x(3, 1) += 0.5;
  const auto after = castle::project(x, params);
  for (std::size_t i = 0; i < 6; ++i) {
    if (i == 3) continue;
    for (std::size_t c = 0; c < 3; ++c) {
      EXPECT_EQ(before.causal_q(i, c), after.causal_q(i, c));
      EXPECT_EQ(before.lookahead_k(i, c), after.lookahead_k(i, c));
    }
  }
  EXPECT_NE(before.causal_q(3, 0), after.causal_q(3, 0));
}

TEST(LookaheadKeys, SingleTokenPrefixIsZeroRow) {
  castle::Rng rng(21);
  const auto proj = testutil::random_proj(rng, 4, 3);
  for (const auto kind : {MaskKind::castle(), MaskKind::castle_swl(2)}) {
    const Mat u = castle::lookahead_keys_direct(proj, 1, kind);
    ASSERT_EQ(u.rows(), 1u);
    for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(u(0, c), 0.0);
  }
}

TEST(LookaheadKeys, NewestRowIsAlwaysExactlyZero) {
  castle::Rng rng(22);
  const auto proj = testutil::random_proj(rng, 7, 2);
  for (const auto kind : {MaskKind::castle(), MaskKind::castle_swl(1), MaskKind::castle_swl(3)}) {
    for (std::size_t t = 1; t <= 7; ++t) {
      const Mat u = castle::lookahead_keys_direct(proj, t, kind);
      ASSERT_EQ(u.rows(), t);
      for (std::size_t c = 0; c < 2; ++c) EXPECT_EQ(u(t - 1, c), 0.0);
    }
  }
}

TEST(LookaheadKeys, TwoTokenClosedForm) {
  castle::Rng rng(23);
  const auto proj = testutil::random_proj(rng, 2, 3);
  const Mat u = castle::lookahead_keys_direct(proj, 2, MaskKind::castle());
  double dot = 0;
  for (std::size_t c = 0; c < 3; ++c) dot += proj.lookahead_q(0, c) * proj.lookahead_k(1, c);
  const double gate = 1.0 / (1.0 + std::exp(-dot / std::sqrt(3.0)));
  for (std::size_t c = 0; c < 3; ++c) {
    EXPECT_NEAR(u(0, c), gate * proj.lookahead_v(1, c), 1e-15);
    EXPECT_EQ(u(1, c), 0.0);
  }
}

TEST(LookaheadKeys, MatchesScalarOracleAtEveryPrefix) {
  castle::Rng rng(24);
  const auto proj = testutil::random_proj(rng, 9, 3);
  struct Case {
    MaskKind kind;
    bool windowed;
    std::size_t window;
  };
  const Case cases[] = {{MaskKind::castle(), false, 0},
                        {MaskKind::castle_swl(1), true, 1},
                        {MaskKind::castle_swl(4), true, 4}};
  for (const auto& cs : cases) {
    for (std::size_t t = 1; t <= 9; ++t) {
      const Mat u = castle::lookahead_keys_direct(proj, t, cs.kind);
      const auto ref = oracle::lookahead_keys_ref(proj.lookahead_q, proj.lookahead_k,
                                                  proj.lookahead_v, t, cs.windowed, cs.window);
      for (std::size_t s = 0; s < t; ++s) {
        for (std::size_t c = 0; c < 3; ++c) {
          EXPECT_NEAR(u(s, c), static_cast<double>(ref[s][c]), 1e-13);
        }
      }
    }
  }
}

TEST(LookaheadKeys, RowsOutsideAWindowIgnoreFarFutureTokens) {
  castle::Rng rng(25);
  const auto proj = testutil::random_proj(rng, 8, 2);
  auto bumped = proj;
  const std::size_t m = 6;
  bumped.lookahead_q(m, 0) += 1.0;
  bumped.lookahead_k(m, 1) -= 2.0;
  bumped.lookahead_v(m, 0) += 0.25;
  const auto kind = MaskKind::castle_swl(2);
  const Mat u = castle::lookahead_keys_direct(proj, 8, kind);
  const Mat u2 = castle::lookahead_keys_direct(bumped, 8, kind);
  for (std::size_t s = 0; s < 8; ++s) {
    const bool affected = s == m || kind.allows(s, m);
    for (std::size_t c = 0; c < 2; ++c) {
      if (affected) continue;
      EXPECT_EQ(u(s, c), u2(s, c)) << "row " << s;
    }
  }
  EXPECT_NE(u(m - 1, 0), u2(m - 1, 0));
}

TEST(RecurrentStep, FirstTokenOutputsFirstValueRow) {
  castle::Rng rng(31);
  const auto proj = testutil::random_proj(rng, 5, 4);
  const Mat out = castle::recurrent_step(proj, 1, MaskKind::castle());
  ASSERT_EQ(out.rows(), 1u);
  for (std::size_t c = 0; c < 4; ++c) EXPECT_DOUBLE_EQ(out(0, c), proj.causal_v(0, c));
}

TEST(RecurrentStep, ZeroLookaheadValuesReduceToStandardCausalAttention) {
  castle::Rng rng(32);
  auto proj = testutil::random_proj(rng, 6, 3);
  proj.lookahead_v = Mat(6, 3);
  const Mat standard =
      castle::standard_causal_forward(proj.causal_q, proj.causal_k, proj.causal_v);
  for (std::size_t t = 1; t <= 6; ++t) {
    const Mat row = castle::recurrent_step(proj, t, MaskKind::castle());
    for (std::size_t c = 0; c < 3; ++c) {
      EXPECT_NEAR(row(0, c), standard(t - 1, c), 1e-14);
    }
  }
}

TEST(RecurrentStep, MatchesScalarTranscript) {
  castle::Rng rng(33);
  const auto proj = testutil::random_proj(rng, 3, 2);
  struct Case {
    MaskKind kind;
    bool windowed;
    std::size_t window;
  };
  const Case cases[] = {{MaskKind::castle(), false, 0}, {MaskKind::castle_swl(1), true, 1}};
  for (const auto& cs : cases) {
    for (std::size_t t = 1; t <= 3; ++t) {
      const Mat row = castle::recurrent_step(proj, t, cs.kind);
      const auto ref = oracle::attention_row_ref(proj.lookahead_q, proj.lookahead_k,
                                                 proj.lookahead_v, proj.causal_q,
                                                 proj.causal_k, proj.causal_v, t,
                                                 cs.windowed, cs.window);
      for (std::size_t c = 0; c < 2; ++c) EXPECT_NEAR(row(0, c), ref[c], 1e-14);
    }
  }
}

TEST(RecurrentStep, AttentionWeightsAreAProbabilityRow) {
  castle::Rng rng(34);
  const auto proj = testutil::random_proj(rng, 7, 3);
  for (std::size_t t = 1; t <= 7; ++t) {
    const Mat w = castle::recurrent_step_weights(proj, t, MaskKind::castle());
    ASSERT_EQ(w.cols(), t);
    double sum = 0;
    for (std::size_t j = 0; j < t; ++j) {
      EXPECT_GE(w(0, j), 0.0);
      sum += w(0, j);
    }
    EXPECT_NEAR(sum, 1.0, 1e-12);
  }
}

TEST(RecurrentStep, OutOfRangePositionThrows) {
  castle::Rng rng(35);
  const auto proj = testutil::random_proj(rng, 4, 2);
  EXPECT_THROW(castle::recurrent_step(proj, 0, MaskKind::castle()), std::invalid_argument);
  EXPECT_THROW(castle::recurrent_step(proj, 5, MaskKind::castle()), std::invalid_argument);
}

TEST(RecurrentFull, SingleTokenSequence) {
  castle::Rng rng(41);
  const auto proj = testutil::random_proj(rng, 1, 3);
  const Mat out = castle::recurrent_full(proj, MaskKind::castle());
  ASSERT_EQ(out.rows(), 1u);
  for (std::size_t c = 0; c < 3; ++c) EXPECT_DOUBLE_EQ(out(0, c), proj.causal_v(0, c));
}

TEST(RecurrentFull, StacksPerTokenSteps) {
  castle::Rng rng(42);
  const auto proj = testutil::random_proj(rng, 6, 3);
  for (const auto kind : {MaskKind::castle(), MaskKind::castle_swl(2)}) {
    const Mat full = castle::recurrent_full(proj, kind);
    for (std::size_t t = 1; t <= 6; ++t) {
      const Mat row = castle::recurrent_step(proj, t, kind);
      for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(full(t - 1, c), row(0, c));
    }
  }
}

TEST(RecurrentFull, FutureTokenPerturbationLeavesPastRowsBitwiseUnchanged) {
  castle::Rng rng(43);
  Mat x = rng.normal_matrix<double>(8, 4);
  const auto params = testutil::random_params(rng, 4, 3);
  const auto kind = MaskKind::castle();
  const Mat before = castle::recurrent_full(castle::project(x, params), kind);
  const std::size_t j = 5;
  x(j, 2) += 3.0;
  const Mat after = castle::recurrent_full(castle::project(x, params), kind);
  for (std::size_t i = 0; i < j; ++i) {
    for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(before(i, c), after(i, c));
  }
  bool future_changed = false;
  for (std::size_t c = 0; c < 3; ++c) future_changed |= before(j, c) != after(j, c);
  EXPECT_TRUE(future_changed);
}

TEST(RecurrentFull, WindowCoveringWholeSequenceMatchesUnwindowedBitwise) {
  castle::Rng rng(44);
  const auto proj = testutil::random_proj(rng, 9, 3);
  const Mat full = castle::recurrent_full(proj, MaskKind::castle());
  const Mat wide = castle::recurrent_full(proj, MaskKind::castle_swl(8));
  const Mat wider = castle::recurrent_full(proj, MaskKind::castle_swl(40));
  EXPECT_TRUE(castle::exactly_equal(full, wide));
  EXPECT_TRUE(castle::exactly_equal(full, wider));
}

TEST(RecurrentFull, MismatchedProjectionShapesThrow) {
  castle::Rng rng(45);
  auto proj = testutil::random_proj(rng, 4, 3);
  proj.lookahead_k = Mat(3, 3);
  EXPECT_THROW(castle::recurrent_full(proj, MaskKind::castle()), std::invalid_argument);
}

}  // namespace
