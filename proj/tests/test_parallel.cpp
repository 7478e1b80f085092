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

TEST(LookaheadScores, SingleTokenIsZero) {
  castle::Rng rng(51);
  const auto proj = testutil::random_proj(rng, 1, 3);
  const Mat su = castle::compute_su_naive(proj, MaskKind::castle());
  ASSERT_EQ(su.rows(), 1u);
  EXPECT_EQ(su(0, 0), 0.0);
}

TEST(LookaheadScores, StrictlyLowerTriangularWithExactZeros) {
  castle::Rng rng(52);
  const auto proj = testutil::random_proj(rng, 16, 4);
  for (const auto kind : {MaskKind::castle(), MaskKind::castle_swl(3)}) {
    const Mat su = castle::compute_su_naive(proj, kind);
    for (std::size_t i = 0; i < 16; ++i) {
      for (std::size_t j = i; j < 16; ++j) EXPECT_EQ(su(i, j), 0.0);
    }
  }
}

TEST(LookaheadScores, TwoTokenClosedForm) {
  castle::Rng rng(53);
  const auto proj = testutil::random_proj(rng, 2, 4);
  const Mat su = castle::compute_su_naive(proj, MaskKind::castle());
  const double scale = 1.0 / 2.0;  // 1/sqrt(4)
  double carried = 0, gate_score = 0;
  for (std::size_t c = 0; c < 4; ++c) {
    carried += proj.causal_q(1, c) * proj.lookahead_v(1, c);
    gate_score += proj.lookahead_q(0, c) * proj.lookahead_k(1, c);
  }
  const double expected = carried * scale / (1.0 + std::exp(-gate_score * scale));
  EXPECT_NEAR(su(1, 0), expected, 1e-15);
}

TEST(LookaheadScores, RowsMatchScoresAgainstDirectLookaheadKeys) {
  castle::Rng rng(54);
  const auto proj = testutil::random_proj(rng, 6, 3);
  const double scale = castle::score_scale<double>(3);
  for (const auto kind : {MaskKind::castle(), MaskKind::castle_swl(2)}) {
    const Mat su = castle::compute_su_naive(proj, kind);
    for (std::size_t t = 1; t <= 6; ++t) {
      const Mat u = castle::lookahead_keys_direct(proj, t, kind);
      const Mat qrow = proj.causal_q.block(t - 1, 0, 1, 3);
      const Mat scores = castle::scaled(castle::matmul(qrow, u, true), scale);
      for (std::size_t j = 0; j < t; ++j) {
        EXPECT_NEAR(su(t - 1, j), scores(0, j), 1e-12) << "t=" << t << " j=" << j;
      }
    }
  }
}

TEST(ParallelForward, SingleTokenOutputsFirstValueRow) {
  castle::Rng rng(61);
  const auto proj = testutil::random_proj(rng, 1, 4);
  const Mat out = castle::parallel_forward(proj, MaskKind::castle());
  for (std::size_t c = 0; c < 4; ++c) EXPECT_DOUBLE_EQ(out(0, c), proj.causal_v(0, c));
}

TEST(ParallelForward, MatchesRecurrentReference) {
  castle::Rng rng(62);
  for (const std::size_t len : {5u, 8u}) {
    const auto proj = testutil::random_proj(rng, len, 4);
    for (const auto kind : {MaskKind::castle(), MaskKind::castle_swl(2)}) {
      const Mat rec = castle::recurrent_full(proj, kind);
      const Mat par = castle::parallel_forward(proj, kind);
      EXPECT_LE(castle::max_abs_diff(rec, par), 1e-12);
    }
  }
}

TEST(ParallelForward, ZeroLookaheadValuesReduceToStandardCausalBitwise) {
  castle::Rng rng(63);
  auto proj = testutil::random_proj(rng, 7, 3);
  proj.lookahead_v = Mat(7, 3);
  const Mat par = castle::parallel_forward(proj, MaskKind::castle());
  const Mat standard =
      castle::standard_causal_forward(proj.causal_q, proj.causal_k, proj.causal_v);
  EXPECT_TRUE(castle::exactly_equal(par, standard));
}

TEST(ParallelForward, GateMatrixOfPrefixIsTopLeftBlockOfFullGateBitwise) {
  castle::Rng rng(64);
  const auto proj = testutil::random_proj(rng, 10, 3);
  const double scale = castle::score_scale<double>(3);
  for (const auto kind : {MaskKind::castle(), MaskKind::castle_swl(3)}) {
    const Mat full_scores =
        castle::scaled(castle::matmul(proj.lookahead_q, proj.lookahead_k, true), scale);
    const Mat full_gate = castle::masked_sigmoid(full_scores, castle::build_lookahead_mask(10, kind));
    for (std::size_t t = 1; t <= 10; ++t) {
      const auto prefix = proj.prefix(t);
      const Mat scores =
          castle::scaled(castle::matmul(prefix.lookahead_q, prefix.lookahead_k, true), scale);
      const Mat gate = castle::masked_sigmoid(scores, castle::build_lookahead_mask(t, kind));
      EXPECT_TRUE(castle::exactly_equal(gate, full_gate.block(0, 0, t, t))) << "t=" << t;
    }
  }
}

TEST(ParallelForward, ScoreBundleProbabilitiesSumToOne) {
  castle::Rng rng(65);
  const auto proj = testutil::random_proj(rng, 6, 3);
  const auto bundle = castle::score_bundle(proj, MaskKind::castle());
  for (std::size_t i = 0; i < 6; ++i) {
    double sum = 0;
    for (std::size_t j = 0; j < 6; ++j) {
      sum += bundle.probs(i, j);
      if (j > i) {
        EXPECT_EQ(bundle.probs(i, j), 0.0);
        EXPECT_TRUE(std::isinf(bundle.logits(i, j)));
      }
    }
    EXPECT_NEAR(sum, 1.0, 1e-12);
  }
}

TEST(StandardCausal, SingleTokenAndUniformKeys) {
  castle::Rng rng(71);
  const Mat q = rng.normal_matrix<double>(5, 3);
  Mat k(5, 3);
  for (std::size_t i = 0; i < 5; ++i) {
    for (std::size_t c = 0; c < 3; ++c) k(i, c) = 0.7;
  }
  const Mat v = rng.normal_matrix<double>(5, 3);
  const Mat out = castle::standard_causal_forward(q, k, v);
  for (std::size_t t = 0; t < 5; ++t) {
    for (std::size_t c = 0; c < 3; ++c) {
      double mean = 0;
      for (std::size_t j = 0; j <= t; ++j) mean += v(j, c);
      mean /= static_cast<double>(t + 1);
      EXPECT_NEAR(out(t, c), mean, 1e-14);
    }
  }
}

TEST(StandardCausal, MatchesPerRowSoftmaxOracle) {
  castle::Rng rng(72);
  const Mat q = rng.normal_matrix<double>(5, 4);
  const Mat k = rng.normal_matrix<double>(5, 4);
  const Mat v = rng.normal_matrix<double>(5, 4);
  const Mat out = castle::standard_causal_forward(q, k, v);
  const long double scale = 0.5L;  // 1/sqrt(4)
  for (std::size_t t = 0; t < 5; ++t) {
    std::vector<double> logits(t + 1);
    for (std::size_t j = 0; j <= t; ++j) {
      long double dot = 0;
      for (std::size_t c = 0; c < 4; ++c) dot += static_cast<long double>(q(t, c)) * k(j, c);
      logits[j] = static_cast<double>(dot * scale);
    }
    const auto p = oracle::softmax_ld(logits);
    for (std::size_t c = 0; c < 4; ++c) {
      long double acc = 0;
      for (std::size_t j = 0; j <= t; ++j) acc += p[j] * v(j, c);
      EXPECT_NEAR(out(t, c), static_cast<double>(acc), 1e-13);
    }
  }
}

TEST(ParallelBackward, ZeroUpstreamGivesExactZeroGrads) {
  castle::Rng rng(81);
  const auto proj = testutil::random_proj(rng, 5, 3);
  const Mat upstream(5, 3);
  const auto g = castle::parallel_backward_reference(proj, MaskKind::castle(), upstream);
  EXPECT_EQ(castle::max_abs(g.lookahead_q), 0.0);
  EXPECT_EQ(castle::max_abs(g.lookahead_k), 0.0);
  EXPECT_EQ(castle::max_abs(g.lookahead_v), 0.0);
  EXPECT_EQ(castle::max_abs(g.causal_q), 0.0);
  EXPECT_EQ(castle::max_abs(g.causal_k), 0.0);
  EXPECT_EQ(castle::max_abs(g.causal_v), 0.0);
}

TEST(ParallelBackward, MatchesFiniteDifferences) {
  castle::Rng rng(82);
  const auto proj = testutil::random_proj(rng, 6, 3);
  const Mat upstream = rng.normal_matrix<double>(6, 3);
  for (const auto kind : {MaskKind::castle(), MaskKind::castle_swl(2)}) {
    const auto analytic = castle::parallel_backward_reference(proj, kind, upstream);
    const auto fd = testutil::fd_proj_grads(proj, [&](const castle::ProjectedSeq<double>& p) {
      const Mat out = castle::parallel_forward(p, kind);
      double loss = 0;
      for (std::size_t i = 0; i < 6; ++i) {
        for (std::size_t c = 0; c < 3; ++c) loss += out(i, c) * upstream(i, c);
      }
      return loss;
    });
    EXPECT_LE(castle::max_rel_diff(analytic.lookahead_q, fd.lookahead_q), 1e-6);
    EXPECT_LE(castle::max_rel_diff(analytic.lookahead_k, fd.lookahead_k), 1e-6);
    EXPECT_LE(castle::max_rel_diff(analytic.lookahead_v, fd.lookahead_v), 1e-6);
    EXPECT_LE(castle::max_rel_diff(analytic.causal_q, fd.causal_q), 1e-6);
    EXPECT_LE(castle::max_rel_diff(analytic.causal_k, fd.causal_k), 1e-6);
    EXPECT_LE(castle::max_rel_diff(analytic.causal_v, fd.causal_v), 1e-6);
  }
}

TEST(ParallelBackward, UpstreamSupportedOnOneRowLeavesFutureGradsExactlyZero) {
  castle::Rng rng(83);
  const auto proj = testutil::random_proj(rng, 7, 3);
  Mat upstream(7, 3);
  const std::size_t t = 3;
  upstream(t, 0) = 1.0;
  upstream(t, 2) = -0.5;
  const auto g = castle::parallel_backward_reference(proj, MaskKind::castle(), upstream);
  for (std::size_t i = t + 1; i < 7; ++i) {
    for (std::size_t c = 0; c < 3; ++c) {
      EXPECT_EQ(g.lookahead_q(i, c), 0.0);
      EXPECT_EQ(g.lookahead_k(i, c), 0.0);
      EXPECT_EQ(g.lookahead_v(i, c), 0.0);
      EXPECT_EQ(g.causal_q(i, c), 0.0);
      EXPECT_EQ(g.causal_k(i, c), 0.0);
      EXPECT_EQ(g.causal_v(i, c), 0.0);
    }
  }
}

TEST(ParallelBackward, UpstreamShapeMismatchThrows) {
  castle::Rng rng(84);
  const auto proj = testutil::random_proj(rng, 4, 3);
  EXPECT_THROW(castle::parallel_backward_reference(proj, MaskKind::castle(), Mat(3, 3)),
               std::invalid_argument);
}

}  // namespace
