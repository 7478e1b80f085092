#pragma once

#include <cstddef>

#include "castle/masks.hpp"
#include "castle/matrix.hpp"
#include "castle/numeric.hpp"
#include "castle/recurrent.hpp"

namespace castle {

// Lookahead score matrix for the whole sequence in one shot:
//   S = (Qc Vu^T / sqrt(d) . causal_indicator) * gate(Qu Ku^T / sqrt(d))^T
// Row t of S reproduces the per-token lookahead scores of the recurrent
// definition. The matrix is strictly lower triangular; entries on or above
// the diagonal are exact zeros (every summand carries an exactly-zeroed
// factor from one of the two masks), and we pin them to 0.0 explicitly so
// downstream consumers can rely on bitwise zeros.
template <typename T>
Matrix<T> compute_su_naive(const ProjectedSeq<T>& proj, const MaskKind& kind) {
  const std::size_t L = proj.seq_len();
  const T scale = score_scale<T>(proj.head_dim());

  Matrix<T> carried = matmul(proj.causal_q, proj.lookahead_v, /*transpose_b=*/true);
  carried *= scale;
  carried = hadamard(carried, build_causal_indicator<T>(L));

  Matrix<T> gate_scores = matmul(proj.lookahead_q, proj.lookahead_k, /*transpose_b=*/true);
  gate_scores *= scale;
  const Matrix<T> gate = masked_sigmoid(gate_scores, build_lookahead_mask(L, kind));

  Matrix<T> su = matmul(carried, gate, /*transpose_b=*/true);
  for (std::size_t i = 0; i < L; ++i)
    for (std::size_t j = i; j < L; ++j) su(i, j) = T{0};
  return su;
}

// The three score stages of the whole-sequence forward pass.
template <typename T>
struct ScoreBundle {
  Matrix<T> lookahead_scores;  // strictly lower triangular (L x L)
  Matrix<T> logits;            // causal scores - silu(lookahead), -inf above diagonal
  Matrix<T> probs;             // row-stochastic attention weights
};

template <typename T>
ScoreBundle<T> score_bundle(const ProjectedSeq<T>& proj, const MaskKind& kind) {
  proj.validate();
  const std::size_t L = proj.seq_len();
  const T scale = score_scale<T>(proj.head_dim());
  ScoreBundle<T> bundle;
  bundle.lookahead_scores = compute_su_naive(proj, kind);
  Matrix<T> causal_scores = matmul(proj.causal_q, proj.causal_k, /*transpose_b=*/true);
  causal_scores *= scale;
  bundle.logits = causal_scores + build_causal_additive<T>(L) -
                  silu_map(bundle.lookahead_scores);
  bundle.probs = row_softmax_stable(bundle.logits);
  return bundle;
}

// Whole-sequence forward pass; token-for-token equal to the recurrent path.
template <typename T>
Matrix<T> parallel_forward(const ProjectedSeq<T>& proj, const MaskKind& kind) {
  const ScoreBundle<T> bundle = score_bundle(proj, kind);
  return matmul(bundle.probs, proj.causal_v);
}

// Plain causal softmax attention, used as the baseline for parameter and
// flop comparisons and as the degenerate case when the lookahead gate is off.
template <typename T>
Matrix<T> standard_causal_forward(const Matrix<T>& q, const Matrix<T>& k,
                                  const Matrix<T>& v) {
  if (q.cols() != k.cols() || k.rows() != v.rows()) {
    throw std::invalid_argument("standard_causal_forward: shape mismatch");
  }
  Matrix<T> scores = matmul(q, k, /*transpose_b=*/true);
  scores *= score_scale<T>(q.cols());
  scores += build_causal_additive<T>(q.rows());
  return matmul(row_softmax_stable(scores), v);
}

// Reference backward pass for the whole-sequence form: plain chain rule on
// dense materialized score matrices. Deliberately simple and memory-hungry;
// the tiled backward is validated against it.
template <typename T>
Grads<T> parallel_backward_reference(const ProjectedSeq<T>& proj,
                                     const MaskKind& kind,
                                     const Matrix<T>& upstream) {
  proj.validate();
  const std::size_t L = proj.seq_len();
  const std::size_t d = proj.head_dim();
  if (upstream.rows() != L || upstream.cols() != d) {
    throw std::invalid_argument("parallel_backward_reference: upstream shape mismatch");
  }
  const T scale = score_scale<T>(d);

  // Forward recompute, keeping the intermediates the chain rule needs.
  Matrix<T> carried = matmul(proj.causal_q, proj.lookahead_v, /*transpose_b=*/true);
  carried *= scale;
  const Matrix<T> causal_ind = build_causal_indicator<T>(L);
  carried = hadamard(carried, causal_ind);

  Matrix<T> gate_scores = matmul(proj.lookahead_q, proj.lookahead_k, /*transpose_b=*/true);
  gate_scores *= scale;
  const Matrix<T> gate = masked_sigmoid(gate_scores, build_lookahead_mask(L, kind));

  Matrix<T> su = matmul(carried, gate, /*transpose_b=*/true);
  for (std::size_t i = 0; i < L; ++i)
    for (std::size_t j = i; j < L; ++j) su(i, j) = T{0};

  Matrix<T> causal_scores = matmul(proj.causal_q, proj.causal_k, /*transpose_b=*/true);
  causal_scores *= scale;
  const Matrix<T> logits =
      causal_scores + build_causal_additive<T>(L) - silu_map(su);
  const Matrix<T> probs = row_softmax_stable(logits);

  Grads<T> g = Grads<T>::zeros(L, d);

  // Through the output product O = probs * Vc.
  const Matrix<T> d_probs = matmul(upstream, proj.causal_v, /*transpose_b=*/true);
  g.causal_v += matmul(probs.transposed(), upstream);

  // Through the softmax: dA = P . (dP - rowsum(dP . P)).
  Matrix<T> d_logits(L, L);
  for (std::size_t i = 0; i < L; ++i) {
    T row_dot{};
    for (std::size_t j = 0; j < L; ++j) row_dot += d_probs(i, j) * probs(i, j);
    for (std::size_t j = 0; j < L; ++j) {
      d_logits(i, j) = probs(i, j) * (d_probs(i, j) - row_dot);
    }
  }

  // Causal-score term.
  g.causal_q += scaled(matmul(d_logits, proj.causal_k), scale);
  g.causal_k += scaled(matmul(d_logits.transposed(), proj.causal_q), scale);

  // Lookahead-score term: logits subtract silu(su).
  Matrix<T> d_su = hadamard(silu_grad_map(su), d_logits);
  d_su *= T{-1};

  // su = carried * gate^T.
  const Matrix<T> d_carried = hadamard(matmul(d_su, gate), causal_ind);
  const Matrix<T> d_gate = matmul(d_su.transposed(), carried);

  g.causal_q += scaled(matmul(d_carried, proj.lookahead_v), scale);
  g.lookahead_v += scaled(matmul(d_carried.transposed(), proj.causal_q), scale);

  // Through the gate sigmoid; blocked entries carry gate == 0 and stay zero.
  const Matrix<T> d_gate_scores = hadamard(d_gate, sigmoid_grad_from_value(gate));
  g.lookahead_q += scaled(matmul(d_gate_scores, proj.lookahead_k), scale);
  g.lookahead_k += scaled(matmul(d_gate_scores.transposed(), proj.lookahead_q), scale);

  return g;
}

}  // namespace castle
