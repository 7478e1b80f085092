#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>

#include "castle/masks.hpp"
#include "castle/matrix.hpp"
#include "castle/numeric.hpp"
#include "castle/rng.hpp"

namespace castle {

// Per-head projection weights. Each token is projected twice over: once for
// the lookahead gate (q/k/v) and once for the causal attention (q/k/v), so a
// head carries six hidden_dim x head_dim weight matrices.
template <typename T>
struct HeadParams {
  Matrix<T> lookahead_q, lookahead_k, lookahead_v;
  Matrix<T> causal_q, causal_k, causal_v;
};

// The six projected sequences for one head, each seq_len x head_dim.
template <typename T>
struct ProjectedSeq {
  Matrix<T> lookahead_q, lookahead_k, lookahead_v;
  Matrix<T> causal_q, causal_k, causal_v;

  std::size_t seq_len() const noexcept { return causal_q.rows(); }
  std::size_t head_dim() const noexcept { return causal_q.cols(); }

  // The projections of the first t tokens.
  ProjectedSeq prefix(std::size_t t) const {
    return ProjectedSeq{lookahead_q.top_rows(t), lookahead_k.top_rows(t),
                        lookahead_v.top_rows(t), causal_q.top_rows(t),
                        causal_k.top_rows(t),    causal_v.top_rows(t)};
  }

  void validate() const {
    const std::size_t L = causal_q.rows();
    const std::size_t d = causal_q.cols();
    if (d == 0) throw std::invalid_argument("ProjectedSeq: head_dim must be >= 1");
    for (const Matrix<T>* m : {&lookahead_q, &lookahead_k, &lookahead_v,
                               &causal_q, &causal_k, &causal_v}) {
      if (m->rows() != L || m->cols() != d) {
        throw std::invalid_argument("ProjectedSeq: inconsistent shapes");
      }
    }
  }
};

// Gradients of a scalar loss with respect to the six projected sequences.
template <typename T>
struct Grads {
  Matrix<T> lookahead_q, lookahead_k, lookahead_v;
  Matrix<T> causal_q, causal_k, causal_v;

  static Grads zeros(std::size_t seq_len, std::size_t head_dim) {
    Matrix<T> z(seq_len, head_dim);
    return Grads{z, z, z, z, z, z};
  }

  Grads& operator+=(const Grads& o) {
    lookahead_q += o.lookahead_q;
    lookahead_k += o.lookahead_k;
    lookahead_v += o.lookahead_v;
    causal_q += o.causal_q;
    causal_k += o.causal_k;
    causal_v += o.causal_v;
    return *this;
  }
};

// ---- random instance generators -------------------------------------------
// Score scaling keeps logits O(1): projections are drawn standard normal,
// inputs standard normal scaled by 1/sqrt(hidden_dim).

template <typename T = double>
ProjectedSeq<T> make_random_proj(Rng& rng, std::size_t seq_len, std::size_t head_dim) {
  return ProjectedSeq<T>{rng.normal_matrix<T>(seq_len, head_dim),
                         rng.normal_matrix<T>(seq_len, head_dim),
                         rng.normal_matrix<T>(seq_len, head_dim),
                         rng.normal_matrix<T>(seq_len, head_dim),
                         rng.normal_matrix<T>(seq_len, head_dim),
                         rng.normal_matrix<T>(seq_len, head_dim)};
}

template <typename T = double>
HeadParams<T> make_random_head_params(Rng& rng, std::size_t hidden_dim,
                                      std::size_t head_dim) {
  return HeadParams<T>{rng.normal_matrix<T>(hidden_dim, head_dim),
                       rng.normal_matrix<T>(hidden_dim, head_dim),
                       rng.normal_matrix<T>(hidden_dim, head_dim),
                       rng.normal_matrix<T>(hidden_dim, head_dim),
                       rng.normal_matrix<T>(hidden_dim, head_dim),
                       rng.normal_matrix<T>(hidden_dim, head_dim)};
}

template <typename T>
T score_scale(std::size_t head_dim) {
  return T{1} / std::sqrt(static_cast<T>(head_dim));
}

// Applies the six projections row-wise: token i depends only on row i of x.
template <typename T>
ProjectedSeq<T> project(const Matrix<T>& x, const HeadParams<T>& params) {
  return ProjectedSeq<T>{matmul(x, params.lookahead_q), matmul(x, params.lookahead_k),
                         matmul(x, params.lookahead_v), matmul(x, params.causal_q),
                         matmul(x, params.causal_k),    matmul(x, params.causal_v)};
}

// Lookahead keys for the first t tokens, computed directly from the
// definition: U = gate(Qu Ku^T / sqrt(d), mask) * Vu restricted to the
// prefix. Row t-1 of the result is always exactly zero because the newest
// token has no future inside the prefix.
template <typename T>
Matrix<T> lookahead_keys_direct(const ProjectedSeq<T>& proj, std::size_t t,
                                const MaskKind& kind) {
  if (t < 1 || t > proj.seq_len()) {
    throw std::invalid_argument("lookahead_keys_direct: t out of range");
  }
  const Matrix<T> qu = proj.lookahead_q.top_rows(t);
  const Matrix<T> ku = proj.lookahead_k.top_rows(t);
  const Matrix<T> vu = proj.lookahead_v.top_rows(t);
  Matrix<T> scores = matmul(qu, ku, /*transpose_b=*/true);
  scores *= score_scale<T>(proj.head_dim());
  const Matrix<T> gate = masked_sigmoid(scores, build_lookahead_mask(t, kind));
  return matmul(gate, vu);
}

// Attention weights of token t (1-based) over its causal prefix:
// softmax(q_c K_c^T / sqrt(d) - silu(q_c U^T / sqrt(d))), a 1 x t row.
template <typename T>
Matrix<T> recurrent_step_weights(const ProjectedSeq<T>& proj, std::size_t t,
                                 const MaskKind& kind) {
  if (t < 1 || t > proj.seq_len()) {
    throw std::invalid_argument("recurrent_step_weights: t out of range");
  }
  const T scale = score_scale<T>(proj.head_dim());
  const Matrix<T> q = proj.causal_q.row(t - 1);
  Matrix<T> causal_scores = matmul(q, proj.causal_k.top_rows(t), /*transpose_b=*/true);
  causal_scores *= scale;
  const Matrix<T> u = lookahead_keys_direct(proj, t, kind);
  Matrix<T> lookahead_scores = matmul(q, u, /*transpose_b=*/true);
  lookahead_scores *= scale;
  Matrix<T> logits = causal_scores - silu_map(lookahead_scores);
  return row_softmax_stable(logits);
}

// Output row for token t (1-based), straight from the per-token definition.
template <typename T>
Matrix<T> recurrent_step(const ProjectedSeq<T>& proj, std::size_t t,
                         const MaskKind& kind) {
  const Matrix<T> weights = recurrent_step_weights(proj, t, kind);
  return matmul(weights, proj.causal_v.top_rows(t));
}

// Full sequence output, one token at a time. Quadratic-per-token and cubic
// overall; this is the ground-truth oracle the faster forms are checked
// against, not a production path.
template <typename T>
Matrix<T> recurrent_full(const ProjectedSeq<T>& proj, const MaskKind& kind) {
  proj.validate();
  const std::size_t L = proj.seq_len();
  if (L < 1) throw std::invalid_argument("recurrent_full: seq_len must be >= 1");
  Matrix<T> out(L, proj.head_dim());
  for (std::size_t t = 1; t <= L; ++t) {
    const Matrix<T> row = recurrent_step(proj, t, kind);
    out.set_block(t - 1, 0, row);
  }
  return out;
}

}  // namespace castle
