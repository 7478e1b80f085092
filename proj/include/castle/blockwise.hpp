#pragma once

#include <atomic>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

#include "castle/concurrency.hpp"
#include "castle/masks.hpp"
#include "castle/matrix.hpp"
#include "castle/numeric.hpp"
#include "castle/recurrent.hpp"

namespace castle {

namespace selftest {
// Fault-injection hook: when set, the tiled backward skews one of its
// lookahead-key gradient accumulations. The verification harness uses it to
// prove that a corrupted kernel flips the gradient checks (and the process
// exit status) to failure. Never set outside self-tests.
inline std::atomic<bool> skew_lookahead_key_grad{false};
}  // namespace selftest

// Partition of tokens 0..L-1 into contiguous tiles of `block_size` tokens;
// the final tile may be ragged (shorter).
struct BlockConfig {
  std::size_t block_size = 32;

  struct Range {
    std::size_t start;
    std::size_t len;
  };

  void validate() const {
    if (block_size < 1) {
      throw std::invalid_argument("BlockConfig: block_size must be >= 1");
    }
  }

  std::size_t count(std::size_t seq_len) const {
    return (seq_len + block_size - 1) / block_size;
  }

  Range range(std::size_t seq_len, std::size_t j) const {
    const std::size_t start = j * block_size;
    if (start >= seq_len) throw std::invalid_argument("BlockConfig: tile out of range");
    return Range{start, std::min(block_size, seq_len - start)};
  }
};

// Streaming softmax accumulator over row tiles. Tiles may arrive in any
// order as long as the first tile absorbed for each row contains a finite
// logit; the diagonal-first schedule guarantees that, since every token can
// attend itself. Tracks per row the running max m, the running sum of
// exp(logit - m), and the unnormalized weighted value sum.
template <typename T>
struct OnlineSoftmaxState {
  std::vector<T> row_max;
  std::vector<T> row_sum;
  Matrix<T> output;

  OnlineSoftmaxState(std::size_t seq_len, std::size_t head_dim)
      : row_max(seq_len, neg_infinity<T>()),
        row_sum(seq_len, T{0}),
        output(seq_len, head_dim) {}

  // Folds the logits tile `a` (rows [row0, row0 + a.rows())) and the value
  // rows it attends into the running state.
  void absorb(std::size_t row0, const Matrix<T>& a, const Matrix<T>& values) {
    if (a.cols() != values.rows() || values.cols() != output.cols() ||
        row0 + a.rows() > output.rows()) {
      throw std::invalid_argument("OnlineSoftmaxState: tile shape mismatch");
    }
    const std::size_t d = output.cols();
    std::vector<T> p(a.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
      const std::size_t row = row0 + i;
      T m_new = row_max[row];
      for (std::size_t j = 0; j < a.cols(); ++j) m_new = std::max(m_new, a(i, j));
      if (!(m_new > neg_infinity<T>())) {
        throw std::invalid_argument("OnlineSoftmaxState: fully masked row tile");
      }
      const T rescale =
          row_max[row] > neg_infinity<T>() ? std::exp(row_max[row] - m_new) : T{0};
      T tile_sum{};
      for (std::size_t j = 0; j < a.cols(); ++j) {
        p[j] = std::exp(a(i, j) - m_new);  // exp(-inf) == 0 for masked entries
        tile_sum += p[j];
      }
      row_sum[row] = row_sum[row] * rescale + tile_sum;
      T* out_row = output.row_data(row);
      for (std::size_t c = 0; c < d; ++c) out_row[c] *= rescale;
      for (std::size_t j = 0; j < a.cols(); ++j) {
        const T pj = p[j];
        const T* vrow = values.row_data(j);
        for (std::size_t c = 0; c < d; ++c) out_row[c] += pj * vrow[c];
      }
      row_max[row] = m_new;
    }
    FlopCounter::global().add(
        static_cast<std::uint64_t>(a.rows()) * d * (a.cols() + 1));
  }

  // Normalizes the output rows and returns, per row, the folded log-sum-exp
  // of all absorbed logits (m + log sum).
  std::vector<T> finalize() {
    std::vector<T> logsumexp(row_max.size());
    for (std::size_t i = 0; i < row_max.size(); ++i) {
      if (!(row_sum[i] > T{0})) {
        throw std::invalid_argument("OnlineSoftmaxState: row absorbed no mass");
      }
      T* out_row = output.row_data(i);
      for (std::size_t c = 0; c < output.cols(); ++c) out_row[c] /= row_sum[i];
      logsumexp[i] = row_max[i] + std::log(row_sum[i]);
    }
    return logsumexp;
  }
};

// State the backward pass needs beyond the projections: the per-row
// log-sum-exp of the logits and the final lookahead accumulator (head_dim x
// seq_len), from which every earlier accumulator state is walked back.
template <typename T>
struct SavedForBackward {
  std::vector<T> logsumexp;
  Matrix<T> d_acc;
};

template <typename T>
struct BlockwiseForward {
  Matrix<T> output;
  SavedForBackward<T> saved;
};

namespace detail {

template <typename T>
Matrix<T> block_rows(const Matrix<T>& m, BlockConfig::Range r) {
  return m.block(r.start, 0, r.len, m.cols());
}

// Gated sigmoid tile: rows own the lookahead keys being built (tile rr),
// columns are the gating tokens (tile cr).
template <typename T>
Matrix<T> gate_tile(const ProjectedSeq<T>& proj, const MaskKind& kind,
                    BlockConfig::Range rr, BlockConfig::Range cr) {
  Matrix<T> scores = matmul(block_rows(proj.lookahead_q, rr),
                            block_rows(proj.lookahead_k, cr),
                            /*transpose_b=*/true);
  scores *= score_scale<T>(proj.head_dim());
  return masked_sigmoid(
      scores, lookahead_mask_block(rr.start, rr.len, cr.start, cr.len, kind));
}

// Causally-gated carried scores of a diagonal tile:
// (Qc Vu^T / sqrt(d)) . causal_indicator, both restricted to tile rr.
template <typename T>
Matrix<T> carried_tile(const ProjectedSeq<T>& proj, BlockConfig::Range rr) {
  Matrix<T> carried = matmul(block_rows(proj.causal_q, rr),
                             block_rows(proj.lookahead_v, rr),
                             /*transpose_b=*/true);
  carried *= score_scale<T>(proj.head_dim());
  return hadamard(carried,
                  causal_indicator_block<T>(rr.start, rr.len, rr.start, rr.len));
}

}  // namespace detail

// Diagonal tile of the lookahead score matrix. Entries on or above the
// diagonal are pinned to exact zero.
template <typename T>
Matrix<T> su_diag_block(const ProjectedSeq<T>& proj, const MaskKind& kind,
                        const BlockConfig& cfg, std::size_t j) {
  cfg.validate();
  const auto r = cfg.range(proj.seq_len(), j);
  Matrix<T> su =
      matmul(detail::carried_tile(proj, r), detail::gate_tile(proj, kind, r, r),
             /*transpose_b=*/true);
  for (std::size_t a = 0; a < r.len; ++a)
    for (std::size_t b = a; b < r.len; ++b) su(a, b) = T{0};
  return su;
}

// Adds contributor tile j+k-1 to the lookahead accumulator columns of tile j:
//   D <- D + Vu_{j+k-1}^T gate(Qu_j Ku_{j+k-1}^T)^T      (head_dim x len_j)
template <typename T>
Matrix<T> update_d(const Matrix<T>& d_prev_cols, const ProjectedSeq<T>& proj,
                   const MaskKind& kind, const BlockConfig& cfg, std::size_t j,
                   std::size_t k) {
  cfg.validate();
  if (k < 1) throw std::invalid_argument("update_d: k must be >= 1");
  const std::size_t L = proj.seq_len();
  const auto cr = cfg.range(L, j);
  const auto pr = cfg.range(L, j + k - 1);
  if (d_prev_cols.rows() != proj.head_dim() || d_prev_cols.cols() != cr.len) {
    throw std::invalid_argument("update_d: accumulator shape mismatch");
  }
  const Matrix<T> gate = detail::gate_tile(proj, kind, cr, pr);  // len_j x len_p
  return d_prev_cols +
         matmul(gate, detail::block_rows(proj.lookahead_v, pr)).transposed();
}

// Off-diagonal tile (row tile j+k, column tile j) of the lookahead score
// matrix: the accumulator part plus the row tile's own causally-gated
// contribution.
//   S = Qc_{j+k} D / sqrt(d) + carried_{j+k} gate(Qu_j Ku_{j+k}^T)^T
template <typename T>
Matrix<T> su_offdiag_block(const ProjectedSeq<T>& proj, const MaskKind& kind,
                           const Matrix<T>& d_cols, const BlockConfig& cfg,
                           std::size_t j, std::size_t k) {
  cfg.validate();
  if (k < 1) throw std::invalid_argument("su_offdiag_block: k must be >= 1");
  const std::size_t L = proj.seq_len();
  const auto rr = cfg.range(L, j + k);
  const auto cr = cfg.range(L, j);
  if (d_cols.rows() != proj.head_dim() || d_cols.cols() != cr.len) {
    throw std::invalid_argument("su_offdiag_block: accumulator shape mismatch");
  }
  Matrix<T> su = scaled(matmul(detail::block_rows(proj.causal_q, rr), d_cols),
                        score_scale<T>(proj.head_dim()));
  su += matmul(detail::carried_tile(proj, rr),
               detail::gate_tile(proj, kind, cr, rr), /*transpose_b=*/true);
  return su;
}

// Tiled single-pass forward: memory O(L*d), never materializes an LxL score
// matrix. Diagonal tiles are processed first so every row's streaming
// softmax starts from a finite max; then superdiagonal k = 1..N-1, where the
// tiles of one k are mutually independent (each touches its own output row
// tile and accumulator column tile) and run across thread_count() workers.
template <typename T>
BlockwiseForward<T> forward_blockwise(const ProjectedSeq<T>& proj,
                                      const MaskKind& kind,
                                      const BlockConfig& cfg) {
  proj.validate();
  cfg.validate();
  const std::size_t L = proj.seq_len();
  const std::size_t d = proj.head_dim();
  if (L < 1) throw std::invalid_argument("forward_blockwise: seq_len must be >= 1");
  const std::size_t n_tiles = cfg.count(L);
  const std::size_t workers = thread_count();
  const T scale = score_scale<T>(d);

  OnlineSoftmaxState<T> state(L, d);
  Matrix<T> d_acc(d, L);

  parallel_for(n_tiles, workers, [&](std::size_t j) {
    const auto r = cfg.range(L, j);
    Matrix<T> logits = matmul(detail::block_rows(proj.causal_q, r),
                              detail::block_rows(proj.causal_k, r),
                              /*transpose_b=*/true);
    logits *= scale;
    logits += causal_additive_block<T>(r.start, r.len, r.start, r.len);
    logits -= silu_map(su_diag_block(proj, kind, cfg, j));
    state.absorb(r.start, logits, detail::block_rows(proj.causal_v, r));
  });

  for (std::size_t k = 1; k < n_tiles; ++k) {
    parallel_for(n_tiles - k, workers, [&](std::size_t j) {
      const auto rr = cfg.range(L, j + k);
      const auto cr = cfg.range(L, j);
      const Matrix<T> d_cols = update_d(
          d_acc.block(0, cr.start, d, cr.len), proj, kind, cfg, j, k);
      d_acc.set_block(0, cr.start, d_cols);
      Matrix<T> logits = matmul(detail::block_rows(proj.causal_q, rr),
                                detail::block_rows(proj.causal_k, cr),
                                /*transpose_b=*/true);
      logits *= scale;
      logits -= silu_map(su_offdiag_block(proj, kind, d_cols, cfg, j, k));
      state.absorb(rr.start, logits, detail::block_rows(proj.causal_v, cr));
    });
  }

  BlockwiseForward<T> result;
  std::vector<T> logsumexp = state.finalize();
  result.output = std::move(state.output);
  result.saved = SavedForBackward<T>{std::move(logsumexp), std::move(d_acc)};
  return result;
}

namespace detail {

// exp(logits - logsumexp) for a tile whose rows start at global row rs:
// exact softmax probabilities reconstructed from the folded row statistics.
template <typename T>
Matrix<T> probs_tile(const Matrix<T>& logits, const std::vector<T>& logsumexp,
                     std::size_t rs) {
  Matrix<T> p = logits;
  for (std::size_t i = 0; i < p.rows(); ++i)
    for (std::size_t j = 0; j < p.cols(); ++j)
      p(i, j) = std::exp(p(i, j) - logsumexp[rs + i]);
  return p;
}

}  // namespace detail

// Tiled backward pass: gradients of a scalar loss sum(upstream . output)
// with respect to all six projected sequences. Score tiles are recomputed
// from the projections; the lookahead accumulator is walked backward from
// its saved final state, so memory stays O(L*d). Superdiagonals run k =
// N-1..1 (tiles within one k concurrent, with the two split accumulators for
// the lookahead k/v buffers that make those writes disjoint), then the
// diagonal tiles.
//
// If `walked_back_d` is non-null it receives the accumulator state after the
// full reverse walk, which must be the zero matrix (a self-check exercised
// by the test suite).
template <typename T>
Grads<T> backward_blockwise(const ProjectedSeq<T>& proj, const MaskKind& kind,
                            const BlockConfig& cfg,
                            const SavedForBackward<T>& saved,
                            const Matrix<T>& upstream,
                            Matrix<T>* walked_back_d = nullptr) {
  proj.validate();
  cfg.validate();
  const std::size_t L = proj.seq_len();
  const std::size_t d = proj.head_dim();
  if (upstream.rows() != L || upstream.cols() != d) {
    throw std::invalid_argument("backward_blockwise: upstream shape mismatch");
  }
  if (saved.logsumexp.size() != L || saved.d_acc.rows() != d ||
      saved.d_acc.cols() != L) {
    throw std::invalid_argument("backward_blockwise: saved state mismatch");
  }
  const std::size_t n_tiles = cfg.count(L);
  const std::size_t workers = thread_count();
  const T scale = score_scale<T>(d);
  const T skew =
      selftest::skew_lookahead_key_grad.load(std::memory_order_relaxed)
          ? T{1.25}
          : T{1};

  // The softmax backward needs the forward output rows for the row dots
  // delta_i = dO_i . O_i; recompute them (the saved state keeps memory at
  // O(L*d), so the output is not retained).
  const Matrix<T> output = forward_blockwise(proj, kind, cfg).output;
  std::vector<T> delta(L);
  for (std::size_t i = 0; i < L; ++i) {
    T acc{};
    for (std::size_t c = 0; c < d; ++c) acc += upstream(i, c) * output(i, c);
    delta[i] = acc;
  }
  FlopCounter::global().add(static_cast<std::uint64_t>(L) * d);

  Grads<T> g = Grads<T>::zeros(L, d);
  // Split accumulators: within one superdiagonal k, tile j writes its "own"
  // row tile j+k into g directly and its contributor tile j+k-1 into these
  // side buffers, keeping all concurrent writes disjoint.
  Matrix<T> dvu_side(L, d);
  Matrix<T> dku_side(L, d);

  Matrix<T> d_walk = saved.d_acc;   // D^(k) column tiles during the walk
  Matrix<T> d_grad(d, L);           // accumulated dL/dD columns

  // Shared tile body for the softmax/causal/score-assembly part. Returns the
  // gradient of the loss w.r.t. this tile of the lookahead score matrix.
  const auto score_tile_backward = [&](const Matrix<T>& su_tile,
                                       BlockConfig::Range rr,
                                       BlockConfig::Range cr, bool diagonal) {
    Matrix<T> logits = matmul(detail::block_rows(proj.causal_q, rr),
                              detail::block_rows(proj.causal_k, cr),
                              /*transpose_b=*/true);
    logits *= scale;
    if (diagonal) {
      logits += causal_additive_block<T>(rr.start, rr.len, cr.start, cr.len);
    }
    logits -= silu_map(su_tile);
    const Matrix<T> probs = detail::probs_tile(logits, saved.logsumexp, rr.start);
    const Matrix<T> d_out = detail::block_rows(upstream, rr);
    const Matrix<T> d_probs =
        matmul(d_out, detail::block_rows(proj.causal_v, cr), /*transpose_b=*/true);
    g.causal_v.add_block(cr.start, 0, matmul(probs.transposed(), d_out));
    Matrix<T> d_logits(rr.len, cr.len);
    for (std::size_t i = 0; i < rr.len; ++i)
      for (std::size_t j = 0; j < cr.len; ++j)
        d_logits(i, j) = probs(i, j) * (d_probs(i, j) - delta[rr.start + i]);
    g.causal_q.add_block(
        rr.start, 0,
        scaled(matmul(d_logits, detail::block_rows(proj.causal_k, cr)), scale));
    g.causal_k.add_block(
        cr.start, 0,
        scaled(matmul(d_logits.transposed(), detail::block_rows(proj.causal_q, rr)),
               scale));
    Matrix<T> d_su = hadamard(silu_grad_map(su_tile), d_logits);
    d_su *= T{-1};
    return d_su;
  };

  // Gradient of the row tile's own causally-gated contribution
  //   carried_rr gate(Qu_cr Ku_rr^T)^T
  // shared by the diagonal and off-diagonal tiles.
  const auto carried_gate_backward = [&](const Matrix<T>& d_su,
                                         BlockConfig::Range rr,
                                         BlockConfig::Range cr,
                                         Matrix<T>* dvu_target) {
    const Matrix<T> gate = detail::gate_tile(proj, kind, cr, rr);
    const Matrix<T> carried = detail::carried_tile(proj, rr);
    const Matrix<T> d_carried = hadamard(
        matmul(d_su, gate),
        causal_indicator_block<T>(rr.start, rr.len, rr.start, rr.len));
    g.causal_q.add_block(
        rr.start, 0,
        scaled(matmul(d_carried, detail::block_rows(proj.lookahead_v, rr)), scale));
    dvu_target->add_block(
        rr.start, 0,
        scaled(matmul(d_carried.transposed(), detail::block_rows(proj.causal_q, rr)),
               scale));
    const Matrix<T> d_gate_scores = hadamard(
        matmul(d_su.transposed(), carried), sigmoid_grad_from_value(gate));
    g.lookahead_q.add_block(
        cr.start, 0,
        scaled(matmul(d_gate_scores, detail::block_rows(proj.lookahead_k, rr)),
               scale));
    g.lookahead_k.add_block(
        rr.start, 0,
        scaled(matmul(d_gate_scores.transposed(),
                      detail::block_rows(proj.lookahead_q, cr)),
               scale * skew));
  };

  for (std::size_t k = n_tiles; k-- > 1;) {
    parallel_for(n_tiles - k, workers, [&](std::size_t j) {
      const auto rr = cfg.range(L, j + k);
      const auto cr = cfg.range(L, j);
      const Matrix<T> d_cols = d_walk.block(0, cr.start, d, cr.len);
      const Matrix<T> su_tile = su_offdiag_block(proj, kind, d_cols, cfg, j, k);
      const Matrix<T> d_su = score_tile_backward(su_tile, rr, cr, false);

      // Accumulator part of the tile: S += Qc_rr D / sqrt(d).
      g.causal_q.add_block(
          rr.start, 0, scaled(matmul(d_su, d_cols, /*transpose_b=*/true), scale));
      d_grad.add_block(
          0, cr.start,
          scaled(matmul(detail::block_rows(proj.causal_q, rr).transposed(), d_su),
                 scale));

      // The row tile's own contribution (writes lookahead k/v at tile j+k).
      carried_gate_backward(d_su, rr, cr, &g.lookahead_v);

      // The accumulator's newest contributor, tile p = j+k-1, through
      //   D^(k) = D^(k-1) + Vu_p^T gate(Qu_j Ku_p^T)^T
      // using the dL/dD accumulated so far (writes lookahead k/v at tile p,
      // routed to the side buffers to stay disjoint from the j+k writes).
      const auto pr = cfg.range(L, j + k - 1);
      const Matrix<T> gate_p = detail::gate_tile(proj, kind, cr, pr);
      const Matrix<T> d_cols_grad = d_grad.block(0, cr.start, d, cr.len);
      dvu_side.add_block(pr.start, 0,
                         matmul(d_cols_grad, gate_p).transposed());
      const Matrix<T> d_gate_p =
          hadamard(matmul(d_cols_grad.transposed(),
                          detail::block_rows(proj.lookahead_v, pr),
                          /*transpose_b=*/true),
                   sigmoid_grad_from_value(gate_p));
      g.lookahead_q.add_block(
          cr.start, 0,
          scaled(matmul(d_gate_p, detail::block_rows(proj.lookahead_k, pr)), scale));
      dku_side.add_block(
          pr.start, 0,
          scaled(matmul(d_gate_p.transposed(),
                        detail::block_rows(proj.lookahead_q, cr)),
                 scale));

      // Walk the accumulator columns back to D^(k-1).
      Matrix<T> d_cols_prev = d_cols;
      d_cols_prev -=
          matmul(gate_p, detail::block_rows(proj.lookahead_v, pr)).transposed();
      d_walk.set_block(0, cr.start, d_cols_prev);
    });
  }

  parallel_for(n_tiles, workers, [&](std::size_t j) {
    const auto r = cfg.range(L, j);
    const Matrix<T> su_tile = su_diag_block(proj, kind, cfg, j);
    const Matrix<T> d_su = score_tile_backward(su_tile, r, r, true);
    carried_gate_backward(d_su, r, r, &g.lookahead_v);
  });

  g.lookahead_v += dvu_side;
  g.lookahead_k += dku_side;
  if (walked_back_d != nullptr) *walked_back_d = std::move(d_walk);
  return g;
}

}  // namespace castle
