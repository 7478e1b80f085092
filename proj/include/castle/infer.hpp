#pragma once

#include <cstddef>
#include <stdexcept>

#include "castle/blockwise.hpp"
#include "castle/concurrency.hpp"
#include "castle/masks.hpp"
#include "castle/matrix.hpp"
#include "castle/numeric.hpp"
#include "castle/recurrent.hpp"

namespace castle {

// Decoding cache after t tokens: exactly four t x head_dim tensors.
//  - u:           the lookahead keys U^t (row t-1 is always exactly zero)
//  - lookahead_q: queries of past tokens, needed to gate their keys when
//                 future tokens arrive
//  - causal_k/v:  the ordinary attention cache
// The per-step lookahead k/v and causal q are consumed within their step and
// never retained, so the cache holds exactly 4*t*head_dim numbers.
template <typename T>
struct UQKVCache {
  Matrix<T> u;
  Matrix<T> lookahead_q;
  Matrix<T> causal_k;
  Matrix<T> causal_v;
  MaskKind kind = MaskKind::castle();

  static UQKVCache empty(std::size_t head_dim, const MaskKind& kind) {
    if (head_dim < 1) throw std::invalid_argument("UQKVCache: head_dim must be >= 1");
    return UQKVCache{Matrix<T>(0, head_dim), Matrix<T>(0, head_dim),
                     Matrix<T>(0, head_dim), Matrix<T>(0, head_dim), kind};
  }

  std::size_t length() const noexcept { return u.rows(); }
  std::size_t head_dim() const noexcept { return u.cols(); }
  std::size_t number_count() const noexcept {
    return u.size() + lookahead_q.size() + causal_k.size() + causal_v.size();
  }

  void validate() const {
    const std::size_t t = u.rows();
    const std::size_t d = u.cols();
    for (const Matrix<T>* m : {&lookahead_q, &causal_k, &causal_v}) {
      if (m->rows() != t || m->cols() != d) {
        throw std::invalid_argument("UQKVCache: inconsistent shapes");
      }
    }
  }
};

template <typename T>
struct PrefillResult {
  Matrix<T> output;
  UQKVCache<T> cache;
};

// Builds the cache for a full prompt in one pass. The lookahead keys are
// accumulated tile by tile (row tiles independent, so they run across
// workers); the outputs come from the tiled forward.
template <typename T>
PrefillResult<T> prefill(const ProjectedSeq<T>& proj, const MaskKind& kind,
                         const BlockConfig& cfg) {
  proj.validate();
  cfg.validate();
  const std::size_t L = proj.seq_len();
  const std::size_t d = proj.head_dim();
  if (L < 1) throw std::invalid_argument("prefill: seq_len must be >= 1");
  const std::size_t n_tiles = cfg.count(L);

  Matrix<T> u(L, d);
  parallel_for(n_tiles, thread_count(), [&](std::size_t krow) {
    const auto rr = cfg.range(L, krow);
    // Tokens in tiles before krow never gate this tile's keys; start at the
    // diagonal tile.
    for (std::size_t j = krow; j < n_tiles; ++j) {
      const auto cr = cfg.range(L, j);
      const Matrix<T> gate = detail::gate_tile(proj, kind, rr, cr);
      u.add_block(rr.start, 0,
                  matmul(gate, detail::block_rows(proj.lookahead_v, cr)));
    }
  });

  PrefillResult<T> result;
  result.output = forward_blockwise(proj, kind, cfg).output;
  result.cache = UQKVCache<T>{std::move(u), proj.lookahead_q, proj.causal_k,
                              proj.causal_v, kind};
  return result;
}

// Advances the lookahead keys by one token: every cached token whose gate
// window admits the arriving token adds gate(qu_s . ku_new / sqrt(d)) * vu_new
// to its key, then the arriving token gets a fresh all-zero key. Rows outside
// the window are not touched at all (bitwise unchanged). The arriving token's
// lookahead query is retained; its lookahead k/v are consumed here.
template <typename T>
void update_u_recursive(UQKVCache<T>& cache, const Matrix<T>& qu_row,
                        const Matrix<T>& ku_row, const Matrix<T>& vu_row) {
  const std::size_t d = cache.head_dim();
  // Only the keys and the retained lookahead queries take part here; the
  // causal columns may lag by one row mid-step (decode appends them after).
  if (cache.lookahead_q.rows() != cache.u.rows() ||
      cache.lookahead_q.cols() != d) {
    throw std::invalid_argument("update_u_recursive: cache u/q desynced");
  }
  for (const Matrix<T>* m : {&qu_row, &ku_row, &vu_row}) {
    if (m->rows() != 1 || m->cols() != d) {
      throw std::invalid_argument("update_u_recursive: expected 1 x head_dim rows");
    }
  }
  const std::size_t t_old = cache.length();
  const T scale = score_scale<T>(d);
  // 0-based: arriving token index is t_old; token s is gated iff
  // allows(s, t_old), i.e. s >= t_old - window for the windowed variant.
  std::size_t first = 0;
  if (cache.kind.is_swl() && t_old > cache.kind.window()) {
    first = t_old - cache.kind.window();
  }
  for (std::size_t s = first; s < t_old; ++s) {
    T score{};
    const T* qrow = cache.lookahead_q.row_data(s);
    for (std::size_t c = 0; c < d; ++c) score += qrow[c] * ku_row(0, c);
    const T gate = sigmoid(score * scale);
    T* urow = cache.u.row_data(s);
    for (std::size_t c = 0; c < d; ++c) urow[c] += gate * vu_row(0, c);
  }
  FlopCounter::global().add(2 * static_cast<std::uint64_t>(t_old - first) * d);
  cache.u.append_row(Matrix<T>(1, d));
  cache.lookahead_q.append_row(qu_row);
}

// One autoregressive step: projects the incoming token, folds it into the
// cache, and returns its attention output (1 x head_dim).
template <typename T>
Matrix<T> decode_step(const Matrix<T>& x_row, UQKVCache<T>& cache,
                      const HeadParams<T>& params) {
  if (x_row.rows() != 1) {
    throw std::invalid_argument("decode_step: expected a single token row");
  }
  cache.validate();
  const Matrix<T> qu = matmul(x_row, params.lookahead_q);
  const Matrix<T> ku = matmul(x_row, params.lookahead_k);
  const Matrix<T> vu = matmul(x_row, params.lookahead_v);
  const Matrix<T> qc = matmul(x_row, params.causal_q);
  const Matrix<T> kc = matmul(x_row, params.causal_k);
  const Matrix<T> vc = matmul(x_row, params.causal_v);

  update_u_recursive(cache, qu, ku, vu);
  cache.causal_k.append_row(kc);
  cache.causal_v.append_row(vc);

  const T scale = score_scale<T>(cache.head_dim());
  Matrix<T> causal_scores = matmul(qc, cache.causal_k, /*transpose_b=*/true);
  causal_scores *= scale;
  Matrix<T> lookahead_scores = matmul(qc, cache.u, /*transpose_b=*/true);
  lookahead_scores *= scale;
  const Matrix<T> probs =
      row_softmax_stable(causal_scores - silu_map(lookahead_scores));
  return matmul(probs, cache.causal_v);
}

}  // namespace castle
