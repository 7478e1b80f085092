#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "castle/blockwise.hpp"
#include "castle/concurrency.hpp"
#include "castle/infer.hpp"
#include "castle/parallel.hpp"
#include "castle/recurrent.hpp"

namespace castle {

enum class Engine { kRecurrent, kParallel, kBlockwise };

enum class AttentionArch { kCastle, kStandardCausal };

// n independent heads (six projections each) plus the output projection
// mixing the concatenated head outputs back to hidden_dim.
template <typename T>
struct MultiHeadParams {
  std::vector<HeadParams<T>> heads;
  Matrix<T> w_out;  // (n * head_dim) x hidden_dim

  std::size_t head_count() const noexcept { return heads.size(); }
  std::size_t head_dim() const noexcept {
    return heads.empty() ? 0 : heads.front().causal_q.cols();
  }

  void validate(std::size_t hidden_dim) const {
    if (heads.empty()) throw std::invalid_argument("MultiHeadParams: no heads");
    const std::size_t d = head_dim();
    for (const HeadParams<T>& h : heads) {
      for (const Matrix<T>* m : {&h.lookahead_q, &h.lookahead_k, &h.lookahead_v,
                                 &h.causal_q, &h.causal_k, &h.causal_v}) {
        if (m->rows() != hidden_dim || m->cols() != d) {
          throw std::invalid_argument("MultiHeadParams: projection shape mismatch");
        }
      }
    }
    if (w_out.rows() != heads.size() * d || w_out.cols() != hidden_dim) {
      throw std::invalid_argument("MultiHeadParams: output projection shape mismatch");
    }
  }
};

// Attention parameters per layer: the lookahead-gated design spends seven
// head_dim x hidden_dim matrices per head (six projections plus its share of
// the output projection) against four for standard causal attention.
inline std::uint64_t param_count(AttentionArch arch, std::uint64_t n_heads,
                                 std::uint64_t head_dim, std::uint64_t hidden_dim) {
  const std::uint64_t per_head = head_dim * hidden_dim;
  switch (arch) {
    case AttentionArch::kCastle:
      return 7 * n_heads * per_head;
    case AttentionArch::kStandardCausal:
      return 4 * n_heads * per_head;
  }
  throw std::invalid_argument("param_count: unknown architecture");
}

template <typename T>
Matrix<T> single_head_forward(const ProjectedSeq<T>& proj, const MaskKind& kind,
                              Engine engine, const BlockConfig& cfg) {
  switch (engine) {
    case Engine::kRecurrent:
      return recurrent_full(proj, kind);
    case Engine::kParallel:
      return parallel_forward(proj, kind);
    case Engine::kBlockwise:
      return forward_blockwise(proj, kind, cfg).output;
  }
  throw std::invalid_argument("single_head_forward: unknown engine");
}

// Full multi-head layer: per-head attention (heads run across workers, they
// share nothing), concatenation, output projection.
template <typename T>
Matrix<T> multihead_forward(const Matrix<T>& x, const MultiHeadParams<T>& params,
                            const MaskKind& kind, Engine engine,
                            const BlockConfig& cfg = BlockConfig{}) {
  params.validate(x.cols());
  const std::size_t n = params.head_count();
  const std::size_t d = params.head_dim();
  Matrix<T> concat(x.rows(), n * d);
  parallel_for(n, thread_count(), [&](std::size_t h) {
    const ProjectedSeq<T> proj = project(x, params.heads[h]);
    concat.set_block(0, h * d, single_head_forward(proj, kind, engine, cfg));
  });
  return matmul(concat, params.w_out);
}

// One decoding step across all heads; caches[h] belongs to head h.
template <typename T>
Matrix<T> multihead_decode_step(const Matrix<T>& x_row,
                                std::vector<UQKVCache<T>>& caches,
                                const MultiHeadParams<T>& params) {
  params.validate(x_row.cols());
  if (caches.size() != params.head_count()) {
    throw std::invalid_argument("multihead_decode_step: cache count mismatch");
  }
  const std::size_t d = params.head_dim();
  Matrix<T> concat(1, caches.size() * d);
  for (std::size_t h = 0; h < caches.size(); ++h) {
    concat.set_block(0, h * d, decode_step(x_row, caches[h], params.heads[h]));
  }
  return matmul(concat, params.w_out);
}

}  // namespace castle
