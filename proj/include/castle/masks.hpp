#pragma once

#include <cstddef>
#include <stdexcept>
#include <vector>

#include "castle/matrix.hpp"
#include "castle/numeric.hpp"

namespace castle {

// Which lookahead-gate variant is in play: the full variant lets every token
// see all strictly-future tokens; the sliding-window variant limits the
// lookahead to the next `window` tokens. All indices below are 0-based.
class MaskKind {
 public:
  static MaskKind castle() { return MaskKind(false, 0); }

  static MaskKind castle_swl(std::size_t window) {
    if (window < 1) {
      throw std::invalid_argument("castle_swl: window must be >= 1");
    }
    return MaskKind(true, window);
  }

  bool is_swl() const noexcept { return swl_; }
  std::size_t window() const noexcept { return window_; }

  // May the lookahead key of token i be gated by token j? Strictly future
  // only; the sliding-window variant additionally requires j <= i + window.
  bool allows(std::size_t i, std::size_t j) const noexcept {
    if (j <= i) return false;
    return !swl_ || j <= i + window_;
  }

  bool operator==(const MaskKind& other) const noexcept {
    return swl_ == other.swl_ && (!swl_ || window_ == other.window_);
  }

 private:
  MaskKind(bool swl, std::size_t window) : swl_(swl), window_(window) {}
  bool swl_;
  std::size_t window_;
};

// Additive causal mask: 0 where query i may attend key j (j <= i), -inf
// elsewhere. Feeds the softmax path.
template <typename T = double>
Matrix<T> build_causal_additive(std::size_t len) {
  Matrix<T> m(len, len);
  for (std::size_t i = 0; i < len; ++i)
    for (std::size_t j = 0; j < len; ++j)
      m(i, j) = (j <= i) ? T{0} : neg_infinity<T>();
  return m;
}

// 0/1 indicator of the same causal pattern (1 where j <= i). Feeds the
// Hadamard-gated products, where blocking must be an exact zero.
template <typename T = double>
Matrix<T> build_causal_indicator(std::size_t len) {
  Matrix<T> m(len, len);
  for (std::size_t i = 0; i < len; ++i)
    for (std::size_t j = 0; j <= i; ++j) m(i, j) = T{1};
  return m;
}

// Boolean lookahead mask for a prefix of length `len` (1 = allowed). Row i is
// gated by strictly-future tokens only, so row len-1 is always fully blocked.
inline BoolMat build_lookahead_mask(std::size_t len, const MaskKind& kind) {
  BoolMat m(len, len);
  for (std::size_t i = 0; i < len; ++i)
    for (std::size_t j = i + 1; j < len; ++j)
      m(i, j) = kind.allows(i, j) ? 1 : 0;
  return m;
}

// The newest column of the lookahead mask when token t-1 (0-based) arrives:
// entry s says whether the lookahead key of token s is gated by token t-1.
// Length t-1; the arriving token itself never gates its own key.
inline std::vector<std::uint8_t> build_lookahead_column(std::size_t t,
                                                        const MaskKind& kind) {
  if (t < 1) throw std::invalid_argument("build_lookahead_column: t must be >= 1");
  std::vector<std::uint8_t> col(t - 1);
  for (std::size_t s = 0; s < col.size(); ++s) {
    col[s] = kind.allows(s, t - 1) ? 1 : 0;
  }
  return col;
}

// Block views used by the tiled kernels: same predicates, offset indices.
inline BoolMat lookahead_mask_block(std::size_t r0, std::size_t nrows,
                                    std::size_t c0, std::size_t ncols,
                                    const MaskKind& kind) {
  BoolMat m(nrows, ncols);
  for (std::size_t i = 0; i < nrows; ++i)
    for (std::size_t j = 0; j < ncols; ++j)
      m(i, j) = kind.allows(r0 + i, c0 + j) ? 1 : 0;
  return m;
}

template <typename T = double>
Matrix<T> causal_additive_block(std::size_t r0, std::size_t nrows,
                                std::size_t c0, std::size_t ncols) {
  Matrix<T> m(nrows, ncols);
  for (std::size_t i = 0; i < nrows; ++i)
    for (std::size_t j = 0; j < ncols; ++j)
      m(i, j) = (c0 + j <= r0 + i) ? T{0} : neg_infinity<T>();
  return m;
}

template <typename T = double>
Matrix<T> causal_indicator_block(std::size_t r0, std::size_t nrows,
                                 std::size_t c0, std::size_t ncols) {
  Matrix<T> m(nrows, ncols);
  for (std::size_t i = 0; i < nrows; ++i)
    for (std::size_t j = 0; j < ncols; ++j)
      m(i, j) = (c0 + j <= r0 + i) ? T{1} : T{0};
  return m;
}

}  // namespace castle
