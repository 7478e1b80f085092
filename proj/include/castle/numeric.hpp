#pragma once

#include <cmath>
#include <limits>
#include <stdexcept>

#include "castle/matrix.hpp"

namespace castle {

template <typename T>
constexpr T neg_infinity() {
  return -std::numeric_limits<T>::infinity();
}

// Logistic sigmoid, evaluated on the non-overflowing branch for either sign.
template <typename T>
T sigmoid(T x) {
  if (x >= T{0}) {
    return T{1} / (T{1} + std::exp(-x));
  }
  const T e = std::exp(x);
  return e / (T{1} + e);
}

template <typename T>
T silu(T x) {
  return x * sigmoid(x);
}

// d/dx silu(x) = sigmoid(x) * (1 + x * (1 - sigmoid(x)))
template <typename T>
T silu_grad(T x) {
  const T s = sigmoid(x);
  return s * (T{1} + x * (T{1} - s));
}

template <typename T>
Matrix<T> silu_map(const Matrix<T>& a) {
  Matrix<T> out = a;
  for (T& v : out.data()) v = silu(v);
  return out;
}

template <typename T>
Matrix<T> silu_grad_map(const Matrix<T>& a) {
  Matrix<T> out = a;
  for (T& v : out.data()) v = silu_grad(v);
  return out;
}

// Numerically stable softmax over each row. Rows may contain -inf entries
// (additive masking); those map to exact zeros. A row with no finite entry
// has no well-defined distribution and is rejected.
template <typename T>
Matrix<T> row_softmax_stable(const Matrix<T>& logits) {
  Matrix<T> out(logits.rows(), logits.cols());
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    T row_max = neg_infinity<T>();
    for (std::size_t j = 0; j < logits.cols(); ++j) {
      row_max = std::max(row_max, logits(i, j));
    }
    if (!(row_max > neg_infinity<T>())) {
      throw std::invalid_argument("row_softmax_stable: fully masked row");
    }
    T sum{};
    for (std::size_t j = 0; j < logits.cols(); ++j) {
      const T e = std::exp(logits(i, j) - row_max);  // exp(-inf) == 0
      out(i, j) = e;
      sum += e;
    }
    for (std::size_t j = 0; j < logits.cols(); ++j) out(i, j) /= sum;
  }
  return out;
}

// Elementwise sigmoid gated by a boolean mask: blocked entries produce exact
// zeros. Blocking is done by zeroing rather than by feeding -inf through
// exp(), so no non-finite intermediate ever appears.
template <typename T>
Matrix<T> masked_sigmoid(const Matrix<T>& scores, const BoolMat& allow) {
  if (scores.rows() != allow.rows() || scores.cols() != allow.cols()) {
    throw std::invalid_argument("masked_sigmoid: mask shape mismatch");
  }
  Matrix<T> out(scores.rows(), scores.cols());
  for (std::size_t k = 0; k < out.data().size(); ++k) {
    out.data()[k] = allow.data()[k] ? sigmoid(scores.data()[k]) : T{0};
  }
  return out;
}

// Derivative of the gated sigmoid, computed from the already-gated value:
// sig * (1 - sig). Blocked entries carry sig == 0 and so contribute exact 0.
template <typename T>
Matrix<T> sigmoid_grad_from_value(const Matrix<T>& gated) {
  Matrix<T> out = gated;
  for (T& v : out.data()) v = v * (T{1} - v);
  return out;
}

}  // namespace castle
