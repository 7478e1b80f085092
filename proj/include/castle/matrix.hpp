#pragma once

#include <cassert>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

#include "castle/flops.hpp"

namespace castle {

// Dense row-major matrix, the single carrier type for projections, score
// blocks, masks and gradients. Additive masks are the only matrices expected
// to hold -inf entries; kernels never produce NaN on well-formed input.
template <typename T>
class Matrix {
 public:
  Matrix() = default;

  Matrix(std::size_t rows, std::size_t cols, T fill = T{})
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = T{1};
    return m;
  }

  static Matrix from_rows(std::initializer_list<std::initializer_list<T>> rows) {
    Matrix m(rows.size(), rows.size() == 0 ? 0 : rows.begin()->size());
    std::size_t i = 0;
    for (const auto& row : rows) {
      if (row.size() != m.cols_) {
        throw std::invalid_argument("from_rows: ragged initializer");
      }
      std::size_t j = 0;
      for (const T& v : row) m(i, j++) = v;
      ++i;
    }
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T& operator()(std::size_t i, std::size_t j) {
    assert(i < rows_ && j < cols_);
    return data_[i * cols_ + j];
  }
  const T& operator()(std::size_t i, std::size_t j) const {
    assert(i < rows_ && j < cols_);
    return data_[i * cols_ + j];
  }

  T* row_data(std::size_t i) { return data_.data() + i * cols_; }
  const T* row_data(std::size_t i) const { return data_.data() + i * cols_; }

  std::vector<T>& data() noexcept { return data_; }
  const std::vector<T>& data() const noexcept { return data_; }

  bool same_shape(const Matrix& other) const noexcept {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }

  // Copy of the leading `n` rows.
  Matrix top_rows(std::size_t n) const {
    if (n > rows_) throw std::invalid_argument("top_rows: n exceeds row count");
    Matrix out(n, cols_);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < cols_; ++j) out(i, j) = (*this)(i, j);
    return out;
  }

  // Copy of row i as a 1 x cols matrix.
  Matrix row(std::size_t i) const {
    if (i >= rows_) throw std::invalid_argument("row: index out of range");
    Matrix out(1, cols_);
    for (std::size_t j = 0; j < cols_; ++j) out(0, j) = (*this)(i, j);
    return out;
  }

  // Copy of the block starting at (r0, c0) spanning nrows x ncols.
  Matrix block(std::size_t r0, std::size_t c0, std::size_t nrows,
               std::size_t ncols) const {
    if (r0 + nrows > rows_ || c0 + ncols > cols_) {
      throw std::invalid_argument("block: out of range");
    }
    Matrix out(nrows, ncols);
    for (std::size_t i = 0; i < nrows; ++i)
      for (std::size_t j = 0; j < ncols; ++j) out(i, j) = (*this)(r0 + i, c0 + j);
    return out;
  }

  void set_block(std::size_t r0, std::size_t c0, const Matrix& b) {
    if (r0 + b.rows_ > rows_ || c0 + b.cols_ > cols_) {
      throw std::invalid_argument("set_block: out of range");
    }
    for (std::size_t i = 0; i < b.rows_; ++i)
      for (std::size_t j = 0; j < b.cols_; ++j) (*this)(r0 + i, c0 + j) = b(i, j);
  }

  void add_block(std::size_t r0, std::size_t c0, const Matrix& b) {
    if (r0 + b.rows_ > rows_ || c0 + b.cols_ > cols_) {
      throw std::invalid_argument("add_block: out of range");
    }
    for (std::size_t i = 0; i < b.rows_; ++i)
      for (std::size_t j = 0; j < b.cols_; ++j) (*this)(r0 + i, c0 + j) += b(i, j);
  }

  // Appends one row (amortized O(cols): row-major storage grows in place).
  void append_row(const Matrix& r) {
    if (r.rows() != 1 || r.cols() != cols_) {
      throw std::invalid_argument("append_row: expected a 1 x cols row");
    }
    data_.insert(data_.end(), r.data_.begin(), r.data_.end());
    ++rows_;
  }

  Matrix transposed() const {
    Matrix out(cols_, rows_);
    for (std::size_t i = 0; i < rows_; ++i)
      for (std::size_t j = 0; j < cols_; ++j) out(j, i) = (*this)(i, j);
    return out;
  }

  Matrix& operator+=(const Matrix& other) {
    require_same_shape(other, "operator+=");
    for (std::size_t k = 0; k < data_.size(); ++k) data_[k] += other.data_[k];
    return *this;
  }

  Matrix& operator-=(const Matrix& other) {
    require_same_shape(other, "operator-=");
    for (std::size_t k = 0; k < data_.size(); ++k) data_[k] -= other.data_[k];
    return *this;
  }

  Matrix& operator*=(T s) {
    for (T& v : data_) v *= s;
    return *this;
  }

  void require_same_shape(const Matrix& other, const char* what) const {
    if (!same_shape(other)) {
      throw std::invalid_argument(std::string(what) + ": shape mismatch");
    }
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

using Mat = Matrix<double>;
using Mat32 = Matrix<float>;
// Boolean allow/block mask used by the sigmoid-gated paths (1 = allowed).
using BoolMat = Matrix<std::uint8_t>;

// C = A * B or A * B^T. Every inner accumulation counts as one multiply-add
// toward the global flop tally. Plain deterministic loops: accumulation order
// is fixed (ascending inner index), which the reproducibility guarantees of
// the library rely on.
template <typename T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b, bool transpose_b = false) {
  const std::size_t inner = transpose_b ? b.cols() : b.rows();
  if (a.cols() != inner) {
    throw std::invalid_argument("matmul: inner dimension mismatch");
  }
  const std::size_t out_cols = transpose_b ? b.rows() : b.cols();
  Matrix<T> c(a.rows(), out_cols);
  if (transpose_b) {
    for (std::size_t i = 0; i < a.rows(); ++i) {
      const T* arow = a.row_data(i);
      for (std::size_t j = 0; j < out_cols; ++j) {
        const T* brow = b.row_data(j);
        T acc{};
        for (std::size_t k = 0; k < inner; ++k) acc += arow[k] * brow[k];
        c(i, j) = acc;
      }
    }
  } else {
    for (std::size_t i = 0; i < a.rows(); ++i) {
      const T* arow = a.row_data(i);
      T* crow = c.row_data(i);
      for (std::size_t k = 0; k < inner; ++k) {
        const T aik = arow[k];
        const T* brow = b.row_data(k);
        for (std::size_t j = 0; j < out_cols; ++j) crow[j] += aik * brow[j];
      }
    }
  }
  FlopCounter::global().add(static_cast<std::uint64_t>(a.rows()) * out_cols * inner);
  return c;
}

template <typename T>
Matrix<T> operator+(Matrix<T> a, const Matrix<T>& b) {
  a += b;
  return a;
}

template <typename T>
Matrix<T> operator-(Matrix<T> a, const Matrix<T>& b) {
  a -= b;
  return a;
}

template <typename T>
Matrix<T> hadamard(const Matrix<T>& a, const Matrix<T>& b) {
  a.require_same_shape(b, "hadamard");
  Matrix<T> c = a;
  for (std::size_t k = 0; k < c.data().size(); ++k) c.data()[k] *= b.data()[k];
  return c;
}

template <typename T>
Matrix<T> scaled(Matrix<T> a, T s) {
  a *= s;
  return a;
}

template <typename T>
T max_abs(const Matrix<T>& a) {
  T m{};
  for (const T& v : a.data()) m = std::max(m, std::abs(v));
  return m;
}

template <typename T>
T max_abs_diff(const Matrix<T>& a, const Matrix<T>& b) {
  a.require_same_shape(b, "max_abs_diff");
  T m{};
  for (std::size_t k = 0; k < a.data().size(); ++k) {
    m = std::max(m, std::abs(a.data()[k] - b.data()[k]));
  }
  return m;
}

// Largest elementwise |a-b| / max(1, |a|, |b|). The unit floor makes the
// metric absolute for small entries, which keeps exact-zero entries from
// amplifying finite-difference noise.
template <typename T>
T max_rel_diff(const Matrix<T>& a, const Matrix<T>& b) {
  a.require_same_shape(b, "max_rel_diff");
  T m{};
  for (std::size_t k = 0; k < a.data().size(); ++k) {
    const T x = a.data()[k];
    const T y = b.data()[k];
    const T denom = std::max(T{1}, std::max(std::abs(x), std::abs(y)));
    m = std::max(m, std::abs(x - y) / denom);
  }
  return m;
}

template <typename T>
bool exactly_equal(const Matrix<T>& a, const Matrix<T>& b) {
  if (!a.same_shape(b)) return false;
  for (std::size_t k = 0; k < a.data().size(); ++k) {
    if (a.data()[k] != b.data()[k]) return false;
  }
  return true;
}

}  // namespace castle
