#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace driftlab {

using Vector = std::vector<double>;

/// Dense row-major matrix of doubles. The shape is fixed at construction.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> values);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> flat() noexcept { return data_; }
  std::span<const double> flat() const noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

/// Gathers the listed rows into a new matrix, preserving order.
Matrix select_rows(const Matrix& m, std::span<const std::size_t> indices);

/// Returns a copy with every entry multiplied by `factor`.
Matrix scaled(const Matrix& m, double factor);

void require_shape(const Matrix& m, std::size_t rows, std::size_t cols, const std::string& what);
void require_finite(std::span<const double> values, const std::string& what);

/// Index of the largest entry; ties resolve to the lowest index.
std::size_t argmax(std::span<const double> values);

}  // namespace driftlab
