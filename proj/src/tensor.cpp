#include "driftlab/tensor.hpp"

#include <cmath>

#include "driftlab/error.hpp"

namespace driftlab {

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> values)
    : rows_(rows), cols_(cols), data_(std::move(values)) {
  if (data_.size() != rows * cols) {
    raise(ErrorKind::Shape, "matrix data length " + std::to_string(data_.size()) +
                                " does not match " + std::to_string(rows) + "x" +
                                std::to_string(cols));
  }
}

Matrix select_rows(const Matrix& m, std::span<const std::size_t> indices) {
  Matrix out(indices.size(), m.cols());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= m.rows()) raise(ErrorKind::Shape, "row index out of range");
    auto src = m.row(indices[i]);
    auto dst = out.row(i);
    std::copy(src.begin(), src.end(), dst.begin());
  }
  return out;
}

Matrix scaled(const Matrix& m, double factor) {
  Matrix out = m;
  for (double& v : out.flat()) v *= factor;
  return out;
}

void require_shape(const Matrix& m, std::size_t rows, std::size_t cols, const std::string& what) {
  if (m.rows() != rows || m.cols() != cols) {
    raise(ErrorKind::Shape, what + ": expected " + std::to_string(rows) + "x" +
                                std::to_string(cols) + ", got " + std::to_string(m.rows()) +
                                "x" + std::to_string(m.cols()));
  }
}

void require_finite(std::span<const double> values, const std::string& what) {
  for (double v : values) {
    if (!std::isfinite(v)) raise(ErrorKind::Numeric, what + " contains a non-finite value");
  }
}

std::size_t argmax(std::span<const double> values) {
  std::size_t best = 0;
  for (std::size_t k = 1; k < values.size(); ++k) {
    if (values[k] > values[best]) best = k;
  }
  return best;
}

}  // namespace driftlab
