#pragma once

#include <cassert>
#include <cstddef>
#include <vector>

namespace cotlab {

/// Dense row-major double matrix. The only tensor type in the project;
/// per-head views are expressed as (pointer, stride) pairs into these.
struct Matrix {
  int rows = 0;
  int cols = 0;
  std::vector<double> v;

  Matrix() = default;
  Matrix(int r, int c) : rows(r), cols(c), v(static_cast<std::size_t>(r) * c, 0.0) {}

  double& at(int r, int c) { return v[static_cast<std::size_t>(r) * cols + c]; }
  double at(int r, int c) const { return v[static_cast<std::size_t>(r) * cols + c]; }

  double* row(int r) { return v.data() + static_cast<std::size_t>(r) * cols; }
  const double* row(int r) const { return v.data() + static_cast<std::size_t>(r) * cols; }

  double* data() { return v.data(); }
  const double* data() const { return v.data(); }

  std::size_t size() const { return v.size(); }
  void fill(double x) { std::fill(v.begin(), v.end(), x); }

  bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }
  bool operator==(const Matrix&) const = default;
};

using Vec = std::vector<double>;

}  // namespace cotlab
