#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

#include "rhpo/errors.h"

namespace rhpo {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<Mat>;
using ConstMatMap = Eigen::Map<const Mat>;

// Dense row-major tensor of 64-bit reals, rank 1 or 2. Rank-1 tensors are
// stored as a single row; the rank is kept so shapes round-trip through
// checkpoints unchanged.
class Tensor {
 public:
  Tensor() : rows_(0), cols_(0), rank_(2) {}

  static Tensor zeros(int rows, int cols) { return Tensor(rows, cols, 0.0); }
  static Tensor zeros_like(const Tensor& t) {
    Tensor out(t.rows_, t.cols_, 0.0);
    out.rank_ = t.rank_;
    return out;
  }
  static Tensor full(int rows, int cols, double v) { return Tensor(rows, cols, v); }
  static Tensor scalar(double v) {
    Tensor t(1, 1, v);
    t.rank_ = 2;
    return t;
  }
  static Tensor vector(std::initializer_list<double> vals) {
    Tensor t(1, static_cast<int>(vals.size()), 0.0);
    int j = 0;
    for (double v : vals) t.data_[j++] = v;
    t.rank_ = 1;
    return t;
  }
  static Tensor from_vector(const std::vector<double>& vals) {
    Tensor t(1, static_cast<int>(vals.size()), 0.0);
    t.data_ = vals;
    t.rank_ = 1;
    return t;
  }
  static Tensor from_mat(const Mat& m) {
    Tensor t(static_cast<int>(m.rows()), static_cast<int>(m.cols()), 0.0);
    MatMap(t.data_.data(), t.rows_, t.cols_) = m;
    return t;
  }

  Tensor(int rows, int cols, double fill)
      : rows_(rows), cols_(cols), rank_(2),
        data_(static_cast<size_t>(rows) * static_cast<size_t>(cols), fill) {
    if (rows < 0 || cols < 0) throw DimError("negative tensor dimension");
  }

  int rows() const { return rows_; }
  int cols() const { return cols_; }
  int rank() const { return rank_; }
  std::int64_t size() const { return static_cast<std::int64_t>(rows_) * cols_; }
  bool empty() const { return size() == 0; }

  Tensor& set_rank(int r) {
    rank_ = r;
    return *this;
  }

  double& at(int r, int c) { return data_[static_cast<size_t>(r) * cols_ + c]; }
  double at(int r, int c) const { return data_[static_cast<size_t>(r) * cols_ + c]; }
  double& operator[](std::int64_t i) { return data_[i]; }
  double operator[](std::int64_t i) const { return data_[i]; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& raw() { return data_; }
  const std::vector<double>& raw() const { return data_; }

  MatMap map() { return MatMap(data_.data(), rows_, cols_); }
  ConstMatMap map() const { return ConstMatMap(data_.data(), rows_, cols_); }

  bool same_shape(const Tensor& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

  bool all_finite() const {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  std::string shape_str() const {
    return "[" + std::to_string(rows_) + "," + std::to_string(cols_) + "]";
  }

 private:
  int rows_, cols_;
  int rank_;
  std::vector<double> data_;
};

}  // namespace rhpo
