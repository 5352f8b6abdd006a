#pragma once

#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "layoutgen/common.hpp"

namespace layoutgen {

// Dense row-major tensor of 64-bit floats.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
    data.assign(numel(shape), 0.0);
  }
  Tensor(std::vector<int> s, std::vector<double> d)
      : shape(std::move(s)), data(std::move(d)) {
    if (static_cast<std::size_t>(numel(shape)) != data.size())
      throw ShapeError("tensor data size does not match shape");
  }

  static long long numel(const std::vector<int>& s) {
    long long n = 1;
    for (int d : s) {
      if (d < 0) throw ShapeError("negative dimension");
      n *= d;
    }
    return n;
  }

  static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }

  static Tensor full(std::vector<int> s, double v) {
    Tensor t(std::move(s));
    for (double& x : t.data) x = v;
    return t;
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  long long size() const { return static_cast<long long>(data.size()); }
  int rank() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }

  double& operator[](long long i) { return data[static_cast<std::size_t>(i)]; }
  double operator[](long long i) const { return data[static_cast<std::size_t>(i)]; }

  double& at2(int i, int j) { return data[static_cast<std::size_t>(i) * shape[1] + j]; }
  double at2(int i, int j) const { return data[static_cast<std::size_t>(i) * shape[1] + j]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }

  std::string shape_str() const {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
      if (i) s += ",";
      s += std::to_string(shape[i]);
    }
    return s + "]";
  }
};

}  // namespace layoutgen
