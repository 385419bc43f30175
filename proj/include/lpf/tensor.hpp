#pragma once

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "lpf/errors.hpp"

namespace lpf {

// Dense row-major float tensor. The single numeric container used by the
// imaging pipeline, the encoder and the matcher.
struct Tensor {
  std::vector<int64_t> shape;
  std::vector<float> data;

  Tensor() = default;
  explicit Tensor(std::vector<int64_t> s) : shape(std::move(s)) {
    data.assign(static_cast<size_t>(numel_of(shape)), 0.0f);
  }
  Tensor(std::vector<int64_t> s, std::vector<float> d)
      : shape(std::move(s)), data(std::move(d)) {
    if (static_cast<int64_t>(data.size()) != numel_of(shape))
      throw ShapeError("Tensor: data size does not match shape");
  }

  static int64_t numel_of(const std::vector<int64_t>& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
  }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int ndim() const { return static_cast<int>(shape.size()); }
  int64_t dim(int i) const { return shape[static_cast<size_t>(i)]; }

  float& at(std::initializer_list<int64_t> idx) {
    return data[static_cast<size_t>(flat(idx))];
  }
  float at(std::initializer_list<int64_t> idx) const {
    return data[static_cast<size_t>(flat(idx))];
  }

  int64_t flat(std::initializer_list<int64_t> idx) const {
    int64_t off = 0;
    size_t i = 0;
    for (int64_t v : idx) {
      off = off * shape[i] + v;
      ++i;
    }
    return off;
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  static Tensor zeros(std::vector<int64_t> s) { return Tensor(std::move(s)); }
  static Tensor full(std::vector<int64_t> s, float v) {
    Tensor t(std::move(s));
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
  }

  std::string shape_str() const {
    std::string out = "[";
    for (size_t i = 0; i < shape.size(); ++i) {
      if (i) out += ",";
      out += std::to_string(shape[i]);
    }
    return out + "]";
  }
};

}  // namespace lpf
