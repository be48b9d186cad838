#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "msdet/common.hpp"

namespace msdet {

using Shape = std::vector<size_t>;

inline size_t shape_numel(const Shape& s) {
  size_t n = 1;
  for (size_t e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

// Dense row-major tensor of doubles.
struct Tensor {
  Shape shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(Shape s, double fill = 0.0)
      : shape(std::move(s)), data(shape_numel(shape), fill) {}
  Tensor(Shape s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
    MSDET_CHECK(data.size() == shape_numel(shape), "tensor data length ",
                data.size(), " does not match shape ", shape_str(shape));
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }
  static Tensor vec(std::initializer_list<double> vs) {
    return Tensor({vs.size()}, std::vector<double>(vs));
  }

  size_t numel() const { return data.size(); }
  size_t ndim() const { return shape.size(); }
  size_t extent(size_t axis) const { return shape.at(axis); }

  double& operator[](size_t i) { return data[i]; }
  double operator[](size_t i) const { return data[i]; }

  // 2D access.
  double& at(size_t r, size_t c) { return data[r * shape[1] + c]; }
  double at(size_t r, size_t c) const { return data[r * shape[1] + c]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

inline std::vector<size_t> row_major_strides(const Shape& s) {
  std::vector<size_t> st(s.size(), 1);
  for (size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

// Numpy-style broadcast of two shapes; fails if incompatible.
inline Shape broadcast_shapes(const Shape& a, const Shape& b) {
  const size_t nd = std::max(a.size(), b.size());
  Shape out(nd, 1);
  for (size_t i = 0; i < nd; ++i) {
    const size_t ea = i < nd - a.size() ? 1 : a[i - (nd - a.size())];
    const size_t eb = i < nd - b.size() ? 1 : b[i - (nd - b.size())];
    MSDET_CHECK(ea == eb || ea == 1 || eb == 1, "shapes not broadcastable: ",
                shape_str(a), " vs ", shape_str(b));
    out[i] = std::max(ea, eb);
  }
  return out;
}

}  // namespace msdet
