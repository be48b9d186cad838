#pragma once

#include <algorithm>
#include <array>
#include <cmath>

#include "msdet/autodiff.hpp"

namespace msdet {

// Normalized center-form box (cx, cy, w, h).
struct Box {
  double cx = 0, cy = 0, w = 0, h = 0;

  double x0() const { return cx - 0.5 * w; }
  double y0() const { return cy - 0.5 * h; }
  double x1() const { return cx + 0.5 * w; }
  double y1() const { return cy + 0.5 * h; }
  double area() const { return w * h; }
};

inline double iou(const Box& a, const Box& b) {
  const double ix = std::max(0.0, std::min(a.x1(), b.x1()) - std::max(a.x0(), b.x0()));
  const double iy = std::max(0.0, std::min(a.y1(), b.y1()) - std::max(a.y0(), b.y0()));
  const double inter = ix * iy;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

// GIoU = IoU - (hull - union) / hull, in [-1, 1].
inline double giou(const Box& a, const Box& b) {
  MSDET_CHECK(a.w > 0 && a.h > 0 && b.w > 0 && b.h > 0,
              "giou: boxes must have positive extents");
  const double ix = std::max(0.0, std::min(a.x1(), b.x1()) - std::max(a.x0(), b.x0()));
  const double iy = std::max(0.0, std::min(a.y1(), b.y1()) - std::max(a.y0(), b.y0()));
  const double inter = ix * iy;
  const double uni = a.area() + b.area() - inter;
  const double hx = std::max(a.x1(), b.x1()) - std::min(a.x0(), b.x0());
  const double hy = std::max(a.y1(), b.y1()) - std::min(a.y0(), b.y0());
  const double hull = hx * hy;
  return inter / uni - (hull - uni) / hull;
}

// Differentiable row-wise GIoU between two [n x 4] center-form box tensors.
// Returns [n x 1].
inline Value giou_rows(Value a, Value b) {
  MSDET_CHECK(a.shape().size() == 2 && a.shape()[1] == 4, "giou_rows: a must be nx4");
  MSDET_CHECK(b.shape() == a.shape(), "giou_rows: shape mismatch");
  const size_t n = a.shape()[0];
  {
    const Tensor& av = a.val();
    const Tensor& bv = b.val();
    for (size_t i = 0; i < n; ++i)
      MSDET_CHECK(av.data[i * 4 + 2] > 0 && av.data[i * 4 + 3] > 0 &&
                      bv.data[i * 4 + 2] > 0 && bv.data[i * 4 + 3] > 0,
                  "giou_rows: boxes must have positive extents (row ", i, ")");
  }
  auto corners = [](Value box) {
    Value cx = slice(box, 1, 0, 1), cy = slice(box, 1, 1, 1);
    Value w = slice(box, 1, 2, 1), h = slice(box, 1, 3, 1);
    Value hw = scale(w, 0.5), hh = scale(h, 0.5);
    return std::array<Value, 6>{sub(cx, hw), sub(cy, hh), add(cx, hw),
                                add(cy, hh), w, h};
  };
  auto [ax0, ay0, ax1, ay1, aw, ah] = corners(a);
  auto [bx0, by0, bx1, by1, bw, bh] = corners(b);
  Value ix = relu(sub(vmin(ax1, bx1), vmax(ax0, bx0)));
  Value iy = relu(sub(vmin(ay1, by1), vmax(ay0, by0)));
  Value inter = mul(ix, iy);
  Value uni = sub(add(mul(aw, ah), mul(bw, bh)), inter);
  Value hull = mul(sub(vmax(ax1, bx1), vmin(ax0, bx0)),
                   sub(vmax(ay1, by1), vmin(ay0, by0)));
  return sub(div(inter, uni), div(sub(hull, uni), hull));
}

// Row-wise L1 distance between [n x 4] box tensors -> [n x 1].
inline Value l1_rows(Value a, Value b) {
  return reduce_sum(vabs(sub(a, b)), 1);
}

}  // namespace msdet
