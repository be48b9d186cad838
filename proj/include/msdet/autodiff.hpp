#pragma once

#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "msdet/tensor.hpp"

namespace msdet {

// A learnable tensor. Gradients accumulate across backward passes until
// zero_grad() is called.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  Parameter() = default;
  Parameter(std::string n, Tensor v)
      : name(std::move(n)), value(std::move(v)), grad(value.shape, 0.0) {}

  void zero_grad() { std::fill(grad.data.begin(), grad.data.end(), 0.0); }
};

class Tape;

// Handle to a node on a tape.
struct Value {
  Tape* tape = nullptr;
  int idx = -1;

  bool valid() const { return tape != nullptr; }
  const Tensor& val() const;
  const Shape& shape() const;
  size_t numel() const { return val().numel(); }
};

// Reverse-mode tape. Nodes are recorded in topological (creation) order;
// backward() replays vector-Jacobian products in reverse order.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Value constant(Tensor t) { return push(std::move(t), false, {}); }

  Value leaf(Parameter& p) {
    Value v = push(p.value, true, {});
    param_nodes_.push_back({v.idx, &p});
    return v;
  }

  // Detached copy: same values, no gradient path.
  Value detach(Value v) { return constant(v.val()); }

  Value push(Tensor out, bool needs_grad, std::function<void(Tape&, int)> vjp) {
    nodes_.push_back(Node{std::move(out), Tensor{}, std::move(vjp), needs_grad});
    return Value{this, static_cast<int>(nodes_.size()) - 1};
  }

  const Tensor& value(int idx) const { return nodes_[idx].value; }
  bool needs_grad(int idx) const { return nodes_[idx].needs_grad; }

  // Output gradient of node idx (valid during backward).
  const Tensor& grad(int idx) const { return nodes_[idx].grad; }

  void accum(int idx, const Tensor& g) {
    Node& n = nodes_[idx];
    if (!n.needs_grad) return;
    if (n.grad.data.empty()) n.grad = Tensor(n.value.shape, 0.0);
    for (size_t i = 0; i < g.data.size(); ++i) n.grad.data[i] += g.data[i];
  }
  void accum_at(int idx, size_t flat, double g) {
    Node& n = nodes_[idx];
    if (!n.needs_grad) return;
    if (n.grad.data.empty()) n.grad = Tensor(n.value.shape, 0.0);
    n.grad.data[flat] += g;
  }

  // Backpropagate from a scalar loss; accumulates into every reachable
  // Parameter's grad. Node grads are reset first, so repeated calls over the
  // same tape are bit-identical.
  void backward(Value loss) {
    MSDET_CHECK(loss.tape == this, "backward: loss from a different tape");
    MSDET_CHECK(loss.val().numel() == 1, "backward: loss must be scalar, got ",
                shape_str(loss.shape()));
    for (auto& n : nodes_) n.grad = Tensor{};
    Node& ln = nodes_[loss.idx];
    MSDET_CHECK(ln.needs_grad, "backward: loss does not depend on any parameter");
    ln.grad = Tensor(ln.value.shape, 1.0);
    for (int i = loss.idx; i >= 0; --i) {
      Node& n = nodes_[i];
      if (n.needs_grad && !n.grad.data.empty() && n.vjp) n.vjp(*this, i);
    }
    for (auto& [idx, p] : param_nodes_) {
      const Tensor& g = nodes_[idx].grad;
      if (g.data.empty()) continue;
      for (size_t i = 0; i < g.data.size(); ++i) p->grad.data[i] += g.data[i];
    }
  }

  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;                           // output-cotangent, set during backward
    std::function<void(Tape&, int)> vjp;   // pushes cotangents to parents
    bool needs_grad = false;
  };
  std::deque<Node> nodes_;  // deque: references from value() stay valid
  std::vector<std::pair<int, Parameter*>> param_nodes_;
};

inline const Tensor& Value::val() const { return tape->value(idx); }
inline const Shape& Value::shape() const { return tape->value(idx).shape; }

// ---------------------------------------------------------------------------
// Broadcasting machinery
// ---------------------------------------------------------------------------

namespace detail {

// Per-output-index source offsets for a broadcast binary op.
struct BcastPlan {
  Shape out_shape;
  std::vector<uint32_t> ia, ib;  // out flat index -> operand flat indices
  bool same_shape = false;
};

inline BcastPlan make_bcast_plan(const Shape& a, const Shape& b) {
  BcastPlan plan;
  if (a == b) {
    plan.out_shape = a;
    plan.same_shape = true;
    return plan;
  }
  plan.out_shape = broadcast_shapes(a, b);
  const size_t nd = plan.out_shape.size();
  auto padded_strides = [&](const Shape& s) {
    std::vector<size_t> st(nd, 0);
    auto raw = row_major_strides(s);
    const size_t off = nd - s.size();
    for (size_t i = 0; i < s.size(); ++i)
      st[off + i] = (s[i] == 1 && plan.out_shape[off + i] != 1) ? 0 : raw[i];
    return st;
  };
  const auto sa = padded_strides(a);
  const auto sb = padded_strides(b);
  const size_t n = shape_numel(plan.out_shape);
  plan.ia.resize(n);
  plan.ib.resize(n);
  std::vector<size_t> idx(nd, 0);
  size_t fa = 0, fb = 0;
  for (size_t i = 0; i < n; ++i) {
    plan.ia[i] = static_cast<uint32_t>(fa);
    plan.ib[i] = static_cast<uint32_t>(fb);
    for (size_t d = nd; d-- > 0;) {
      idx[d]++;
      fa += sa[d];
      fb += sb[d];
      if (idx[d] < plan.out_shape[d]) break;
      fa -= sa[d] * plan.out_shape[d];
      fb -= sb[d] * plan.out_shape[d];
      idx[d] = 0;
    }
  }
  return plan;
}

}  // namespace detail

// Binary elementwise op with numpy-style broadcasting.
// fwd(x, y) -> out; dfdx/dfdy give partials at (x, y).
template <typename F, typename Dx, typename Dy>
Value binary_bcast(Value a, Value b, F fwd, Dx dfdx, Dy dfdy, const char* opname) {
  Tape& t = *a.tape;
  MSDET_CHECK(b.tape == a.tape, opname, ": operands on different tapes");
  const Tensor& av = a.val();
  const Tensor& bv = b.val();
  auto plan = std::make_shared<detail::BcastPlan>(
      detail::make_bcast_plan(av.shape, bv.shape));
  Tensor out(plan->out_shape);
  if (plan->same_shape) {
    for (size_t i = 0; i < out.data.size(); ++i)
      out.data[i] = fwd(av.data[i], bv.data[i]);
  } else {
    for (size_t i = 0; i < out.data.size(); ++i)
      out.data[i] = fwd(av.data[plan->ia[i]], bv.data[plan->ib[i]]);
  }
  const bool needs = t.needs_grad(a.idx) || t.needs_grad(b.idx);
  std::function<void(Tape&, int)> vjp;
  if (needs) {
    vjp = [a, b, plan, dfdx, dfdy](Tape& tp, int self) {
      const Tensor& g = tp.grad(self);
      const Tensor& x = tp.value(a.idx);
      const Tensor& y = tp.value(b.idx);
      if (plan->same_shape) {
        for (size_t i = 0; i < g.data.size(); ++i) {
          tp.accum_at(a.idx, i, g.data[i] * dfdx(x.data[i], y.data[i]));
          tp.accum_at(b.idx, i, g.data[i] * dfdy(x.data[i], y.data[i]));
        }
      } else {
        for (size_t i = 0; i < g.data.size(); ++i) {
          const double xv = x.data[plan->ia[i]];
          const double yv = y.data[plan->ib[i]];
          tp.accum_at(a.idx, plan->ia[i], g.data[i] * dfdx(xv, yv));
          tp.accum_at(b.idx, plan->ib[i], g.data[i] * dfdy(xv, yv));
        }
      }
    };
  }
  return t.push(std::move(out), needs, std::move(vjp));
}

inline Value add(Value a, Value b) {
  return binary_bcast(
      a, b, [](double x, double y) { return x + y; },
      [](double, double) { return 1.0; }, [](double, double) { return 1.0; },
      "add");
}
inline Value sub(Value a, Value b) {
  return binary_bcast(
      a, b, [](double x, double y) { return x - y; },
      [](double, double) { return 1.0; }, [](double, double) { return -1.0; },
      "sub");
}
inline Value mul(Value a, Value b) {
  return binary_bcast(
      a, b, [](double x, double y) { return x * y; },
      [](double, double y) { return y; }, [](double x, double) { return x; },
      "mul");
}
inline Value div(Value a, Value b) {
  return binary_bcast(
      a, b, [](double x, double y) { return x / y; },
      [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); }, "div");
}
// Ties take the left operand's gradient.
inline Value vmin(Value a, Value b) {
  return binary_bcast(
      a, b, [](double x, double y) { return x < y ? x : y; },
      [](double x, double y) { return x <= y ? 1.0 : 0.0; },
      [](double x, double y) { return x <= y ? 0.0 : 1.0; }, "min");
}
inline Value vmax(Value a, Value b) {
  return binary_bcast(
      a, b, [](double x, double y) { return x > y ? x : y; },
      [](double x, double y) { return x >= y ? 1.0 : 0.0; },
      [](double x, double y) { return x >= y ? 0.0 : 1.0; }, "max");
}

// Unary elementwise op. dfdx receives (input, output).
template <typename F, typename D>
Value unary_op(Value a, F fwd, D dfdx) {
  Tape& t = *a.tape;
  const Tensor& av = a.val();
  Tensor out(av.shape);
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = fwd(av.data[i]);
  const bool needs = t.needs_grad(a.idx);
  std::function<void(Tape&, int)> vjp;
  if (needs) {
    vjp = [a, dfdx](Tape& tp, int self) {
      const Tensor& g = tp.grad(self);
      const Tensor& x = tp.value(a.idx);
      const Tensor& y = tp.value(self);
      for (size_t i = 0; i < g.data.size(); ++i)
        tp.accum_at(a.idx, i, g.data[i] * dfdx(x.data[i], y.data[i]));
    };
  }
  return t.push(std::move(out), needs, std::move(vjp));
}

inline Value neg(Value a) {
  return unary_op(a, [](double x) { return -x; },
                  [](double, double) { return -1.0; });
}
inline Value scale(Value a, double c) {
  return unary_op(a, [c](double x) { return c * x; },
                  [c](double, double) { return c; });
}
inline Value add_const(Value a, double c) {
  return unary_op(a, [c](double x) { return x + c; },
                  [](double, double) { return 1.0; });
}
inline Value vtanh(Value a) {
  return unary_op(a, [](double x) { return std::tanh(x); },
                  [](double, double y) { return 1.0 - y * y; });
}
inline Value relu(Value a) {
  return unary_op(a, [](double x) { return x > 0.0 ? x : 0.0; },
                  [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}
inline Value vabs(Value a) {
  return unary_op(a, [](double x) { return std::fabs(x); },
                  [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}
inline Value sigmoid(Value a) {
  return unary_op(
      a,
      [](double x) {
        return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                        : std::exp(x) / (1.0 + std::exp(x));
      },
      [](double, double y) { return y * (1.0 - y); });
}

inline constexpr double kInverseSigmoidEps = 1e-5;

// Logit with input clamped to [eps, 1-eps]; gradient is zero in the clamped
// region.
inline Value inverse_sigmoid(Value a, double eps = kInverseSigmoidEps) {
  return unary_op(
      a,
      [eps](double x) {
        const double c = std::min(std::max(x, eps), 1.0 - eps);
        return std::log(c / (1.0 - c));
      },
      [eps](double x, double) {
        if (x < eps || x > 1.0 - eps) return 0.0;
        return 1.0 / (x * (1.0 - x));
      });
}

// sigma(logit(p) + d), the logit-space shift used for box refinement. Computed
// fused so that d == 0 returns p bitwise; the separate sigmoid/logit round trip
// loses ulps and would drift anchors across layers.
inline Value logit_shift(Value p, Value d, double eps = kInverseSigmoidEps) {
  auto fwd = [eps](double pv, double dv) {
    if (dv == 0.0) return pv;
    const double pc = std::min(std::max(pv, eps), 1.0 - eps);
    const double y = dv + std::log(pc / (1.0 - pc));
    return y >= 0.0 ? 1.0 / (1.0 + std::exp(-y))
                    : std::exp(y) / (1.0 + std::exp(y));
  };
  return binary_bcast(
      p, d, fwd,
      [eps, fwd](double pv, double dv) {
        if (pv < eps || pv > 1.0 - eps) return 0.0;
        const double r = fwd(pv, dv);
        return r * (1.0 - r) / (pv * (1.0 - pv));
      },
      [fwd](double pv, double dv) {
        const double r = fwd(pv, dv);
        return r * (1.0 - r);
      },
      "logit_shift");
}

// log with the input clamped below at `floor`; flat gradient in the clamp.
inline Value vlog(Value a, double floor = 1e-12) {
  return unary_op(
      a, [floor](double x) { return std::log(std::max(x, floor)); },
      [floor](double x, double) { return x > floor ? 1.0 / x : 0.0; });
}
inline Value vexp(Value a) {
  return unary_op(a, [](double x) { return std::exp(x); },
                  [](double, double y) { return y; });
}
inline Value clampv(Value a, double lo, double hi) {
  return unary_op(
      a, [lo, hi](double x) { return std::min(std::max(x, lo), hi); },
      [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------------------
// Matrix ops
// ---------------------------------------------------------------------------

inline Value matmul(Value a, Value b) {
  Tape& t = *a.tape;
  const Tensor& A = a.val();
  const Tensor& B = b.val();
  MSDET_CHECK(A.ndim() == 2 && B.ndim() == 2, "matmul: expects 2D operands, got ",
              shape_str(A.shape), " and ", shape_str(B.shape));
  MSDET_CHECK(A.shape[1] == B.shape[0], "matmul: inner extents disagree: ",
              shape_str(A.shape), " vs ", shape_str(B.shape));
  const size_t m = A.shape[0], k = A.shape[1], n = B.shape[1];
  Tensor out({m, n});
  for (size_t i = 0; i < m; ++i) {
    const double* arow = &A.data[i * k];
    double* orow = &out.data[i * n];
    for (size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = &B.data[p * n];
      for (size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  const bool needs = t.needs_grad(a.idx) || t.needs_grad(b.idx);
  std::function<void(Tape&, int)> vjp;
  if (needs) {
    vjp = [a, b, m, k, n](Tape& tp, int self) {
      const Tensor& g = tp.grad(self);
      const Tensor& A2 = tp.value(a.idx);
      const Tensor& B2 = tp.value(b.idx);
      if (tp.needs_grad(a.idx)) {
        Tensor ga({m, k});
        for (size_t i = 0; i < m; ++i)
          for (size_t j = 0; j < n; ++j) {
            const double gv = g.data[i * n + j];
            if (gv == 0.0) continue;
            for (size_t p = 0; p < k; ++p)
              ga.data[i * k + p] += gv * B2.data[p * n + j];
          }
        tp.accum(a.idx, ga);
      }
      if (tp.needs_grad(b.idx)) {
        Tensor gb({k, n});
        for (size_t i = 0; i < m; ++i)
          for (size_t p = 0; p < k; ++p) {
            const double av = A2.data[i * k + p];
            if (av == 0.0) continue;
            for (size_t j = 0; j < n; ++j)
              gb.data[p * n + j] += av * g.data[i * n + j];
          }
        tp.accum(b.idx, gb);
      }
    };
  }
  return t.push(std::move(out), needs, std::move(vjp));
}

inline Value transpose2d(Value a) {
  Tape& t = *a.tape;
  const Tensor& A = a.val();
  MSDET_CHECK(A.ndim() == 2, "transpose2d: expects 2D, got ", shape_str(A.shape));
  const size_t m = A.shape[0], n = A.shape[1];
  Tensor out({n, m});
  for (size_t i = 0; i < m; ++i)
    for (size_t j = 0; j < n; ++j) out.data[j * m + i] = A.data[i * n + j];
  const bool needs = t.needs_grad(a.idx);
  std::function<void(Tape&, int)> vjp;
  if (needs) {
    vjp = [a, m, n](Tape& tp, int self) {
      const Tensor& g = tp.grad(self);
      Tensor ga({m, n});
      for (size_t j = 0; j < n; ++j)
        for (size_t i = 0; i < m; ++i) ga.data[i * n + j] = g.data[j * m + i];
      tp.accum(a.idx, ga);
    };
  }
  return t.push(std::move(out), needs, std::move(vjp));
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

inline Value reshape(Value a, Shape s) {
  Tape& t = *a.tape;
  const Tensor& A = a.val();
  MSDET_CHECK(shape_numel(s) == A.numel(), "reshape: ", shape_str(A.shape),
              " -> ", shape_str(s), " changes element count");
  Tensor out(std::move(s), A.data);
  const bool needs = t.needs_grad(a.idx);
  std::function<void(Tape&, int)> vjp;
  if (needs) {
    vjp = [a](Tape& tp, int self) {
      const Tensor& g = tp.grad(self);
      for (size_t i = 0; i < g.data.size(); ++i) tp.accum_at(a.idx, i, g.data[i]);
    };
  }
  return t.push(std::move(out), needs, std::move(vjp));
}

inline Value slice(Value a, size_t axis, size_t start, size_t len) {
  Tape& t = *a.tape;
  const Tensor& A = a.val();
  MSDET_CHECK(axis < A.ndim(), "slice: axis ", axis, " out of range for ",
              shape_str(A.shape));
  MSDET_CHECK(start + len <= A.shape[axis], "slice: [", start, ", ", start + len,
              ") exceeds extent ", A.shape[axis]);
  Shape os = A.shape;
  os[axis] = len;
  size_t outer = 1, inner = 1;
  for (size_t i = 0; i < axis; ++i) outer *= A.shape[i];
  for (size_t i = axis + 1; i < A.ndim(); ++i) inner *= A.shape[i];
  const size_t in_ax = A.shape[axis];
  Tensor out(os);
  for (size_t o = 0; o < outer; ++o)
    for (size_t j = 0; j < len; ++j)
      std::copy_n(&A.data[(o * in_ax + start + j) * inner], inner,
                  &out.data[(o * len + j) * inner]);
  const bool needs = t.needs_grad(a.idx);
  std::function<void(Tape&, int)> vjp;
  if (needs) {
    vjp = [a, outer, inner, in_ax, start, len](Tape& tp, int self) {
      const Tensor& g = tp.grad(self);
      for (size_t o = 0; o < outer; ++o)
        for (size_t j = 0; j < len; ++j) {
          const size_t src = (o * len + j) * inner;
          const size_t dst = (o * in_ax + start + j) * inner;
          for (size_t i = 0; i < inner; ++i)
            tp.accum_at(a.idx, dst + i, g.data[src + i]);
        }
    };
  }
  return t.push(std::move(out), needs, std::move(vjp));
}

inline Value concat(const std::vector<Value>& parts, size_t axis) {
  MSDET_CHECK(!parts.empty(), "concat: no inputs");
  Tape& t = *parts[0].tape;
  const Shape& s0 = parts[0].shape();
  MSDET_CHECK(axis < s0.size(), "concat: axis ", axis, " out of range");
  Shape os = s0;
  size_t total = 0;
  for (const Value& p : parts) {
    const Shape& s = p.shape();
    MSDET_CHECK(s.size() == s0.size(), "concat: rank mismatch");
    for (size_t i = 0; i < s.size(); ++i)
      MSDET_CHECK(i == axis || s[i] == s0[i], "concat: shape mismatch at axis ",
                  i, ": ", shape_str(s), " vs ", shape_str(s0));
    total += s[axis];
  }
  os[axis] = total;
  size_t outer = 1, inner = 1;
  for (size_t i = 0; i < axis; ++i) outer *= s0[i];
  for (size_t i = axis + 1; i < s0.size(); ++i) inner *= s0[i];
  Tensor out(os);
  std::vector<size_t> offsets;
  size_t off = 0;
  for (const Value& p : parts) {
    offsets.push_back(off);
    const Tensor& pv = p.val();
    const size_t ax = pv.shape[axis];
    for (size_t o = 0; o < outer; ++o)
      std::copy_n(&pv.data[o * ax * inner], ax * inner,
                  &out.data[(o * total + off) * inner]);
    off += ax;
  }
  bool needs = false;
  for (const Value& p : parts) needs = needs || t.needs_grad(p.idx);
  std::function<void(Tape&, int)> vjp;
  if (needs) {
    vjp = [parts, offsets, outer, inner, total, axis](Tape& tp, int self) {
      const Tensor& g = tp.grad(self);
      for (size_t pi = 0; pi < parts.size(); ++pi) {
        const Value& p = parts[pi];
        if (!tp.needs_grad(p.idx)) continue;
        const size_t ax = tp.value(p.idx).shape[axis];
        for (size_t o = 0; o < outer; ++o) {
          const size_t src = (o * total + offsets[pi]) * inner;
          const size_t dst = o * ax * inner;
          for (size_t i = 0; i < ax * inner; ++i)
            tp.accum_at(p.idx, dst + i, g.data[src + i]);
        }
      }
    };
  }
  return t.push(std::move(out), needs, std::move(vjp));
}

// Row gather on a 2D tensor; duplicate indices accumulate in the VJP.
inline Value gather_rows(Value a, std::vector<size_t> rows) {
  Tape& t = *a.tape;
  const Tensor& A = a.val();
  MSDET_CHECK(A.ndim() == 2, "gather_rows: expects 2D, got ", shape_str(A.shape));
  const size_t n = A.shape[1];
  Tensor out({rows.size(), n});
  for (size_t i = 0; i < rows.size(); ++i) {
    MSDET_CHECK(rows[i] < A.shape[0], "gather_rows: row ", rows[i],
                " out of range ", A.shape[0]);
    std::copy_n(&A.data[rows[i] * n], n, &out.data[i * n]);
  }
  const bool needs = t.needs_grad(a.idx);
  std::function<void(Tape&, int)> vjp;
  if (needs) {
    vjp = [a, rows = std::move(rows), n](Tape& tp, int self) {
      const Tensor& g = tp.grad(self);
      for (size_t i = 0; i < rows.size(); ++i)
        for (size_t j = 0; j < n; ++j)
          tp.accum_at(a.idx, rows[i] * n + j, g.data[i * n + j]);
    };
  }
  return t.push(std::move(out), needs, std::move(vjp));
}

// ---------------------------------------------------------------------------
// Reductions and normalizations
// ---------------------------------------------------------------------------

inline Value sum_all(Value a) {
  Tape& t = *a.tape;
  const Tensor& A = a.val();
  double s = 0.0;
  for (double v : A.data) s += v;
  const bool needs = t.needs_grad(a.idx);
  std::function<void(Tape&, int)> vjp;
  if (needs) {
    vjp = [a](Tape& tp, int self) {
      const double g = tp.grad(self).data[0];
      const size_t n = tp.value(a.idx).numel();
      for (size_t i = 0; i < n; ++i) tp.accum_at(a.idx, i, g);
    };
  }
  return t.push(Tensor::scalar(s), needs, std::move(vjp));
}

inline Value mean_all(Value a) {
  return scale(sum_all(a), 1.0 / static_cast<double>(a.numel()));
}

inline Value reduce_sum(Value a, size_t axis) {
  Tape& t = *a.tape;
  const Tensor& A = a.val();
  MSDET_CHECK(axis < A.ndim(), "reduce_sum: axis ", axis, " out of range for ",
              shape_str(A.shape));
  size_t outer = 1, inner = 1;
  for (size_t i = 0; i < axis; ++i) outer *= A.shape[i];
  for (size_t i = axis + 1; i < A.ndim(); ++i) inner *= A.shape[i];
  const size_t ax = A.shape[axis];
  Shape os;
  for (size_t i = 0; i < A.ndim(); ++i)
    if (i != axis) os.push_back(A.shape[i]);
  if (os.empty()) os = {1};
  Tensor out(os);
  for (size_t o = 0; o < outer; ++o)
    for (size_t j = 0; j < ax; ++j)
      for (size_t i = 0; i < inner; ++i)
        out.data[o * inner + i] += A.data[(o * ax + j) * inner + i];
  const bool needs = t.needs_grad(a.idx);
  std::function<void(Tape&, int)> vjp;
  if (needs) {
    vjp = [a, outer, inner, ax](Tape& tp, int self) {
      const Tensor& g = tp.grad(self);
      for (size_t o = 0; o < outer; ++o)
        for (size_t j = 0; j < ax; ++j)
          for (size_t i = 0; i < inner; ++i)
            tp.accum_at(a.idx, (o * ax + j) * inner + i, g.data[o * inner + i]);
    };
  }
  return t.push(std::move(out), needs, std::move(vjp));
}

// Numerically stabilized softmax along `axis`.
inline Value softmax(Value a, size_t axis) {
  Tape& t = *a.tape;
  const Tensor& A = a.val();
  MSDET_CHECK(axis < A.ndim(), "softmax: axis ", axis, " out of range for ",
              shape_str(A.shape));
  size_t outer = 1, inner = 1;
  for (size_t i = 0; i < axis; ++i) outer *= A.shape[i];
  for (size_t i = axis + 1; i < A.ndim(); ++i) inner *= A.shape[i];
  const size_t ax = A.shape[axis];
  Tensor out(A.shape);
  for (size_t o = 0; o < outer; ++o)
    for (size_t i = 0; i < inner; ++i) {
      double mx = -1e300;
      for (size_t j = 0; j < ax; ++j)
        mx = std::max(mx, A.data[(o * ax + j) * inner + i]);
      double z = 0.0;
      for (size_t j = 0; j < ax; ++j) {
        const size_t f = (o * ax + j) * inner + i;
        out.data[f] = std::exp(A.data[f] - mx);
        z += out.data[f];
      }
      for (size_t j = 0; j < ax; ++j) out.data[(o * ax + j) * inner + i] /= z;
    }
  const bool needs = t.needs_grad(a.idx);
  std::function<void(Tape&, int)> vjp;
  if (needs) {
    vjp = [a, outer, inner, ax](Tape& tp, int self) {
      const Tensor& g = tp.grad(self);
      const Tensor& y = tp.value(self);
      for (size_t o = 0; o < outer; ++o)
        for (size_t i = 0; i < inner; ++i) {
          double dot = 0.0;
          for (size_t j = 0; j < ax; ++j) {
            const size_t f = (o * ax + j) * inner + i;
            dot += g.data[f] * y.data[f];
          }
          for (size_t j = 0; j < ax; ++j) {
            const size_t f = (o * ax + j) * inner + i;
            tp.accum_at(a.idx, f, y.data[f] * (g.data[f] - dot));
          }
        }
    };
  }
  return t.push(std::move(out), needs, std::move(vjp));
}

// Layer normalization over the last axis, with affine parameters.
inline Value layer_norm(Value x, Value gamma, Value beta, double eps = 1e-5) {
  Tape& t = *x.tape;
  const Tensor& X = x.val();
  const size_t d = X.shape.back();
  MSDET_CHECK(gamma.numel() == d && beta.numel() == d,
              "layer_norm: affine params must have ", d, " elements");
  const size_t rows = X.numel() / d;
  Tensor out(X.shape);
  Tensor xhat(X.shape);
  std::vector<double> inv_sigma(rows);
  for (size_t r = 0; r < rows; ++r) {
    const double* xr = &X.data[r * d];
    double mu = 0.0;
    for (size_t i = 0; i < d; ++i) mu += xr[i];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (size_t i = 0; i < d; ++i) var += (xr[i] - mu) * (xr[i] - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_sigma[r] = is;
    for (size_t i = 0; i < d; ++i) {
      xhat.data[r * d + i] = (xr[i] - mu) * is;
      out.data[r * d + i] =
          xhat.data[r * d + i] * gamma.val().data[i] + beta.val().data[i];
    }
  }
  const bool needs = t.needs_grad(x.idx) || t.needs_grad(gamma.idx) ||
                     t.needs_grad(beta.idx);
  std::function<void(Tape&, int)> vjp;
  if (needs) {
    auto ctx = std::make_shared<std::pair<Tensor, std::vector<double>>>(
        std::move(xhat), std::move(inv_sigma));
    vjp = [x, gamma, beta, ctx, d, rows](Tape& tp, int self) {
      const Tensor& g = tp.grad(self);
      const Tensor& xh = ctx->first;
      const auto& is = ctx->second;
      const Tensor& gam = tp.value(gamma.idx);
      for (size_t r = 0; r < rows; ++r) {
        double sum_gy = 0.0, sum_gy_xh = 0.0;
        for (size_t i = 0; i < d; ++i) {
          const size_t f = r * d + i;
          const double gy = g.data[f] * gam.data[i];
          sum_gy += gy;
          sum_gy_xh += gy * xh.data[f];
          tp.accum_at(gamma.idx, i, g.data[f] * xh.data[f]);
          tp.accum_at(beta.idx, i, g.data[f]);
        }
        const double nd = static_cast<double>(d);
        for (size_t i = 0; i < d; ++i) {
          const size_t f = r * d + i;
          const double gy = g.data[f] * gam.data[i];
          tp.accum_at(x.idx, f,
                      is[r] * (gy - sum_gy / nd - xh.data[f] * sum_gy_xh / nd));
        }
      }
    };
  }
  return t.push(std::move(out), needs, std::move(vjp));
}

// ---------------------------------------------------------------------------
// Bilinear sampling
// ---------------------------------------------------------------------------

// Samples `map` [H x W x C] at `points` [P x 2] given as (x, y) pixel
// coordinates. Zero padding outside [0, W-1] x [0, H-1]; differentiable with
// respect to both map values and point coordinates.
inline Value bilinear_sample(Value map, Value points) {
  Tape& t = *map.tape;
  const Tensor& M = map.val();
  const Tensor& P = points.val();
  MSDET_CHECK(M.ndim() == 3, "bilinear_sample: map must be HxWxC, got ",
              shape_str(M.shape));
  MSDET_CHECK(P.ndim() == 2 && P.shape[1] == 2,
              "bilinear_sample: points must be Px2, got ", shape_str(P.shape));
  const long H = static_cast<long>(M.shape[0]);
  const long W = static_cast<long>(M.shape[1]);
  const size_t C = M.shape[2];
  const size_t np = P.shape[0];
  Tensor out({np, C});
  auto corner = [&](long yy, long xx, size_t c) -> double {
    if (yy < 0 || yy >= H || xx < 0 || xx >= W) return 0.0;
    return M.data[(static_cast<size_t>(yy) * W + xx) * C + c];
  };
  for (size_t p = 0; p < np; ++p) {
    const double x = P.data[p * 2 + 0];
    const double y = P.data[p * 2 + 1];
    const long x0 = static_cast<long>(std::floor(x));
    const long y0 = static_cast<long>(std::floor(y));
    const double fx = x - static_cast<double>(x0);
    const double fy = y - static_cast<double>(y0);
    for (size_t c = 0; c < C; ++c) {
      const double v00 = corner(y0, x0, c), v01 = corner(y0, x0 + 1, c);
      const double v10 = corner(y0 + 1, x0, c), v11 = corner(y0 + 1, x0 + 1, c);
      out.data[p * C + c] = (1 - fy) * ((1 - fx) * v00 + fx * v01) +
                            fy * ((1 - fx) * v10 + fx * v11);
    }
  }
  const bool needs = t.needs_grad(map.idx) || t.needs_grad(points.idx);
  std::function<void(Tape&, int)> vjp;
  if (needs) {
    vjp = [map, points, H, W, C, np](Tape& tp, int self) {
      const Tensor& g = tp.grad(self);
      const Tensor& M2 = tp.value(map.idx);
      const Tensor& P2 = tp.value(points.idx);
      auto corner2 = [&](long yy, long xx, size_t c) -> double {
        if (yy < 0 || yy >= H || xx < 0 || xx >= W) return 0.0;
        return M2.data[(static_cast<size_t>(yy) * W + xx) * C + c];
      };
      auto scatter = [&](long yy, long xx, size_t c, double gv) {
        if (yy < 0 || yy >= H || xx < 0 || xx >= W) return;
        tp.accum_at(map.idx, (static_cast<size_t>(yy) * W + xx) * C + c, gv);
      };
      for (size_t p = 0; p < np; ++p) {
        const double x = P2.data[p * 2 + 0];
        const double y = P2.data[p * 2 + 1];
        const long x0 = static_cast<long>(std::floor(x));
        const long y0 = static_cast<long>(std::floor(y));
        const double fx = x - static_cast<double>(x0);
        const double fy = y - static_cast<double>(y0);
        double gx = 0.0, gy = 0.0;
        for (size_t c = 0; c < C; ++c) {
          const double gv = g.data[p * C + c];
          if (gv == 0.0) continue;
          const double v00 = corner2(y0, x0, c), v01 = corner2(y0, x0 + 1, c);
          const double v10 = corner2(y0 + 1, x0, c),
                       v11 = corner2(y0 + 1, x0 + 1, c);
          if (tp.needs_grad(map.idx)) {
            scatter(y0, x0, c, gv * (1 - fy) * (1 - fx));
            scatter(y0, x0 + 1, c, gv * (1 - fy) * fx);
            scatter(y0 + 1, x0, c, gv * fy * (1 - fx));
            scatter(y0 + 1, x0 + 1, c, gv * fy * fx);
          }
          gx += gv * ((1 - fy) * (v01 - v00) + fy * (v11 - v10));
          gy += gv * ((1 - fx) * (v10 - v00) + fx * (v11 - v01));
        }
        if (tp.needs_grad(points.idx)) {
          tp.accum_at(points.idx, p * 2 + 0, gx);
          tp.accum_at(points.idx, p * 2 + 1, gy);
        }
      }
    };
  }
  return t.push(std::move(out), needs, std::move(vjp));
}

}  // namespace msdet
