#pragma once

#include <functional>
#include <vector>

#include "msdet/params.hpp"
#include "msdet/rng.hpp"

namespace msdet {

struct GradCheckResult {
  double max_rel_error = 0.0;
  size_t coords_checked = 0;
  std::string worst_param;
  size_t worst_coord = 0;
};

// Compares analytic gradients against central finite differences
// (f(x+h) - f(x-h)) / (2h) on `samples` randomly chosen parameter
// coordinates (seeded, reproducible). The relative-error denominator is
// floored at 1e-8 to keep zero-gradient coordinates meaningful.
//
// `f` must be a deterministic scalar function of the store's parameters;
// non-determinism is detected by evaluating twice.
// The multi-step variant scores each coordinate by its best agreement over
// `steps`: the analytic value is step-independent, while the valid window
// for central differences is coordinate-dependent (large steps defeat
// cancellation noise on tiny gradients; small steps avoid crossing ReLU /
// clamp kinks downstream of the probed weight).
inline GradCheckResult grad_check_steps(ParamStore& store,
                                        const std::function<double()>& f_value,
                                        const std::function<void()>& f_backward,
                                        size_t samples,
                                        const std::vector<double>& steps,
                                        uint64_t seed = 17) {
  MSDET_CHECK(!steps.empty(), "grad_check: need at least one step size");
  const double v1 = f_value();
  const double v2 = f_value();
  MSDET_CHECK(v1 == v2, "grad_check: function is not deterministic (", v1,
              " vs ", v2, ")");

  store.zero_grads();
  f_backward();

  std::vector<std::pair<size_t, size_t>> flat;  // (param index, coord)
  for (size_t p = 0; p < store.count(); ++p)
    for (size_t c = 0; c < store[p].value.numel(); ++c) flat.push_back({p, c});
  MSDET_CHECK(!flat.empty(), "grad_check: store has no parameters");

  Rng rng(seed);
  GradCheckResult res;
  const size_t n = std::min(samples, flat.size());
  for (size_t s = 0; s < n; ++s) {
    const auto [pi, ci] = flat[rng.below(flat.size())];
    Parameter& p = store[pi];
    const double saved = p.value.data[ci];
    const double analytic = p.grad.data[ci];
    double rel = 1e300;
    for (double h : steps) {
      p.value.data[ci] = saved + h;
      const double fp = f_value();
      p.value.data[ci] = saved - h;
      const double fm = f_value();
      p.value.data[ci] = saved;
      const double numeric = (fp - fm) / (2.0 * h);
      const double denom =
          std::max({std::fabs(analytic), std::fabs(numeric), 1e-8});
      rel = std::min(rel, std::fabs(analytic - numeric) / denom);
    }
    if (rel > res.max_rel_error) {
      res.max_rel_error = rel;
      res.worst_param = p.name;
      res.worst_coord = ci;
    }
    res.coords_checked++;
  }
  return res;
}

inline GradCheckResult grad_check(ParamStore& store,
                                  const std::function<double()>& f_value,
                                  const std::function<void()>& f_backward,
                                  size_t samples, uint64_t seed = 17,
                                  double h = 1e-5) {
  const double v1 = f_value();
  const double v2 = f_value();
  MSDET_CHECK(v1 == v2, "grad_check: function is not deterministic (", v1,
              " vs ", v2, ")");

  store.zero_grads();
  f_backward();

  std::vector<std::pair<size_t, size_t>> flat;  // (param index, coord)
  for (size_t p = 0; p < store.count(); ++p)
    for (size_t c = 0; c < store[p].value.numel(); ++c) flat.push_back({p, c});
  MSDET_CHECK(!flat.empty(), "grad_check: store has no parameters");

  Rng rng(seed);
  GradCheckResult res;
  const size_t n = std::min(samples, flat.size());
  for (size_t s = 0; s < n; ++s) {
    const auto [pi, ci] = flat[rng.below(flat.size())];
    Parameter& p = store[pi];
    const double saved = p.value.data[ci];
    p.value.data[ci] = saved + h;
    const double fp = f_value();
    p.value.data[ci] = saved - h;
    const double fm = f_value();
    p.value.data[ci] = saved;
    const double numeric = (fp - fm) / (2.0 * h);
    const double analytic = p.grad.data[ci];
    const double denom =
        std::max({std::fabs(analytic), std::fabs(numeric), 1e-8});
    const double rel = std::fabs(analytic - numeric) / denom;
    if (rel > res.max_rel_error) {
      res.max_rel_error = rel;
      res.worst_param = p.name;
      res.worst_coord = ci;
    }
    res.coords_checked++;
  }
  return res;
}

// Convenience wrapper when forward and backward share one closure building a
// fresh tape each call.
inline GradCheckResult grad_check(
    ParamStore& store, const std::function<double(bool do_backward)>& f,
    size_t samples, uint64_t seed = 17, double h = 1e-5) {
  return grad_check(
      store, [&f] { return f(false); }, [&f] { f(true); }, samples, seed, h);
}

inline GradCheckResult grad_check_steps(
    ParamStore& store, const std::function<double(bool do_backward)>& f,
    size_t samples, const std::vector<double>& steps, uint64_t seed = 17) {
  return grad_check_steps(
      store, [&f] { return f(false); }, [&f] { f(true); }, samples, steps, seed);
}

}  // namespace msdet
