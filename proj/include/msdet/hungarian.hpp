#pragma once

#include <limits>
#include <vector>

#include "msdet/tensor.hpp"

namespace msdet {

struct MatchResult {
  // (query index, ground-truth index) pairs, sorted by ground-truth index.
  std::vector<std::pair<size_t, size_t>> pairs;
  std::vector<size_t> unmatched_queries;
  double total_cost = 0.0;
};

// Minimum-cost one-to-one assignment on a [#queries x #GT] cost matrix via
// shortest augmenting paths (Jonker-Volgenant). When #queries >= #GT every
// ground truth gets a distinct query; otherwise every query is used.
inline MatchResult hungarian_match(const Tensor& cost) {
  MSDET_CHECK(cost.ndim() == 2, "hungarian_match: cost must be 2D, got ",
              shape_str(cost.shape));
  const size_t nq = cost.shape[0];
  const size_t ng = cost.shape[1];
  MatchResult res;
  if (nq == 0 || ng == 0) {
    for (size_t q = 0; q < nq; ++q) res.unmatched_queries.push_back(q);
    return res;
  }
  for (double v : cost.data)
    MSDET_CHECK(std::isfinite(v), "hungarian_match: non-finite cost entry");

  // Rows = smaller side. c(r, col) is arranged so rows <= cols.
  const bool transposed = nq < ng;
  const size_t nr = transposed ? nq : ng;
  const size_t nc = transposed ? ng : nq;
  auto c = [&](size_t r, size_t col) -> double {
    return transposed ? cost.at(r, col) : cost.at(col, r);
  };

  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(nr + 1, 0.0), v(nc + 1, 0.0);
  std::vector<size_t> match_col(nc + 1, nr);  // col -> row
  for (size_t r = 0; r < nr; ++r) {
    std::vector<double> dist(nc + 1, inf);
    std::vector<size_t> prev(nc + 1, nc);
    std::vector<char> done(nc + 1, 0);
    size_t j0 = nc;  // virtual start column
    match_col[nc] = r;
    do {
      done[j0] = 1;
      const size_t r0 = match_col[j0];
      double delta = inf;
      size_t j1 = nc;
      for (size_t j = 0; j < nc; ++j) {
        if (done[j]) continue;
        const double cur = c(r0, j) - u[r0] - v[j];
        if (cur < dist[j]) {
          dist[j] = cur;
          prev[j] = j0;
        }
        if (dist[j] < delta) {
          delta = dist[j];
          j1 = j;
        }
      }
      for (size_t j = 0; j <= nc; ++j) {
        if (done[j]) {
          u[match_col[j]] += delta;
          v[j] -= delta;
        } else {
          dist[j] -= delta;
        }
      }
      j0 = j1;
    } while (match_col[j0] != nr);
    // Augment along the alternating path.
    while (j0 != nc) {
      const size_t j1 = prev[j0];
      match_col[j0] = match_col[j1];
      j0 = j1;
    }
  }

  std::vector<char> query_used(nq, 0);
  for (size_t j = 0; j < nc; ++j) {
    if (match_col[j] == nr) continue;
    const size_t r = match_col[j];
    const size_t q = transposed ? r : j;
    const size_t g = transposed ? j : r;
    res.pairs.push_back({q, g});
    res.total_cost += cost.at(q, g);
    query_used[q] = 1;
  }
  std::sort(res.pairs.begin(), res.pairs.end(),
            [](const auto& a, const auto& b) { return a.second < b.second; });
  for (size_t q = 0; q < nq; ++q)
    if (!query_used[q]) res.unmatched_queries.push_back(q);
  return res;
}

}  // namespace msdet
