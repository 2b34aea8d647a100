#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "hprompt/rng.hpp"
#include "hprompt/tensor.hpp"

namespace hprompt {

namespace detail {

inline double sq_dist(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

}  // namespace detail

struct KMeansResult {
  std::vector<std::vector<double>> centers;
  std::vector<std::size_t> assignment;
  std::vector<double> objectives;  // end-of-iteration cost trace, non-increasing
  double objective = 0.0;
  std::size_t iters = 0;
};

/// Lloyd iterations from a distance-weighted seeding. Runs until the
/// assignment reaches a fixpoint or max_iters. An emptied cluster is reseeded
/// to the point farthest from its current center.
inline KMeansResult kmeans(const std::vector<std::vector<double>>& points, std::size_t k, Rng& rng,
                           std::size_t max_iters = 100) {
  check(!points.empty(), "kmeans: no points");
  check(k >= 1 && k <= points.size(), "kmeans: need 1 <= k <= #points");
  std::size_t m = points.size();

  KMeansResult res;
  res.centers.reserve(k);
  // seeding: first center uniform, then proportional to squared distance
  res.centers.push_back(points[rng.randint(m)]);
  std::vector<double> d2(m);
  while (res.centers.size() < k) {
    double total = 0;
    for (std::size_t p = 0; p < m; ++p) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& c : res.centers) best = std::min(best, detail::sq_dist(points[p], c));
      d2[p] = best;
      total += best;
    }
    std::size_t pick;
    if (total <= 0) {
      pick = rng.randint(m);  // all points coincide with chosen centers
    } else {
      double r = rng.uniform() * total;
      pick = m - 1;
      double acc = 0;
      for (std::size_t p = 0; p < m; ++p) {
        acc += d2[p];
        if (r < acc) {
          pick = p;
          break;
        }
      }
    }
    res.centers.push_back(points[pick]);
  }

  res.assignment.assign(m, k);  // sentinel: everything reassigned on pass 1
  std::vector<std::size_t> counts(k);
  for (std::size_t it = 0; it < max_iters; ++it) {
    bool changed = false;
    for (std::size_t p = 0; p < m; ++p) {
      std::size_t best = 0;
      double bd = detail::sq_dist(points[p], res.centers[0]);
      for (std::size_t c = 1; c < k; ++c) {
        double d = detail::sq_dist(points[p], res.centers[c]);
        if (d < bd) {
          bd = d;
          best = c;
        }
      }
      if (res.assignment[p] != best) {
        res.assignment[p] = best;
        changed = true;
      }
    }
    if (!changed) break;
    ++res.iters;

    std::size_t dim = points[0].size();
    for (auto& c : res.centers) c.assign(dim, 0.0);
    counts.assign(k, 0);
    for (std::size_t p = 0; p < m; ++p) {
      ++counts[res.assignment[p]];
      for (std::size_t i = 0; i < dim; ++i) res.centers[res.assignment[p]][i] += points[p][i];
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] == 0) continue;
      for (double& v : res.centers[c]) v /= static_cast<double>(counts[c]);
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] > 0) continue;
      // farthest point from its own center takes over the empty cluster
      double worst = -1;
      std::size_t worst_p = 0;
      for (std::size_t p = 0; p < m; ++p) {
        double d = detail::sq_dist(points[p], res.centers[res.assignment[p]]);
        if (d > worst) {
          worst = d;
          worst_p = p;
        }
      }
      res.centers[c] = points[worst_p];
    }

    double j = 0;
    for (std::size_t p = 0; p < m; ++p) {
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < k; ++c) best = std::min(best, detail::sq_dist(points[p], res.centers[c]));
      j += best;
    }
    res.objectives.push_back(j);
  }

  double j = 0;
  for (std::size_t p = 0; p < m; ++p) j += detail::sq_dist(points[p], res.centers[res.assignment[p]]);
  res.objective = j;
  return res;
}

/// Best of several independently seeded runs; deterministic for a given rng.
inline KMeansResult kmeans_best(const std::vector<std::vector<double>>& points, std::size_t k, Rng& rng,
                                std::size_t restarts = 10, std::size_t max_iters = 100) {
  check(restarts >= 1, "kmeans_best: need at least one restart");
  KMeansResult best;
  double best_obj = std::numeric_limits<double>::infinity();
  for (std::size_t r = 0; r < restarts; ++r) {
    Rng sub = rng.fork(r + 1);
    KMeansResult cur = kmeans(points, k, sub, max_iters);
    if (cur.objective < best_obj) {
      best_obj = cur.objective;
      best = std::move(cur);
    }
  }
  return best;
}

}  // namespace hprompt
