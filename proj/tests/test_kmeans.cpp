#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <vector>

#include "hprompt/kmeans.hpp"
#include "hprompt/rng.hpp"

using namespace hprompt;

namespace {

std::vector<std::vector<double>> rand_points(std::size_t m, std::size_t d, Rng& rng) {
  std::vector<std::vector<double>> pts(m, std::vector<double>(d));
  for (auto& p : pts)
    for (auto& v : p) v = rng.normal() * 2.0;
  return pts;
}

double objective_of(const std::vector<std::vector<double>>& pts, const KMeansResult& res) {
  double s = 0;
  for (std::size_t p = 0; p < pts.size(); ++p)
    s += detail::sq_dist(pts[p], res.centers[res.assignment[p]]);
  return s;
}

// exact minimum over every assignment of points to k cluster slots
double brute_force_optimum(const std::vector<std::vector<double>>& pts, std::size_t k) {
  std::size_t m = pts.size(), d = pts[0].size();
  std::vector<std::size_t> assign(m, 0);
  double best = std::numeric_limits<double>::infinity();
  std::size_t total = 1;
  for (std::size_t i = 0; i < m; ++i) total *= k;
  for (std::size_t code = 0; code < total; ++code) {
    std::size_t c = code;
    for (std::size_t i = 0; i < m; ++i) {
      assign[i] = c % k;
      c /= k;
    }
    std::vector<std::vector<double>> centers(k, std::vector<double>(d, 0.0));
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < m; ++i) {
      ++counts[assign[i]];
      for (std::size_t j = 0; j < d; ++j) centers[assign[i]][j] += pts[i][j];
    }
    for (std::size_t cl = 0; cl < k; ++cl)
      if (counts[cl] > 0)
        for (auto& v : centers[cl]) v /= static_cast<double>(counts[cl]);
    double s = 0;
    for (std::size_t i = 0; i < m; ++i) s += detail::sq_dist(pts[i], centers[assign[i]]);
    best = std::min(best, s);
  }
  return best;
}

}  // namespace

TEST_CASE("two well-separated pairs cluster to their midpoints") {
  std::vector<std::vector<double>> pts = {{0.0}, {1.0}, {10.0}, {11.0}};
  Rng rng(3);
  auto res = kmeans_best(pts, 2, rng, 8);
  std::vector<double> centers = {res.centers[0][0], res.centers[1][0]};
  std::sort(centers.begin(), centers.end());
  REQUIRE(centers[0] == 0.5);
  REQUIRE(centers[1] == 10.5);
  REQUIRE(res.objective == 1.0);
}

TEST_CASE("as many clusters as points reaches zero cost") {
  Rng rng(5);
  auto pts = rand_points(6, 3, rng);
  auto res = kmeans_best(pts, 6, rng, 8);
  REQUIRE(res.objective == 0.0);
  // every center coincides with some point
  for (const auto& c : res.centers) {
    bool hit = false;
    for (const auto& p : pts) hit = hit || detail::sq_dist(c, p) == 0.0;
    REQUIRE(hit);
  }
}

TEST_CASE("coincident points are handled without empty-cluster failures") {
  std::vector<std::vector<double>> pts(4, std::vector<double>{2.0, -1.0});
  Rng rng(7);
  auto res = kmeans(pts, 2, rng);
  REQUIRE(res.objective == 0.0);
}

TEST_CASE("iteration cost trace never increases across 50 random instances") {
  Rng rng(11);
  for (int inst = 0; inst < 50; ++inst) {
    std::size_t m = 2 + rng.randint(39);
    std::size_t d = 1 + rng.randint(5);
    std::size_t k = 1 + rng.randint(std::min<std::size_t>(m, 6));
    auto pts = rand_points(m, d, rng);
    auto res = kmeans(pts, k, rng);
    INFO("instance " << inst << " m=" << m << " d=" << d << " k=" << k);
    for (std::size_t i = 1; i < res.objectives.size(); ++i)
      REQUIRE(res.objectives[i] <= res.objectives[i - 1] + 1e-12);
    REQUIRE(res.objective == Catch::Approx(objective_of(pts, res)).epsilon(0).margin(1e-9));
  }
}

TEST_CASE("restarted clustering finds the exact optimum on small instances") {
  Rng rng(13);
  for (int inst = 0; inst < 30; ++inst) {
    std::size_t m = 2 + rng.randint(7);  // up to 8 points
    std::size_t k = 1 + rng.randint(std::min<std::size_t>(m, 3));
    std::size_t d = 1 + rng.randint(3);
    auto pts = rand_points(m, d, rng);
    auto res = kmeans_best(pts, k, rng, 32);
    double want = brute_force_optimum(pts, k);
    INFO("instance " << inst << " m=" << m << " d=" << d << " k=" << k);
    REQUIRE(res.objective == Catch::Approx(want).epsilon(1e-9).margin(1e-9));
  }
}

TEST_CASE("converged assignments are a nearest-center fixpoint") {
  Rng rng(17);
  auto pts = rand_points(20, 3, rng);
  auto res = kmeans(pts, 4, rng);
  for (std::size_t p = 0; p < pts.size(); ++p) {
    double own = detail::sq_dist(pts[p], res.centers[res.assignment[p]]);
    for (std::size_t c = 0; c < res.centers.size(); ++c)
      REQUIRE(own <= detail::sq_dist(pts[p], res.centers[c]) + 1e-12);
  }
}

TEST_CASE("degenerate requests are rejected") {
  Rng rng(19);
  std::vector<std::vector<double>> pts = {{1.0}, {2.0}};
  REQUIRE_THROWS(kmeans(pts, 3, rng));
  REQUIRE_THROWS(kmeans(pts, 0, rng));
  REQUIRE_THROWS(kmeans(std::vector<std::vector<double>>{}, 1, rng));
}
