#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <vector>

#include "hprompt/metrics.hpp"
#include "hprompt/rng.hpp"

using namespace hprompt;

namespace {

AccuracyMatrix random_complete(std::size_t t, Rng& rng) {
  AccuracyMatrix m(t);
  for (std::size_t j = 0; j < t; ++j)
    for (std::size_t i = 0; i <= j; ++i) m.set(j, i, rng.uniform());
  return m;
}

// independent recomputation straight from the definitions
double ref_average(const AccuracyMatrix& m) {
  double s = 0;
  for (std::size_t i = 0; i < m.num_tasks(); ++i) s += m.get(m.num_tasks() - 1, i);
  return s / m.num_tasks();
}

double ref_forgetting(const AccuracyMatrix& m) {
  std::size_t t = m.num_tasks();
  double s = 0;
  for (std::size_t i = 0; i + 1 < t; ++i) {
    double best = -1e300;
    for (std::size_t j = i; j + 1 < t; ++j) best = std::max(best, m.get(j, i));
    s += best - m.get(t - 1, i);
  }
  return s / (t - 1);
}

}  // namespace

TEST_CASE("overall accuracy is the mean of the final row") {
  AccuracyMatrix m(2);
  m.set(0, 0, 0.9);
  m.set(1, 0, 0.8);
  m.set(1, 1, 0.6);
  REQUIRE(m.average_accuracy() == Catch::Approx(0.7).epsilon(0).margin(1e-15));
}

TEST_CASE("a single-task matrix reports its own accuracy and no forgetting") {
  AccuracyMatrix m(1);
  m.set(0, 0, 0.83);
  REQUIRE(m.average_accuracy() == 0.83);
  REQUIRE_THROWS(m.forgetting());
}

TEST_CASE("no accuracy decline means zero forgetting") {
  AccuracyMatrix m(2);
  m.set(0, 0, 0.9);
  m.set(1, 0, 0.9);
  m.set(1, 1, 0.8);
  REQUIRE(m.forgetting() == 0.0);
}

TEST_CASE("a half-point drop on the first task is half a point of forgetting") {
  AccuracyMatrix m(2);
  m.set(0, 0, 1.0);
  m.set(1, 0, 0.5);
  m.set(1, 1, 0.9);
  REQUIRE(m.forgetting() == 0.5);
}

TEST_CASE("metrics match brute-force recomputations on random matrices") {
  Rng rng(2025);
  for (int inst = 0; inst < 20; ++inst) {
    std::size_t t = 2 + rng.randint(5);  // up to 6 tasks
    auto m = random_complete(t, rng);
    INFO("instance " << inst << " tasks=" << t);
    REQUIRE(m.average_accuracy() ==
            Catch::Approx(ref_average(m)).epsilon(0).margin(1e-12));
    REQUIRE(m.forgetting() == Catch::Approx(ref_forgetting(m)).epsilon(0).margin(1e-12));
    REQUIRE(m.forgetting() >= -1.0);
    REQUIRE(m.forgetting() <= 1.0);
    REQUIRE(m.average_accuracy() >= 0.0);
    REQUIRE(m.average_accuracy() <= 1.0);
  }
}

TEST_CASE("metrics are stable under the entry insertion order") {
  Rng rng(7);
  std::size_t t = 4;
  auto ref = random_complete(t, rng);
  std::vector<std::pair<std::size_t, std::size_t>> cells;
  for (std::size_t j = 0; j < t; ++j)
    for (std::size_t i = 0; i <= j; ++i) cells.push_back({j, i});
  for (int shuffle = 0; shuffle < 5; ++shuffle) {
    for (std::size_t i = cells.size(); i > 1; --i)
      std::swap(cells[i - 1], cells[rng.randint(i)]);
    AccuracyMatrix m(t);
    for (auto [j, i] : cells) m.set(j, i, ref.get(j, i));
    REQUIRE(m.average_accuracy() == ref.average_accuracy());
    REQUIRE(m.forgetting() == ref.forgetting());
  }
}

TEST_CASE("json round trip preserves every recorded cell") {
  Rng rng(11);
  auto m = random_complete(5, rng);
  auto re = AccuracyMatrix::from_json(m.to_json());
  REQUIRE(re.num_tasks() == 5);
  for (std::size_t j = 0; j < 5; ++j)
    for (std::size_t i = 0; i <= j; ++i) REQUIRE(re.get(j, i) == m.get(j, i));
}

TEST_CASE("out-of-triangle and out-of-range entries are rejected") {
  AccuracyMatrix m(3);
  REQUIRE_THROWS(m.set(0, 1, 0.5));  // evaluating an unseen task
  REQUIRE_THROWS(m.set(3, 0, 0.5));  // beyond the last task
  REQUIRE_THROWS(m.set(1, 0, 1.5));  // not a fraction
  REQUIRE_THROWS(m.set(1, 0, -0.1));
  m.set(0, 0, 0.5);
  REQUIRE_THROWS(m.get(1, 0));  // recorded nothing there yet
  REQUIRE_FALSE(m.complete());
  REQUIRE_THROWS(m.average_accuracy());
}

TEST_CASE("upper-bound gap reproduces the reference arithmetic") {
  REQUIRE(upper_bound_gap(90.9, 87.8) == Catch::Approx(3.1).epsilon(0).margin(1e-12));
  REQUIRE(upper_bound_gap(0.85, 0.85) == 0.0);
  REQUIRE_THROWS(upper_bound_gap(0.9, 87.8));  // fraction vs percent
}

TEST_CASE("fraction helper guards the denominator") {
  REQUIRE(fraction_correct(3, 4) == 0.75);
  REQUIRE_THROWS(fraction_correct(0, 0));
}
