#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "hprompt/serialize.hpp"

namespace hprompt {

/// Lower-triangular accuracy record: entry (j, i) is the accuracy on task i's
/// test set measured after training task j, both 0-based, defined for i <= j.
class AccuracyMatrix {
 public:
  AccuracyMatrix() = default;
  explicit AccuracyMatrix(std::size_t num_tasks)
      : t_(num_tasks), acc_(num_tasks, std::vector<double>(num_tasks, nan())) {}

  std::size_t num_tasks() const { return t_; }

  void set(std::size_t after_task, std::size_t eval_task, double accuracy) {
    check(after_task < t_ && eval_task <= after_task, "accuracy matrix: entry outside lower triangle");
    check(accuracy >= 0.0 && accuracy <= 1.0, "accuracy matrix: accuracy outside [0, 1]");
    acc_[after_task][eval_task] = accuracy;
  }

  double get(std::size_t after_task, std::size_t eval_task) const {
    check(after_task < t_ && eval_task <= after_task, "accuracy matrix: entry outside lower triangle");
    double v = acc_[after_task][eval_task];
    check(!std::isnan(v), "accuracy matrix: entry not recorded");
    return v;
  }

  bool complete() const {
    for (std::size_t j = 0; j < t_; ++j)
      for (std::size_t i = 0; i <= j; ++i)
        if (std::isnan(acc_[j][i])) return false;
    return t_ > 0;
  }

  /// Mean of the final row: overall accuracy after the last task.
  double average_accuracy() const {
    check(complete(), "accuracy matrix: incomplete");
    double s = 0;
    for (std::size_t i = 0; i < t_; ++i) s += get(t_ - 1, i);
    return s / static_cast<double>(t_);
  }

  /// Mean over earlier tasks of (best accuracy ever seen - final accuracy).
  double forgetting() const {
    check(complete(), "accuracy matrix: incomplete");
    check(t_ >= 2, "forgetting: needs at least two tasks");
    double s = 0;
    for (std::size_t i = 0; i + 1 < t_; ++i) {
      double best = -std::numeric_limits<double>::infinity();
      for (std::size_t j = i; j + 1 < t_; ++j) best = std::max(best, get(j, i));
      s += best - get(t_ - 1, i);
    }
    double f = s / static_cast<double>(t_ - 1);
    check(f >= -1.0 && f <= 1.0, "forgetting: value outside [-1, 1]");
    return f;
  }

  json to_json() const {
    json j;
    j["num_tasks"] = t_;
    j["acc"] = json::array();
    for (std::size_t row = 0; row < t_; ++row) {
      json r = json::array();
      for (std::size_t col = 0; col <= row; ++col) r.push_back(acc_[row][col]);
      j["acc"].push_back(r);
    }
    return j;
  }

  static AccuracyMatrix from_json(const json& j) {
    AccuracyMatrix m(j.at("num_tasks").get<std::size_t>());
    const auto& rows = j.at("acc");
    check(rows.size() == m.t_, "accuracy matrix: row count mismatch");
    for (std::size_t row = 0; row < m.t_; ++row) {
      check(rows[row].size() == row + 1, "accuracy matrix: ragged row length mismatch");
      for (std::size_t col = 0; col <= row; ++col) m.set(row, col, rows[row][col].get<double>());
    }
    return m;
  }

 private:
  static double nan() { return std::numeric_limits<double>::quiet_NaN(); }
  std::size_t t_ = 0;
  std::vector<std::vector<double>> acc_;
};

/// Gap between an upper-bound accuracy (joint training over all classes) and
/// the continual result. Both values must use the same unit; one fraction in
/// [0,1] paired with one percentage > 1 is rejected as a unit mismatch.
inline double upper_bound_gap(double upper, double continual) {
  bool upper_frac = upper <= 1.0, cont_frac = continual <= 1.0;
  check(upper_frac == cont_frac, "upper_bound_gap: fraction/percent unit mismatch");
  return upper - continual;
}

inline double fraction_correct(std::size_t correct, std::size_t total) {
  check(total > 0, "fraction_correct: empty evaluation set");
  return static_cast<double>(correct) / static_cast<double>(total);
}

}  // namespace hprompt
