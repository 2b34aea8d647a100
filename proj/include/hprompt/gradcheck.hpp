#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "hprompt/tensor.hpp"

namespace hprompt {

struct GradCheckReport {
  bool ok = true;
  double max_rel_err = 0.0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  std::string detail;
};

/// Central-difference check of reverse-mode gradients. `f` must rebuild the
/// graph from the current leaf values on every call. Run in double: the step
/// and tolerances assume ~1e-16 arithmetic.
inline GradCheckReport finite_diff_check(const std::function<Tensor<double>()>& f,
                                         std::vector<Tensor<double>> params,
                                         double rel_tol = 1e-4, double step = 1e-5,
                                         double abs_floor = 1e-7) {
  GradCheckReport rep;

  Tensor<double> loss = f();
  loss.backward();
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (auto& p : params) {
    check(p.requires_grad(), "finite_diff_check: parameter does not require grad");
    check(p.has_grad(), "finite_diff_check: loss does not reach parameter");
    analytic.push_back(p.grad());
  }

  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& vals = params[pi].mutable_value();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      double orig = vals[i];
      vals[i] = orig + step;
      double up = f().item();
      vals[i] = orig - step;
      double dn = f().item();
      vals[i] = orig;
      double numeric = (up - dn) / (2.0 * step);
      double a = analytic[pi][i];
      double denom = std::max({std::abs(a), std::abs(numeric), abs_floor});
      double rel = std::abs(a - numeric) / denom;
      if (std::abs(a) < abs_floor && std::abs(numeric) < abs_floor) rel = 0.0;
      if (rel > rep.max_rel_err) {
        rep.max_rel_err = rel;
        rep.worst_analytic = a;
        rep.worst_numeric = numeric;
        rep.worst_param = pi;
        rep.worst_index = i;
      }
    }
  }

  rep.ok = rep.max_rel_err <= rel_tol;
  if (!rep.ok) {
    rep.detail = "param " + std::to_string(rep.worst_param) + " elem " + std::to_string(rep.worst_index) +
                 ": analytic " + std::to_string(rep.worst_analytic) + " vs numeric " +
                 std::to_string(rep.worst_numeric) + " (rel " + std::to_string(rep.max_rel_err) + ")";
  }
  return rep;
}

}  // namespace hprompt
