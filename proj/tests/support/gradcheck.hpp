#pragma once

// Central finite-difference gradient checking for double-precision graphs.

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "petduet/autograd.hpp"

namespace petduet::testing {

struct GradCheckResult {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t checked = 0;
};

/// Compares backward() against (f(x+h) - f(x-h)) / 2h for every element of
/// every tensor in wrt. Relative error is |a - n| / max(|a|, |n|, floor).
template <class F>
GradCheckResult check_gradients(F&& loss_fn, std::span<ag::Tensor<double>> wrt,
                                double step = 1e-5, double floor = 1e-6) {
  for (auto& t : wrt) t.zero_grad();
  {
    ag::Tensor<double> loss = loss_fn();
    loss.backward();
  }
  std::vector<std::vector<double>> analytic;
  for (auto& t : wrt) {
    std::vector<double> g(t.size(), 0.0);
    if (!t.grad().empty()) std::copy(t.grad().begin(), t.grad().end(), g.begin());
    analytic.push_back(std::move(g));
  }
  GradCheckResult res;
  ag::NoGradGuard no_grad;
  for (std::size_t ti = 0; ti < wrt.size(); ++ti) {
    auto values = wrt[ti].mutable_values();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double orig = values[i];
      values[i] = orig + step;
      const double up = loss_fn().item();
      values[i] = orig - step;
      const double down = loss_fn().item();
      values[i] = orig;
      const double numeric = (up - down) / (2.0 * step);
      const double a = analytic[ti][i];
      const double abs_err = std::abs(a - numeric);
      const double denom = std::max({std::abs(a), std::abs(numeric), floor});
      res.max_abs_error = std::max(res.max_abs_error, abs_err);
      res.max_rel_error = std::max(res.max_rel_error, abs_err / denom);
      ++res.checked;
    }
  }
  return res;
}

}  // namespace petduet::testing
