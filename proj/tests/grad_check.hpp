#pragma once

// Central finite-difference check over every entry of every parameter tensor.

#include <abd/autodiff.hpp>

#include <algorithm>
#include <cmath>
#include <string>

namespace abd::testing {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t entries = 0;
};

/// `loss(tape, bound)` must build a scalar from the bound parameters.
/// Relative error uses max(|fd|, |analytic|, floor) as denominator so exactly
/// zero gradients do not divide by zero.
template <class F>
GradCheckResult check_param_grads(const ad::ParamSet<double>& params, F loss, double h = 1e-5, double floor = 1e-5) {
  ad::Tape<double> tape;
  ad::Bound<double> bound(tape, params);
  tape.backward(loss(tape, bound));
  auto grads = bound.grads();

  auto eval = [&](const ad::ParamSet<double>& p) {
    ad::Tape<double> t;
    ad::Bound<double> b(t, p);
    return loss(t, b).scalar();
  };

  GradCheckResult r;
  ad::ParamSet<double> work = params;
  for (std::size_t k = 0; k < params.size(); ++k) {
    for (std::size_t e = 0; e < params.tensor(k).size(); ++e) {
      const double x0 = params.tensor(k).data[e];
      work.tensor(k).data[e] = x0 + h;
      const double fp = eval(work);
      work.tensor(k).data[e] = x0 - h;
      const double fm = eval(work);
      work.tensor(k).data[e] = x0;
      const double fd = (fp - fm) / (2 * h);
      const double g = grads[k].data[e];
      const double err = std::abs(fd - g) / std::max({std::abs(fd), std::abs(g), floor});
      if (err > r.max_rel_error) {
        r.max_rel_error = err;
        r.worst_param = params.name(k);
      }
      ++r.entries;
    }
  }
  return r;
}

}  // namespace abd::testing
