#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "encdec/autograd.hpp"

namespace encdec {

// Builds a scalar loss on `tape` from one leaf per parameter.
using TapedLoss = std::function<Var(Tape& tape, const std::map<std::string, Var>& params)>;

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  // Relative error is |analytic - numeric| / max(|analytic|, |numeric|, floor).
  double denominator_floor = 1e-6;
  // 0 checks every element; otherwise a seeded sample per tensor.
  std::size_t max_entries_per_tensor = 0;
  std::uint64_t seed = 0;
};

struct TensorGradReport {
  std::string name;
  std::size_t checked = 0;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  bool pass = true;
};

struct GradCheckReport {
  std::vector<TensorGradReport> tensors;
  double max_rel_error = 0.0;
  bool pass = true;
};

// Compares tape gradients of `loss` against central differences
// (f(p + h) - f(p - h)) / 2h, one element at a time. `params` is perturbed in
// place and restored. Throws NumericError when f is non-finite.
GradCheckReport finite_diff_check(const TapedLoss& loss, ParamMap& params,
                                  const GradCheckOptions& options = {});

}  // namespace encdec
