#include "encdec/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <fmt/format.h>

#include "encdec/errors.hpp"
#include "encdec/rng.hpp"

namespace encdec {
namespace {

double evaluate(const TapedLoss& loss, const ParamMap& params) {
  Tape tape;
  std::map<std::string, Var> vars;
  for (const auto& [name, value] : params) vars.emplace(name, tape.constant(value));
  const double v = loss(tape, vars).value()[0];
  if (!std::isfinite(v)) throw NumericError("finite_diff_check: loss is not finite");
  return v;
}

}  // namespace

GradCheckReport finite_diff_check(const TapedLoss& loss, ParamMap& params,
                                  const GradCheckOptions& options) {
  std::map<std::string, Tensor> analytic;
  {
    Tape tape;
    std::map<std::string, Var> vars;
    for (const auto& [name, value] : params) vars.emplace(name, tape.leaf(value));
    Var out = loss(tape, vars);
    if (!std::isfinite(out.value()[0])) throw NumericError("finite_diff_check: loss is not finite");
    tape.backward(out);
    for (const auto& [name, var] : vars) analytic.emplace(name, tape.grad(var));
  }

  Rng rng(options.seed);
  GradCheckReport report;
  for (auto& [name, tensor] : params) {
    std::vector<std::size_t> indices(tensor.size());
    std::iota(indices.begin(), indices.end(), std::size_t{0});
    if (options.max_entries_per_tensor != 0 && indices.size() > options.max_entries_per_tensor) {
      rng.shuffle(indices);
      indices.resize(options.max_entries_per_tensor);
      std::sort(indices.begin(), indices.end());
    }
    TensorGradReport entry{name};
    const Tensor& grad = analytic.at(name);
    for (std::size_t i : indices) {
      const double saved = tensor[i];
      tensor[i] = saved + options.step;
      const double up = evaluate(loss, params);
      tensor[i] = saved - options.step;
      const double down = evaluate(loss, params);
      tensor[i] = saved;
      const double numeric = (up - down) / (2.0 * options.step);
      const double abs_err = std::abs(grad[i] - numeric);
      const double denom = std::max({std::abs(grad[i]), std::abs(numeric), options.denominator_floor});
      entry.max_abs_error = std::max(entry.max_abs_error, abs_err);
      entry.max_rel_error = std::max(entry.max_rel_error, abs_err / denom);
      ++entry.checked;
    }
    entry.pass = entry.max_rel_error <= options.tolerance;
    report.max_rel_error = std::max(report.max_rel_error, entry.max_rel_error);
    report.pass = report.pass && entry.pass;
    report.tensors.push_back(std::move(entry));
  }
  return report;
}

}  // namespace encdec
