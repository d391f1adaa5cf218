#pragma once

// Central finite-difference verification of tape gradients.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "twopass/tape.hpp"
#include "twopass/tensor.hpp"

namespace twopass {

struct GradCheckOptions {
  double h = 1e-5;
  double tol = 1e-4;
  /// 0 checks every coordinate; otherwise a seeded random subset of this size.
  std::size_t coordinates = 0;
  std::uint64_t seed = 0;
  /// Denominator floor of the relative error, so that coordinates whose true
  /// gradient is ~0 are judged on absolute error instead.
  double floor = 1e-6;
};

struct GradCheckReport {
  double max_rel_err = 0;
  double max_abs_err = 0;
  std::size_t checked = 0;
  std::string worst;  // "name[index]" of the worst coordinate
  bool pass = true;
};

/// Loss as a function of the current parameter values.
using LossFn = std::function<double()>;
/// Analytic gradient of the loss, one vector per parameter in list order.
using GradFn = std::function<std::vector<std::vector<double>>()>;

/// Compares `grad()` against (f(θ+h·e_i) − f(θ−h·e_i)) / 2h per coordinate.
/// Parameters are restored exactly afterwards.
GradCheckReport grad_check(const LossFn& f, const GradFn& grad, ParameterList<double>& params,
                           const GradCheckOptions& options = {});

/// Convenience form: `build` records a scalar loss on the given tape.
GradCheckReport grad_check(const std::function<Tensor<double>(Tape<double>&)>& build,
                           ParameterList<double>& params, const GradCheckOptions& options = {});

}  // namespace twopass
