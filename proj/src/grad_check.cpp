#include "twopass/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace twopass {

GradCheckReport grad_check(const LossFn& f, const GradFn& grad, ParameterList<double>& params,
                           const GradCheckOptions& options) {
  const auto analytic = grad();
  if (analytic.size() != params.size()) {
    throw ShapeError("grad_check: gradient list does not match parameter list");
  }
  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t p = 0; p < params.size(); ++p) {
    if (analytic[p].size() != params[p].tensor.numel()) {
      throw ShapeError("grad_check: gradient of " + params[p].name + " has wrong size");
    }
    for (std::size_t i = 0; i < params[p].tensor.numel(); ++i) coords.emplace_back(p, i);
  }
  if (options.coordinates > 0 && options.coordinates < coords.size()) {
    std::mt19937_64 rng(options.seed);
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(options.coordinates);
    std::sort(coords.begin(), coords.end());
  }

  GradCheckReport report;
  for (const auto& [p, i] : coords) {
    auto values = params[p].tensor.values();
    const double saved = values[i];
    values[i] = saved + options.h;
    const double up = f();
    values[i] = saved - options.h;
    const double down = f();
    values[i] = saved;
    const double numeric = (up - down) / (2 * options.h);
    const double a = analytic[p][i];
    const double abs_err = std::abs(a - numeric);
    const double rel_err = abs_err / std::max({std::abs(a), std::abs(numeric), options.floor});
    report.max_abs_err = std::max(report.max_abs_err, abs_err);
    if (rel_err > report.max_rel_err || !std::isfinite(rel_err)) {
      report.max_rel_err = std::isfinite(rel_err) ? rel_err : INFINITY;
      report.worst = params[p].name + "[" + std::to_string(i) + "]";
    }
    ++report.checked;
  }
  report.pass = report.max_rel_err <= options.tol;
  return report;
}

GradCheckReport grad_check(const std::function<Tensor<double>(Tape<double>&)>& build,
                           ParameterList<double>& params, const GradCheckOptions& options) {
  auto f = [&]() {
    Tape<double> tape(false, kernels::Backend::serial);
    return build(tape).item();
  };
  auto g = [&]() {
    for (auto& p : params) p.tensor.zero_grad();
    Tape<double> tape(true, kernels::Backend::serial);
    tape.backward(build(tape));
    std::vector<std::vector<double>> out;
    for (auto& p : params) {
      auto gr = p.tensor.grad();
      out.emplace_back(gr.begin(), gr.end());
    }
    return out;
  };
  return grad_check(f, g, params, options);
}

}  // namespace twopass
