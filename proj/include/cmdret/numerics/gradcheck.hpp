#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <map>
#include <cmath>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "cmdret/errors.hpp"
#include "cmdret/numerics/tape.hpp"
#include "cmdret/params.hpp"

namespace cmdret {

/// Builds a scalar loss on `tape` from the bound parameters. Must be a pure
/// function of the parameter values.
using Objective = std::function<Var(Tape& tape, const Binding& params)>;

struct GradCheckOptions {
  double step = 1e-5;      // central-difference half width h
  double tolerance = 1e-4;
  // Denominator floor for the relative error.
  double floor = 1e-6;
};

struct ParamCheck {
  std::string name;
  ParamGroup group;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

struct GradCheckReport {
  std::vector<ParamCheck> params;
  double tolerance = 0.0;

  const ParamCheck& worst() const {
    return *std::max_element(params.begin(), params.end(), [](const auto& a, const auto& b) {
      return a.max_rel_error < b.max_rel_error;
    });
  }

  bool passed() const {
    return std::all_of(params.begin(), params.end(),
                       [&](const auto& p) { return p.max_rel_error < tolerance; });
  }

  /// Worst relative error per parameter group.
  std::map<ParamGroup, double> by_group() const {
    std::map<ParamGroup, double> out;
    for (const auto& p : params) out[p.group] = std::max(out[p.group], p.max_rel_error);
    return out;
  }

  std::string summary() const {
    const ParamCheck& w = worst();
    std::ostringstream os;
    os << "worst parameter " << w.name << "[" << w.worst_index << "]: relative error "
       << w.max_rel_error << " (analytic " << w.analytic << ", numeric " << w.numeric << ")";
    return os.str();
  }
};

inline double evaluate_objective(const Objective& f, const ParamStore& params) {
  Tape tape;
  Binding bound(tape, params, /*trainable=*/false);
  return f(tape, bound).value().item();
}

/// Reverse-mode gradients of `f`; parameters the loss does not reach get zeros.
inline GradMap objective_gradients(const Objective& f, const ParamStore& params) {
  Tape tape;
  Binding bound(tape, params);
  Var loss = f(tape, bound);
  tape.backward(loss);
  GradMap grads = bound.grads();
  for (const auto& p : params)
    if (!grads.contains(p.name)) grads.emplace(p.name, Tensor(p.value.shape()));
  return grads;
}

/// Compares reverse-mode gradients against central differences
/// (f(θ+h) − f(θ−h)) / 2h for every scalar of every parameter. `params` is
/// restored bitwise before returning.
inline GradCheckReport finite_diff_check(const Objective& f, ParamStore& params,
                                         const GradCheckOptions& opt = {}) {
  if (!(opt.step > 0.0)) throw ConfigError("finite-difference step must be positive");
  const double f0 = evaluate_objective(f, params);
  const double f1 = evaluate_objective(f, params);
  if (std::bit_cast<std::uint64_t>(f0) != std::bit_cast<std::uint64_t>(f1)) {
    throw NumericError("objective is not deterministic: two evaluations gave " +
                       std::to_string(f0) + " and " + std::to_string(f1));
  }
  const GradMap grads = objective_gradients(f, params);

  GradCheckReport report;
  report.tolerance = opt.tolerance;
  for (auto& p : params) {
    ParamCheck check{p.name, p.group};
    const Tensor& g = grads.at(p.name);
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double saved = p.value[i];
      p.value[i] = saved + opt.step;
      const double fp = evaluate_objective(f, params);
      p.value[i] = saved - opt.step;
      const double fm = evaluate_objective(f, params);
      p.value[i] = saved;
      const double numeric = (fp - fm) / (2.0 * opt.step);
      const double denom = std::max({std::abs(g[i]), std::abs(numeric), opt.floor});
      const double rel = std::abs(g[i] - numeric) / denom;
      if (rel > check.max_rel_error || i == 0) {
        check.max_rel_error = rel;
        check.worst_index = i;
        check.analytic = g[i];
        check.numeric = numeric;
      }
    }
    report.params.push_back(std::move(check));
  }
  return report;
}

namespace testing {

/// Identity forward whose backward rule scales the incoming gradient by
/// `factor`. Used to prove the harness catches a broken backward rule.
inline Var faulty_identity(Var x, double factor = 1.5) {
  return x.tape->record(Tensor(x.value()), {x},
                        [x = x.id, factor](Tape& t, const Tensor& g, const Tensor&) {
                          Tensor gx = g;
                          for (double& v : gx.values()) v *= factor;
                          t.accumulate(x, gx);
                        });
}

}  // namespace testing

}  // namespace cmdret
