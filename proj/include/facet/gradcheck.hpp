#pragma once

// Central-difference verification of reverse-mode gradients. The loss
// callback rebuilds the scalar loss from the *current* parameter values, so
// perturbing a parameter element and re-invoking it yields f(theta +- eps).

#include <cmath>
#include <cstddef>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "facet/tensor.hpp"

namespace facet {

struct GradCheckEntry {
  std::string name;
  double analytic_norm = 0.0;
  double numeric_norm = 0.0;
  double max_rel_err = 0.0;
  std::size_t kink_count = 0;  // elements excluded as non-differentiable points
};

struct GradReport {
  std::vector<GradCheckEntry> entries;
  double epsilon = 0.0;
  double tolerance = 0.0;
  bool pass = false;
};

// Relative error with denominator floor 1e-8 so zero gradients do not blow up.
inline double grad_rel_err(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-8});
}

// Compares reverse-mode gradients of `loss_fn` against central differences
// (f(t+e) - f(t-e)) / 2e for every element of every trainable parameter.
// Elements straddling a non-differentiable point (hinge kinks, clamps) are
// detected by the second-difference heuristic below, flagged, and excluded
// from pass/fail. Parameters with requires_grad == false are skipped.
inline GradReport finite_diff_gradcheck(const std::function<Tensor()>& loss_fn,
                                        const std::vector<std::pair<std::string, Tensor>>& params,
                                        double epsilon = 1e-5, double tolerance = 1e-4) {
  if (!(epsilon >= 1e-7 && epsilon <= 1e-3))
    throw std::invalid_argument("gradcheck: epsilon must lie in [1e-7, 1e-3]");

  Tensor loss = loss_fn();
  const double f0 = loss.scalar_value();
  if (!std::isfinite(f0)) throw std::domain_error("gradcheck: loss is not finite");
  for (const auto& [name, p] : params) p.node()->adjoint.clear();
  loss.backward();

  GradReport report;
  report.epsilon = epsilon;
  report.tolerance = tolerance;
  report.pass = true;

  for (const auto& [name, param] : params) {
    if (!param.requires_grad()) continue;
    Tensor p = param;  // shared node; mutations visible to loss_fn
    std::vector<double> analytic = p.has_adjoint() ? p.adjoint() : std::vector<double>(p.numel(), 0.0);

    GradCheckEntry entry;
    entry.name = name;
    double a2 = 0.0, n2 = 0.0;
    for (std::size_t i = 0; i < p.numel(); ++i) {
      const double saved = p.values()[i];
      p.mutable_values()[i] = saved + epsilon;
      const double fp = loss_fn().scalar_value();
      p.mutable_values()[i] = saved - epsilon;
      const double fm = loss_fn().scalar_value();
      p.mutable_values()[i] = saved;

      const double numeric = (fp - fm) / (2.0 * epsilon);
      const double first_diff = std::abs(fp - fm);
      const double second_diff = std::abs(fp + fm - 2.0 * f0);
      // A jump in the first derivative makes the symmetric second difference
      // O(eps) instead of O(eps^2); flag and exclude such elements.
      const bool kink = second_diff > 0.25 * first_diff &&
                        second_diff > 1e-3 * epsilon * std::max(1.0, std::abs(f0));
      a2 += analytic[i] * analytic[i];
      n2 += numeric * numeric;
      if (kink) {
        ++entry.kink_count;
        continue;
      }
      entry.max_rel_err = std::max(entry.max_rel_err, grad_rel_err(analytic[i], numeric));
    }
    entry.analytic_norm = std::sqrt(a2);
    entry.numeric_norm = std::sqrt(n2);
    if (entry.max_rel_err > tolerance) report.pass = false;
    report.entries.push_back(std::move(entry));
  }
  return report;
}

}  // namespace facet
