#pragma once

#include <functional>
#include <string>
#include <vector>

#include "panodeform/tensor.hpp"

namespace panodeform {

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  /// Denominator floor for the relative error.
  double floor = 1e-8;
  /// When > 0, check at most this many coordinates per input (evenly spaced).
  std::size_t max_coords = 0;
};

struct GradCheckResult {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t coords_checked = 0;
  bool passed = false;
};

/// Compares reverse-mode gradients of a scalar-valued `loss` against central
/// finite differences for every tensor in `inputs` (each must require grad).
///
/// The error reported is max_i |analytic_i - numeric_i| / max(||analytic||_inf,
/// ||numeric||_inf, floor), taken over all checked coordinates of one input and
/// then maximized over inputs.
GradCheckResult check_gradients(const std::string& name,
                                const std::function<Tensor()>& loss,
                                std::vector<Tensor> inputs, const GradCheckOptions& opts = {});

}  // namespace panodeform
