#include "panodeform/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace panodeform {

GradCheckResult check_gradients(const std::string& name, const std::function<Tensor()>& loss,
                                std::vector<Tensor> inputs, const GradCheckOptions& opts) {
  GradCheckResult result{name};
  for (auto& in : inputs) in.zero_grad();
  loss().backward();

  for (auto& in : inputs) {
    const std::size_t n = in.numel();
    std::vector<double> analytic(n, 0.0);
    if (in.has_grad()) std::copy(in.grad().begin(), in.grad().end(), analytic.begin());

    std::vector<std::size_t> coords;
    if (opts.max_coords == 0 || opts.max_coords >= n) {
      for (std::size_t i = 0; i < n; ++i) coords.push_back(i);
    } else {
      for (std::size_t i = 0; i < opts.max_coords; ++i) coords.push_back(i * n / opts.max_coords);
    }

    double scale = opts.floor, worst = 0.0;
    auto values = in.mutable_data();
    std::vector<double> numeric;
    {
      NoGradGuard no_grad;
      for (std::size_t i : coords) {
        const double saved = values[i];
        values[i] = saved + opts.step;
        const double up = loss().item();
        values[i] = saved - opts.step;
        const double down = loss().item();
        values[i] = saved;
        numeric.push_back((up - down) / (2.0 * opts.step));
      }
    }
    for (std::size_t q = 0; q < coords.size(); ++q) {
      scale = std::max({scale, std::abs(analytic[coords[q]]), std::abs(numeric[q])});
    }
    for (std::size_t q = 0; q < coords.size(); ++q) {
      worst = std::max(worst, std::abs(analytic[coords[q]] - numeric[q]));
    }
    result.max_rel_error = std::max(result.max_rel_error, worst / scale);
    result.coords_checked += coords.size();
    in.zero_grad();
  }
  result.passed = result.max_rel_error < opts.tolerance;
  return result;
}

}  // namespace panodeform
