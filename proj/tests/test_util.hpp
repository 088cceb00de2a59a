#pragma once

#include <random>
#include <vector>

#include "panodeform/ops.hpp"
#include "panodeform/rng.hpp"

namespace panodeform::testing {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0,
                            bool requires_grad = true) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = uniform(rng, lo, hi);
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

/// Fixed random linear functional of `out`, reduced to a [1] scalar, so every
/// output element receives a distinct adjoint.
inline Tensor probe(const Tensor& out, const Tensor& weights) {
  Tensor flat = ops::reshape(out, {1, out.numel()});
  return ops::reshape(ops::matmul(flat, weights), {1});
}

inline Tensor probe_weights(std::size_t n, std::mt19937_64& rng) {
  return random_tensor({n, 1}, rng, -1.0, 1.0, false);
}

}  // namespace panodeform::testing
