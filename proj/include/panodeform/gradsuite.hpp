#pragma once

// Finite-difference verification of every differentiable operation, module
// and the full network, each on several random shapes.

#include <cstdint>
#include <string>
#include <vector>

#include "panodeform/gradcheck.hpp"

namespace panodeform::gradsuite {

enum class Scope { kOp, kModule, kModel, kAll };

/// "op", "module", "model", "all"; throws std::invalid_argument otherwise.
Scope parse_scope(const std::string& name);

struct Case {
  std::string op;
  std::string shape;
  GradCheckResult result;
  /// Index of the input with the largest error.
  std::size_t worst_input = 0;
};

struct Options {
  std::uint64_t seed = 0;
  std::size_t shapes_per_op = 5;
  double tolerance = 1e-4;
};

std::vector<Case> run(Scope scope, const Options& opts = {});

/// Per-op summary table: op, shapes, worst error, PASS/FAIL.
std::string table(const std::vector<Case>& cases);

bool all_passed(const std::vector<Case>& cases);

}  // namespace panodeform::gradsuite
