#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace msnet {

struct CheckResult {
  std::string name;
  double max_error = 0.0;  // max relative error for gradient checks, max abs deviation for oracles
  double tolerance = 0.0;
  bool passed = false;
  std::string detail;
};

struct VerifyOptions {
  std::uint64_t seed = 2024;
  int trials = 3;       // randomized shapes per op
  double step = 1e-3;   // finite-difference h
  double tolerance = 1e-3;
  // Name of a gradient check whose backward rule is deliberately corrupted
  // (gradient scaled by 1.5), to prove the suite can fail.
  std::string sabotage;
};

/// Names accepted by VerifyOptions::sabotage.
std::vector<std::string> gradient_check_names();

/// Finite-difference checks of every differentiable op on randomized small shapes.
std::vector<CheckResult> gradient_suite(const VerifyOptions& options);

/// Metric implementations against brute-force references on random masks,
/// plus the t-test reference values.
std::vector<CheckResult> metric_suite(const VerifyOptions& options);

}  // namespace msnet
