#pragma once

#include <string>
#include <vector>

namespace bil {

struct CheckResult {
  std::string suite;
  std::string name;
  bool pass = false;
  std::string detail;
};

/// Built-in verification suites behind the `selftest` command: gradient
/// checks for every op and family, Monte-Carlo KL oracles, and flow
/// log-det / normalization checks. Each entry is independent; a failure
/// never aborts the remaining checks.
std::vector<CheckResult> selftest_gradient_suite();
std::vector<CheckResult> selftest_kl_oracle_suite();
std::vector<CheckResult> selftest_flow_suite();
std::vector<CheckResult> run_selftest();

}  // namespace bil
