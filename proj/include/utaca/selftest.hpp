#pragma once

// Quick invariant suites run by `utaca selftest`.

#include <string>
#include <vector>

namespace utaca {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

std::vector<CheckResult> run_selftest();

}  // namespace utaca
