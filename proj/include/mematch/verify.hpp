#pragma once

#include <string>
#include <vector>

namespace mematch {

struct VerifySuite {
  std::string name;
  long cases = 0;
  long failures = 0;
  std::vector<std::string> messages;  // first few failure descriptions
};

struct VerifyReport {
  std::vector<VerifySuite> suites;

  bool ok() const {
    for (const VerifySuite& s : suites)
      if (s.failures > 0) return false;
    return true;
  }

  long total_cases() const {
    long n = 0;
    for (const VerifySuite& s : suites) n += s.cases;
    return n;
  }
};

// The embedded correctness battery: finite-difference gradient checks for
// every differentiable op and the full episode graph (double precision),
// a 1000-case memory write/read fuzz, and brute-force oracle comparisons
// for the composite kernels.
VerifyReport run_verification();

std::string format_report(const VerifyReport& rep);

}  // namespace mematch
