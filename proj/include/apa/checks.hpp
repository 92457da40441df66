#pragma once

// Closed-form self checks shared by the `selftest` command and the acceptance
// binary. None of them needs a trained checkpoint.

#include <string>
#include <vector>

namespace apa::checks {

struct CheckResult {
  std::string name;
  bool pass = false;
  std::string detail;  // measured error or counts
};

// Guidance at lambda 0 and 1, affinity in lambda, fusion at alpha 0, the
// (1 + alpha) identity of a freshly copied adapter, and pooling at rate 1.
std::vector<CheckResult> algebra_checks();

// Finite-difference gradient checks: 100 random cases per differentiable op in
// double precision, and predict_noise with respect to adapter weights in float.
std::vector<CheckResult> gradient_checks();

// Frechet distance closed forms, chroma similarity identities and the
// exhaustive attribute oracle recovery.
std::vector<CheckResult> metric_checks();

inline bool all_pass(const std::vector<CheckResult>& rs) {
  for (const auto& r : rs)
    if (!r.pass) return false;
  return true;
}

}  // namespace apa::checks
