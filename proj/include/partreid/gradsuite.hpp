#ifndef PARTREID_GRADSUITE_HPP_
#define PARTREID_GRADSUITE_HPP_

#include <cstdint>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "partreid/gradcheck.hpp"

namespace partreid::gradsuite {

// One finite-difference check: scalar loss over randomly drawn inputs and
// parameters, all of which are perturbed.
struct Case {
  std::string name;
  double tolerance = 1e-6;
  bool elementary = true;
  double eps = 1e-3;
  std::function<GradCheckResult(double eps)> run;
};

struct CaseResult {
  std::string name;
  double error = 0.0;
  double tolerance = 0.0;
  bool elementary = true;
  double seconds = 0.0;
  bool passed() const { return error < tolerance; }
};

// Every differentiable op, both DPB branches, the masked variant, the full
// block and both losses, at 64-bit on 4x4 maps with C <= 8.
std::vector<Case> standard_cases(std::uint64_t seed = 0);

std::vector<CaseResult> run_suite(std::uint64_t seed = 0, std::ostream* progress = nullptr);

}  // namespace partreid::gradsuite

#endif  // PARTREID_GRADSUITE_HPP_
