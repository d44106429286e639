#ifndef PARTREID_GRADCHECK_HPP_
#define PARTREID_GRADCHECK_HPP_

#include <functional>
#include <string>
#include <vector>

#include "partreid/tensor.hpp"

namespace partreid {

// Builds a scalar loss from parameters captured by the closure. Called
// once with recording on (analytic pass) and 2x per entry with recording off.
using LossFn = std::function<Var<double>(Graph<double>&)>;

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

// Central differences against reverse mode. Error per entry is
// |analytic - numeric| / max(|analytic|, |numeric|, 1e-8); the max over all
// entries of all params is returned. Always 64-bit.
GradCheckResult grad_check_report(const LossFn& loss, const std::vector<Var<double>>& params, double eps = 1e-3);

inline double grad_check(const LossFn& loss, const std::vector<Var<double>>& params, double eps = 1e-3) {
  return grad_check_report(loss, params, eps).max_relative_error;
}

}  // namespace partreid

#endif  // PARTREID_GRADCHECK_HPP_
