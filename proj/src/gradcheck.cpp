#include "partreid/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace partreid {

namespace {

double evaluate(const LossFn& loss) {
  Graph<double> g;
  g.set_recording(false);
  Var<double> l = loss(g);
  if (l.tensor().size() != 1) throw DimensionError("grad_check: loss must be scalar, got " + shape_string(l.shape()));
  return l.tensor().item();
}

}  // namespace

GradCheckResult grad_check_report(const LossFn& loss, const std::vector<Var<double>>& params, double eps) {
  for (const auto& p : params) {
    if (!p.requires_grad()) throw std::invalid_argument("grad_check: every checked parameter must require grad");
    p->zero_grad();
  }
  {
    Graph<double> g;
    Var<double> l = loss(g);
    if (l.tensor().size() != 1) throw DimensionError("grad_check: loss must be scalar, got " + shape_string(l.shape()));
    g.backward(l);
  }
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (const auto& p : params) analytic.emplace_back(p->grad().begin(), p->grad().end());

  GradCheckResult result;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto data = params[pi]->data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double saved = data[i];
      data[i] = saved + eps;
      const double plus = evaluate(loss);
      data[i] = saved - eps;
      const double minus = evaluate(loss);
      data[i] = saved;
      const double numeric = (plus - minus) / (2.0 * eps);
      const double a = analytic[pi][i];
      const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
      if (err > result.max_relative_error || (pi == 0 && i == 0)) {
        result = {err, pi, i, a, numeric};
      }
    }
  }
  return result;
}

}  // namespace partreid
