#include "partreid/optim.hpp"

#include <algorithm>
#include <cmath>

namespace partreid {

template <Real T>
Sgd<T>::Sgd(std::vector<Var<T>> params, SgdConfig<T> config) : params_(std::move(params)), config_(config) {
  velocity_.reserve(params_.size());
  for (const auto& p : params_) velocity_.emplace_back(p.tensor().size(), T(0));
}

template <Real T>
void Sgd<T>::step() {
  for (const auto& p : params_) {
    if (!p->has_grad()) throw std::logic_error("sgd step: parameter of shape " + shape_string(p.shape()) + " has no gradient");
  }
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto w = params_[k]->data();
    std::span<const T> g = params_[k]->grad();
    auto& v = velocity_[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      v[i] = config_.momentum * v[i] + (g[i] + config_.weight_decay * w[i]);
      w[i] -= config_.learning_rate * v[i];
    }
  }
}

template <Real T>
void Sgd<T>::zero_grad() {
  for (const auto& p : params_) p->zero_grad();
}

double StepSchedule::at(int epoch) const {
  double lr = base;
  for (int m : milestones) {
    if (epoch >= m) lr *= gamma;
  }
  return lr;
}

StepSchedule StepSchedule::scaled(double base, int total_epochs) {
  StepSchedule s;
  s.base = base;
  s.milestones = {std::max(1, static_cast<int>(std::lround(total_epochs * 2.0 / 3.0)))};
  return s;
}

template class Sgd<float>;
template class Sgd<double>;

}  // namespace partreid
