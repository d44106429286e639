#ifndef PARTREID_OPTIM_HPP_
#define PARTREID_OPTIM_HPP_

#include <vector>

#include "partreid/tensor.hpp"

namespace partreid {

template <Real T>
struct SgdConfig {
  T learning_rate = T(0.05);
  T momentum = T(0.9);
  T weight_decay = T(0.0005);
};

// Classical momentum SGD with L2 weight decay folded into the gradient:
//   v <- mu * v + (g + wd * w);  w <- w - lr * v
template <Real T>
class Sgd {
 public:
  Sgd(std::vector<Var<T>> params, SgdConfig<T> config);

  void step();
  void zero_grad();

  T learning_rate() const { return config_.learning_rate; }
  void set_learning_rate(T lr) { config_.learning_rate = lr; }
  const SgdConfig<T>& config() const { return config_; }
  const std::vector<Var<T>>& params() const { return params_; }
  const std::vector<std::vector<T>>& momentum_buffers() const { return velocity_; }

 private:
  std::vector<Var<T>> params_;
  SgdConfig<T> config_;
  std::vector<std::vector<T>> velocity_;
};

// Step decay: base * gamma^(number of milestones <= epoch).
struct StepSchedule {
  double base = 0.05;
  double gamma = 0.1;
  std::vector<int> milestones{40};

  double at(int epoch) const;
  // Milestone at 2/3 of the run, the 40-of-60 shape for any epoch count.
  static StepSchedule scaled(double base, int total_epochs);
};

}  // namespace partreid

#endif  // PARTREID_OPTIM_HPP_
