#include "partreid/tensor.hpp"

#include <atomic>
#include <sstream>

namespace partreid {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

template <Real T>
Tensor<T>::Tensor(Shape shape, T fill) : shape_(std::move(shape)) {
  if (shape_.empty() || shape_.size() > 4) {
    throw DimensionError("tensor rank must be in [1,4], got shape " + shape_string(shape_));
  }
  data_.assign(numel(shape_), fill);
}

template <Real T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_.empty() || shape_.size() > 4) {
    throw DimensionError("tensor rank must be in [1,4], got shape " + shape_string(shape_));
  }
  if (numel(shape_) != data_.size()) {
    throw DimensionError("shape " + shape_string(shape_) + " holds " + std::to_string(numel(shape_)) +
                         " elements but data has " + std::to_string(data_.size()));
  }
}

template <Real T>
std::size_t Tensor<T>::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " + shape_string(shape_));
  }
  return shape_[axis];
}

template <Real T>
T Tensor<T>::item() const {
  if (data_.size() != 1) {
    throw DimensionError("item() on non-scalar tensor of shape " + shape_string(shape_));
  }
  return data_[0];
}

template <Real T>
void Tensor<T>::set_requires_grad(bool on) {
  requires_grad_ = on;
  if (on) {
    ensure_grad();
  } else {
    grad_.reset();
  }
}

template <Real T>
std::span<T> Tensor<T>::grad() {
  if (!grad_) throw std::logic_error("tensor has no gradient buffer");
  return *grad_;
}

template <Real T>
std::span<const T> Tensor<T>::grad() const {
  if (!grad_) throw std::logic_error("tensor has no gradient buffer");
  return *grad_;
}

template <Real T>
void Tensor<T>::ensure_grad() {
  if (!grad_ || grad_->size() != data_.size()) grad_.emplace(data_.size(), T(0));
}

template <Real T>
void Tensor<T>::zero_grad() {
  if (grad_) std::fill(grad_->begin(), grad_->end(), T(0));
}

template <Real T>
void Tensor<T>::reshape(Shape shape) {
  if (numel(shape) != data_.size() || shape.empty() || shape.size() > 4) {
    throw DimensionError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
  }
  shape_ = std::move(shape);
}

template <Real T>
bool Graph<T>::needs_grad(std::initializer_list<const Var<T>*> inputs) const {
  if (!recording_) return false;
  for (const Var<T>* v : inputs) {
    if (v && v->requires_grad()) return true;
  }
  return false;
}

template <Real T>
void Graph<T>::record(std::string_view op, std::function<void()> backward) {
  if (consumed_) throw std::logic_error("graph already consumed by backward(); call reset() first");
  nodes_.push_back(Node{std::string(op), std::move(backward)});
}

template <Real T>
void Graph<T>::backward(Var<T>& loss) {
  if (consumed_) throw std::logic_error("backward() called twice on the same graph without reset()");
  if (loss.tensor().size() != 1) {
    throw DimensionError("backward() needs a scalar loss, got shape " + shape_string(loss.shape()));
  }
  consumed_ = true;
  if (!loss.requires_grad()) return;
  loss->grad()[0] += T(1);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->backward();
}

template <Real T>
void Graph<T>::reset() {
  nodes_.clear();
  consumed_ = false;
}

template <Real T>
std::vector<std::string> Graph<T>::op_names() const {
  std::vector<std::string> names;
  names.reserve(nodes_.size());
  for (const auto& n : nodes_) names.push_back(n.op);
  return names;
}

namespace {
std::atomic<bool> g_deterministic{false};
}

void set_deterministic(bool on) { g_deterministic.store(on); }
bool deterministic() { return g_deterministic.load(); }

template class Tensor<float>;
template class Tensor<double>;
template class Graph<float>;
template class Graph<double>;

}  // namespace partreid
