#ifndef PARTREID_TENSOR_HPP_
#define PARTREID_TENSOR_HPP_

#include <concepts>
#include <cstddef>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace partreid {

template <typename T>
concept Real = std::same_as<T, float> || std::same_as<T, double>;

using Shape = std::vector<std::size_t>;

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

std::size_t numel(const Shape& shape);
std::string shape_string(const Shape& shape);

template <Real T>
constexpr std::string_view precision_name() {
  return sizeof(T) == 4 ? "f32" : "f64";
}

// Dense row-major tensor of rank <= 4. Owns its value buffer and, once
// requires_grad is set, a gradient buffer of identical shape.
template <Real T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0));
  Tensor(Shape shape, std::vector<T> data);

  static Tensor scalar(T value) { return Tensor(Shape{1}, std::vector<T>{value}); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const { return data_.size(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  T& operator[](std::size_t i) { return data_[i]; }
  T operator[](std::size_t i) const { return data_[i]; }
  // Value of a single-element tensor.
  T item() const;

  bool requires_grad() const { return requires_grad_; }
  void set_requires_grad(bool on);
  bool has_grad() const { return grad_.has_value(); }
  std::span<T> grad();
  std::span<const T> grad() const;
  void ensure_grad();
  void zero_grad();

  // Changes the shape in place; element count must be preserved.
  void reshape(Shape shape);

 private:
  Shape shape_;
  std::vector<T> data_;
  bool requires_grad_ = false;
  std::optional<std::vector<T>> grad_;
};

// Shared handle to a tensor participating in a recorded graph.
template <Real T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> t) : t_(std::make_shared<Tensor<T>>(std::move(t))) {}

  static Var parameter(Tensor<T> t) {
    Var v(std::move(t));
    v.t_->set_requires_grad(true);
    return v;
  }
  static Var constant(Tensor<T> t) { return Var(std::move(t)); }

  // Handle semantics: constness of the handle does not propagate.
  Tensor<T>& tensor() const { return *t_; }
  Tensor<T>* operator->() const { return t_.get(); }

  const Shape& shape() const { return t_->shape(); }
  std::span<const T> value() const { return t_->data(); }
  bool requires_grad() const { return t_ && t_->requires_grad(); }
  bool same(const Var& other) const { return t_ == other.t_; }
  explicit operator bool() const { return static_cast<bool>(t_); }

 private:
  std::shared_ptr<Tensor<T>> t_;
};

// Append-only tape of executed differentiable ops.
template <Real T>
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool recording() const { return recording_; }
  void set_recording(bool on) { recording_ = on; }

  // True when an op over these inputs has to be recorded.
  bool needs_grad(std::initializer_list<const Var<T>*> inputs) const;

  void record(std::string_view op, std::function<void()> backward);

  // Seeds dLoss/dLoss = 1 and replays the tape in reverse. A second call
  // without reset() throws.
  void backward(Var<T>& loss);
  void reset();

  std::size_t size() const { return nodes_.size(); }
  std::vector<std::string> op_names() const;

 private:
  struct Node {
    std::string op;
    std::function<void()> backward;
  };
  std::vector<Node> nodes_;
  bool consumed_ = false;
  bool recording_ = true;
};

// Kernel dispatch. Deterministic mode pins every kernel to its serial
// reference implementation.
void set_deterministic(bool on);
bool deterministic();

}  // namespace partreid

#endif  // PARTREID_TENSOR_HPP_
