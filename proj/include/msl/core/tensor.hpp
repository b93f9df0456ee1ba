#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace msl {

using Index = std::int64_t;
using Shape = std::vector<Index>;

Index numel(const Shape& shape);
std::string to_string(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Graph recording is disabled while a NoGradGuard is alive on the current thread.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Parameter leaves are treated as constants while alive on the current thread.
// Lets several threads differentiate w.r.t. their own inputs through shared weights.
class FreezeParamsGuard {
 public:
  FreezeParamsGuard();
  ~FreezeParamsGuard();
  FreezeParamsGuard(const FreezeParamsGuard&) = delete;
  FreezeParamsGuard& operator=(const FreezeParamsGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();
bool params_frozen();

// Debug check: every op output and gradient contribution is tested for NaN/Inf.
void set_finite_check(bool enabled);
bool finite_check_enabled();

namespace detail {

template <typename Scalar>
struct Node {
  using Storage = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

  Shape shape;
  Storage value;
  Storage grad;
  bool requires_grad = false;
  bool is_param = false;
  bool consumed = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::vector<bool> propagate;
  std::function<void(Node&)> backward_fn;

  bool is_leaf() const { return !backward_fn; }

  Storage& grad_buffer() {
    if (grad.size() != value.size()) grad = Storage::Zero(value.size());
    return grad;
  }

  bool wants(std::size_t i) const { return propagate[i]; }
  Node& parent(std::size_t i) const { return *parents[i]; }
};

}  // namespace detail

template <typename Scalar>
class Tensor {
 public:
  using Storage = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
  using NodeType = detail::Node<Scalar>;

  Tensor() = default;
  explicit Tensor(Shape shape, Scalar fill = Scalar(0));
  Tensor(Shape shape, Storage values);

  static Tensor scalar(Scalar value);
  static Tensor from_node(std::shared_ptr<NodeType> node);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node().shape; }
  int ndim() const { return static_cast<int>(node().shape.size()); }
  Index dim(int axis) const;
  Index size() const { return static_cast<Index>(node().value.size()); }

  const Storage& values() const { return node().value; }
  // Direct write access is only allowed on leaves (parameters, inputs).
  Storage& mutable_values();
  const Scalar* data() const { return node().value.data(); }
  Scalar item() const;
  Scalar at(const Shape& index) const;

  bool requires_grad() const { return node().requires_grad; }
  Tensor& set_requires_grad(bool value);
  Tensor& mark_parameter();
  bool is_parameter() const { return node().is_param; }

  bool has_grad() const { return node().grad.size() == node().value.size(); }
  const Storage& grad() const;
  void zero_grad();

  void backward() const;

  // New leaf sharing no graph history with this tensor.
  Tensor detach() const;
  Tensor clone() const { return detach(); }
  const char* op() const { return node().op; }

  template <typename Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(shape(), values().template cast<Other>().eval());
  }

  NodeType& node() const;
  const std::shared_ptr<NodeType>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<NodeType> node_;
};

namespace detail {

// Records `op` in the graph if any input is tracked. `backward` reads self.grad
// and accumulates into parents whose propagate flag is set.
template <typename Scalar>
Tensor<Scalar> make_result(const char* op, Shape shape,
                           typename Node<Scalar>::Storage value,
                           std::vector<const Tensor<Scalar>*> inputs,
                           std::function<void(Node<Scalar>&)> backward);

template <typename Scalar>
void check_finite(const char* op, const typename Node<Scalar>::Storage& values,
                  const char* what);

}  // namespace detail

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace msl
