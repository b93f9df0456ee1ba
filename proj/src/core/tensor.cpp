#include "msl/core/tensor.hpp"

#include <atomic>
#include <sstream>
#include <unordered_set>

namespace msl {

namespace {
thread_local bool t_grad_enabled = true;
thread_local bool t_params_frozen = false;
std::atomic<bool> g_finite_check{false};
}  // namespace

Index numel(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) {
    if (d < 0) throw ShapeError("negative dimension in shape " + to_string(shape));
    n *= d;
  }
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
  os << ']';
  return os.str();
}

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

FreezeParamsGuard::FreezeParamsGuard() : previous_(t_params_frozen) { t_params_frozen = true; }
FreezeParamsGuard::~FreezeParamsGuard() { t_params_frozen = previous_; }

bool grad_enabled() { return t_grad_enabled; }
bool params_frozen() { return t_params_frozen; }

void set_finite_check(bool enabled) { g_finite_check.store(enabled); }
bool finite_check_enabled() { return g_finite_check.load(std::memory_order_relaxed); }

template <typename Scalar>
Tensor<Scalar>::Tensor(Shape shape, Scalar fill) : node_(std::make_shared<NodeType>()) {
  node_->value = Storage::Constant(numel(shape), fill);
  node_->shape = std::move(shape);
}

template <typename Scalar>
Tensor<Scalar>::Tensor(Shape shape, Storage values) : node_(std::make_shared<NodeType>()) {
  if (numel(shape) != values.size()) {
    throw ShapeError("tensor: shape " + to_string(shape) + " does not match " +
                     std::to_string(values.size()) + " values");
  }
  node_->shape = std::move(shape);
  node_->value = std::move(values);
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::scalar(Scalar value) {
  return Tensor(Shape{}, Storage::Constant(1, value));
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::from_node(std::shared_ptr<NodeType> node) {
  Tensor t;
  t.node_ = std::move(node);
  return t;
}

template <typename Scalar>
typename Tensor<Scalar>::NodeType& Tensor<Scalar>::node() const {
  if (!node_) throw GraphError("use of an undefined tensor");
  return *node_;
}

template <typename Scalar>
Index Tensor<Scalar>::dim(int axis) const {
  const int n = ndim();
  const int a = axis < 0 ? axis + n : axis;
  if (a < 0 || a >= n) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " +
                     to_string(shape()));
  }
  return shape()[static_cast<std::size_t>(a)];
}

template <typename Scalar>
typename Tensor<Scalar>::Storage& Tensor<Scalar>::mutable_values() {
  if (!node().is_leaf()) throw GraphError("mutable_values on a non-leaf tensor");
  return node_->value;
}

template <typename Scalar>
Scalar Tensor<Scalar>::item() const {
  if (size() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
  return node().value[0];
}

template <typename Scalar>
Scalar Tensor<Scalar>::at(const Shape& index) const {
  const Shape& s = shape();
  if (index.size() != s.size()) throw ShapeError("at(): rank mismatch for " + to_string(s));
  Index flat = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (index[i] < 0 || index[i] >= s[i]) throw ShapeError("at(): index out of range");
    flat = flat * s[i] + index[i];
  }
  return node().value[flat];
}

template <typename Scalar>
Tensor<Scalar>& Tensor<Scalar>::set_requires_grad(bool value) {
  if (!node().is_leaf()) throw GraphError("requires_grad can only be set on leaves");
  node_->requires_grad = value;
  return *this;
}

template <typename Scalar>
Tensor<Scalar>& Tensor<Scalar>::mark_parameter() {
  set_requires_grad(true);
  node_->is_param = true;
  return *this;
}

template <typename Scalar>
const typename Tensor<Scalar>::Storage& Tensor<Scalar>::grad() const {
  if (!has_grad()) throw GraphError("tensor has no gradient (op " + std::string(op()) + ")");
  return node_->grad;
}

template <typename Scalar>
void Tensor<Scalar>::zero_grad() {
  node().grad.resize(0);
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::detach() const {
  return Tensor(shape(), values());
}

template <typename Scalar>
void Tensor<Scalar>::backward() const {
  NodeType& root = node();
  if (root.consumed) throw GraphError("backward: graph already consumed; run forward again");
  if (!root.requires_grad) throw GraphError("backward: tensor does not require grad");
  if (root.value.size() != 1) {
    throw GraphError("backward: loss must be scalar, got shape " + to_string(root.shape));
  }

  // Iterative post-order DFS over tracked edges.
  std::vector<NodeType*> order;
  std::unordered_set<NodeType*> visited;
  std::vector<std::pair<NodeType*, std::size_t>> stack{{&root, 0}};
  visited.insert(&root);
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (n->consumed) throw GraphError("backward: graph already consumed; run forward again");
    if (next < n->parents.size()) {
      const std::size_t i = next++;
      if (!n->propagate[i]) continue;
      NodeType* p = n->parents[i].get();
      if (visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  root.grad_buffer().setConstant(Scalar(1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    NodeType* n = *it;
    if (n->is_leaf()) continue;
    n->backward_fn(*n);
  }
  for (NodeType* n : order) {
    if (n->is_leaf()) continue;
    n->backward_fn = nullptr;
    n->parents.clear();
    n->propagate.clear();
    n->grad.resize(0);
    n->consumed = true;
  }
}

namespace detail {

template <typename Scalar>
void check_finite(const char* op, const typename Node<Scalar>::Storage& values,
                  const char* what) {
  if (!values.allFinite()) {
    throw NonFiniteError(std::string("non-finite ") + what + " produced by op '" + op + "'");
  }
}

template <typename Scalar>
Tensor<Scalar> make_result(const char* op, Shape shape, typename Node<Scalar>::Storage value,
                           std::vector<const Tensor<Scalar>*> inputs,
                           std::function<void(Node<Scalar>&)> backward) {
  if (finite_check_enabled()) check_finite<Scalar>(op, value, "value");
  Tensor<Scalar> out(std::move(shape), std::move(value));
  auto& n = out.node();
  n.op = op;
  if (!grad_enabled()) return out;

  bool any = false;
  std::vector<bool> propagate;
  propagate.reserve(inputs.size());
  for (const Tensor<Scalar>* in : inputs) {
    const auto& pn = in->node();
    const bool tracked = pn.requires_grad && !(pn.is_param && params_frozen());
    propagate.push_back(tracked);
    any = any || tracked;
  }
  if (!any) return out;

  n.requires_grad = true;
  n.propagate = std::move(propagate);
  for (const Tensor<Scalar>* in : inputs) n.parents.push_back(in->node_ptr());
  if (finite_check_enabled()) {
    n.backward_fn = [fn = std::move(backward)](Node<Scalar>& self) {
      fn(self);
      for (std::size_t i = 0; i < self.parents.size(); ++i) {
        if (self.propagate[i] && self.parents[i]->grad.size() > 0) {
          check_finite<Scalar>(self.op, self.parents[i]->grad, "gradient");
        }
      }
    };
  } else {
    n.backward_fn = std::move(backward);
  }
  return out;
}

template Tensor<float> make_result<float>(const char*, Shape, Node<float>::Storage,
                                          std::vector<const Tensor<float>*>,
                                          std::function<void(Node<float>&)>);
template Tensor<double> make_result<double>(const char*, Shape, Node<double>::Storage,
                                            std::vector<const Tensor<double>*>,
                                            std::function<void(Node<double>&)>);
template void check_finite<float>(const char*, const Node<float>::Storage&, const char*);
template void check_finite<double>(const char*, const Node<double>::Storage&, const char*);

}  // namespace detail

template class Tensor<float>;
template class Tensor<double>;

}  // namespace msl
