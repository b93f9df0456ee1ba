#pragma once

#include "msl/core/tensor.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace msl {

// Adam with decoupled weight decay:
//   m <- b1 m + (1 - b1) g,  v <- b2 v + (1 - b2) g^2
//   p <- p - lr*wd*p - lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
template <typename S>
struct AdamState {
  using Storage = typename Tensor<S>::Storage;

  double learning_rate = 2e-4;
  double beta1 = 0.5;
  double beta2 = 0.99;
  double epsilon = 1e-8;
  double weight_decay = 1e-4;
  std::int64_t step = 0;
  std::vector<Storage> first_moment;
  std::vector<Storage> second_moment;
};

// Gradients are taken from params[i].grad(); a parameter without a gradient
// is updated as if its gradient were zero.
template <typename S>
void adam_step(std::span<Tensor<S>> params, AdamState<S>& state);

template <typename S>
void adam_step(std::span<Tensor<S>> params, std::span<const typename Tensor<S>::Storage> grads,
               AdamState<S>& state);

extern template void adam_step<float>(std::span<Tensor<float>>, AdamState<float>&);
extern template void adam_step<double>(std::span<Tensor<double>>, AdamState<double>&);

}  // namespace msl
