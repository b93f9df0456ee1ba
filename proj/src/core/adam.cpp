#include "msl/core/adam.hpp"

#include <cmath>
#include <stdexcept>

namespace msl {

template <typename S>
void adam_step(std::span<Tensor<S>> params, std::span<const typename Tensor<S>::Storage> grads,
               AdamState<S>& state) {
  using Storage = typename Tensor<S>::Storage;
  if (grads.size() != params.size()) throw ShapeError("adam_step: parameter/gradient count mismatch");
  if (!(state.learning_rate >= 0.0)) throw std::invalid_argument("adam_step: negative learning rate");
  if (state.first_moment.empty()) {
    for (const auto& p : params) {
      state.first_moment.push_back(Storage::Zero(p.size()));
      state.second_moment.push_back(Storage::Zero(p.size()));
    }
  }
  if (state.first_moment.size() != params.size()) {
    throw ShapeError("adam_step: state tracks a different parameter count");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].size() != params[i].size() || state.first_moment[i].size() != params[i].size() ||
        state.second_moment[i].size() != params[i].size()) {
      throw ShapeError("adam_step: shape mismatch for parameter " + std::to_string(i) + " " +
                       to_string(params[i].shape()));
    }
  }

  ++state.step;
  const double t = static_cast<double>(state.step);
  const double b1 = state.beta1, b2 = state.beta2;
  const double bc1 = 1.0 - std::pow(b1, t);
  const double bc2 = 1.0 - std::pow(b2, t);
  const double lr = state.learning_rate;
  const double decay = lr * state.weight_decay;

  for (std::size_t i = 0; i < params.size(); ++i) {
    Storage& p = params[i].mutable_values();
    Storage& m = state.first_moment[i];
    Storage& v = state.second_moment[i];
    const Storage& g = grads[i];
    for (Index j = 0; j < p.size(); ++j) {
      const double gj = g[j];
      m[j] = static_cast<S>(b1 * m[j] + (1.0 - b1) * gj);
      v[j] = static_cast<S>(b2 * v[j] + (1.0 - b2) * gj * gj);
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      const double pj = p[j];
      p[j] = static_cast<S>(pj - decay * pj - lr * mhat / (std::sqrt(vhat) + state.epsilon));
    }
  }
}

template <typename S>
void adam_step(std::span<Tensor<S>> params, AdamState<S>& state) {
  std::vector<typename Tensor<S>::Storage> grads;
  grads.reserve(params.size());
  for (const auto& p : params) {
    grads.push_back(p.has_grad() ? p.grad() : Tensor<S>::Storage::Zero(p.size()).eval());
  }
  adam_step<S>(params, std::span<const typename Tensor<S>::Storage>(grads), state);
}

template void adam_step<float>(std::span<Tensor<float>>, AdamState<float>&);
template void adam_step<double>(std::span<Tensor<double>>, AdamState<double>&);
template void adam_step<float>(std::span<Tensor<float>>, std::span<const Tensor<float>::Storage>,
                               AdamState<float>&);
template void adam_step<double>(std::span<Tensor<double>>, std::span<const Tensor<double>::Storage>,
                                AdamState<double>&);

}  // namespace msl
