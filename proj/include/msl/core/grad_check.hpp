#pragma once

#include "msl/core/tensor.hpp"

#include <functional>

namespace msl {

// Max over coordinates of |analytic - numeric| / max(1, |numeric|), where the
// numeric derivative is the central difference with step `eps`. `fn` must
// return a scalar tensor.
template <typename S>
double grad_check(const std::function<Tensor<S>(const Tensor<S>&)>& fn, const Tensor<S>& input,
                  double eps = 1e-3);

extern template double grad_check<float>(const std::function<Tensor<float>(const Tensor<float>&)>&,
                                         const Tensor<float>&, double);
extern template double grad_check<double>(const std::function<Tensor<double>(const Tensor<double>&)>&,
                                          const Tensor<double>&, double);

}  // namespace msl
