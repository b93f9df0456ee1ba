#include "msl/core/grad_check.hpp"

#include <algorithm>
#include <cmath>

namespace msl {

template <typename S>
double grad_check(const std::function<Tensor<S>(const Tensor<S>&)>& fn, const Tensor<S>& input,
                  double eps) {
  Tensor<S> x = input.detach();
  x.set_requires_grad(true);
  const Tensor<S> loss = fn(x);
  loss.backward();
  const typename Tensor<S>::Storage analytic =
      x.has_grad() ? x.grad() : Tensor<S>::Storage::Zero(x.size()).eval();

  NoGradGuard no_grad;
  double worst = 0.0;
  Tensor<S> probe = input.detach();
  auto& v = probe.mutable_values();
  for (Index i = 0; i < probe.size(); ++i) {
    const S original = v[i];
    v[i] = static_cast<S>(original + eps);
    const double plus = fn(probe).item();
    v[i] = static_cast<S>(original - eps);
    const double minus = fn(probe).item();
    v[i] = original;
    const double numeric = (plus - minus) / (2.0 * eps);
    const double err = std::abs(double(analytic[i]) - numeric) / std::max(1.0, std::abs(numeric));
    worst = std::max(worst, err);
  }
  return worst;
}

template double grad_check<float>(const std::function<Tensor<float>(const Tensor<float>&)>&,
                                  const Tensor<float>&, double);
template double grad_check<double>(const std::function<Tensor<double>(const Tensor<double>&)>&,
                                   const Tensor<double>&, double);

}  // namespace msl
