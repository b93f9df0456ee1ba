#include "msl/lambda_opt/lambda_opt.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace msl::lambda_opt {

void SoftMIConfig::validate() const {
  if (bins < 2) throw std::invalid_argument("soft_mi: bins must be >= 2");
  if (!(bandwidth >= 0.0)) throw std::invalid_argument("soft_mi: bandwidth must be > 0");
}

void LambdaOptConfig::validate() const {
  mi.validate();
  if (!(alpha >= 0.0)) throw std::invalid_argument("lambda optimization: alpha must be >= 0");
  if (!(step > 0.0)) throw std::invalid_argument("lambda optimization: step must be > 0");
  if (iterations < 0) throw std::invalid_argument("lambda optimization: iterations must be >= 0");
  if (!(init >= 0.0 && init <= 1.0)) throw std::invalid_argument("lambda optimization: init outside [0, 1]");
}

namespace {

// [P, B] soft bin assignment, rows summing to 1.
template <typename S>
Tensor<S> assignment(const Tensor<S>& x, const SoftMIConfig& cfg) {
  const Index p = x.size();
  const Index bins = cfg.bins;
  typename Tensor<S>::Storage centers(bins);
  for (Index k = 0; k < bins; ++k) centers[k] = static_cast<S>((k + 0.5) / bins);
  const Tensor<S> c(Shape{1, bins}, std::move(centers));
  const Tensor<S> v = reshape(clamp(x, S(0), S(1)), {p, 1});
  const double sigma = cfg.sigma();
  const Tensor<S> logits = square(v - c) * static_cast<S>(-0.5 / (sigma * sigma));
  return softmax(logits, 1);
}

template <typename S>
Tensor<S> plogp_ratio(const Tensor<S>& p, const Tensor<S>& q) {
  const S eps = static_cast<S>(kMiEps);
  return reduce_sum(p * (log(add_scalar(p, eps)) - log(add_scalar(q, eps))));
}

}  // namespace

template <typename S>
Tensor<S> soft_mi(const Tensor<S>& a, const Tensor<S>& b, const SoftMIConfig& cfg) {
  cfg.validate();
  if (a.shape() != b.shape()) {
    throw ShapeError("soft_mi: shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  const Tensor<S> wa = assignment(a, cfg), wb = assignment(b, cfg);
  const Tensor<S> joint = matmul(transpose(wa), wb) * static_cast<S>(1.0 / static_cast<double>(a.size()));
  const Tensor<S> pa = sum(joint, {1}, true);  // [B, 1]
  const Tensor<S> pb = sum(joint, {0}, true);  // [1, B]
  return plogp_ratio(joint, pa * pb);
}

template <typename S>
Tensor<S> soft_entropy(const Tensor<S>& a, const SoftMIConfig& cfg) {
  cfg.validate();
  const Tensor<S> p = mean(assignment(a, cfg), {0}, false);
  return scale(reduce_sum(p * log(add_scalar(p, static_cast<S>(kMiEps)))), S(-1));
}

template <typename S>
Tensor<S> tv(const Tensor<S>& map) {
  if (map.ndim() < 2) throw ShapeError("tv: map needs at least 2 dimensions");
  const int h_axis = map.ndim() - 2, w_axis = map.ndim() - 1;
  const Index h = map.dim(h_axis), w = map.dim(w_axis);
  const S d2 = static_cast<S>(kTvDelta * kTvDelta);
  auto smooth_abs = [&](const Tensor<S>& d) {
    // Offset by the same rounded sqrt(delta^2) so equal neighbours contribute exactly 0.
    return reduce_sum(add_scalar(sqrt(add_scalar(square(d), d2)), -std::sqrt(d2)));
  };
  Tensor<S> total = Tensor<S>::scalar(S(0));
  if (w > 1) total = total + smooth_abs(slice(map, w_axis, 1, w - 1) - slice(map, w_axis, 0, w - 1));
  if (h > 1) total = total + smooth_abs(slice(map, h_axis, 1, h - 1) - slice(map, h_axis, 0, h - 1));
  return total;
}

template <typename S>
Endpoints<S> endpoints(const model::MslModel<S>& model, const Tensor<S>& rep) {
  NoGradGuard guard;
  const Index n = rep.dim(0);
  return {model.decode(rep, model::lambda_scalar<S>(n, 0.0)).detach(),
          model.decode(rep, model::lambda_scalar<S>(n, 1.0)).detach()};
}

template <typename S>
Tensor<S> objective(const model::MslModel<S>& model, const Tensor<S>& rep, const Tensor<S>& map,
                    const Endpoints<S>& ends, const LambdaOptConfig& cfg) {
  const Tensor<S> x = model.decode(rep, map);
  const Tensor<S> mi = (soft_mi(x, ends.ct, cfg.mi) + soft_mi(x, ends.mri, cfg.mi)) * S(0.5);
  if (cfg.alpha == 0.0) return mi;
  return mi - tv(map) * static_cast<S>(cfg.alpha);
}

LambdaOptResult optimize_lambda_map(const model::MslModel<float>& model, const Tensor<float>& rep,
                                    const LambdaOptConfig& cfg) {
  cfg.validate();
  if (rep.ndim() != 4 || rep.dim(0) != 1) throw ShapeError("optimize_lambda_map: expects one case, got " + to_string(rep.shape()));
  FreezeParamsGuard frozen;
  const Tensor<float> r = rep.detach();
  const auto ends = endpoints(model, r);
  const Index h = rep.dim(2), w = rep.dim(3);
  Tensor<float>::Storage current = Tensor<float>::Storage::Constant(h * w, static_cast<float>(cfg.init));

  LambdaOptResult out;
  double best = -std::numeric_limits<double>::infinity();
  double previous = 0;
  for (int it = 0;; ++it) {
    Tensor<float> map(Shape{1, 1, h, w}, current);
    map.set_requires_grad(true);
    const Tensor<float> f = objective(model, r, map, ends, cfg);
    const double value = f.item();
    if (!std::isfinite(value)) {
      throw NonFiniteError("optimize_lambda_map: non-finite objective at iteration " + std::to_string(it));
    }
    out.trace.push_back(value);
    if (it == 0) out.initial_objective = value;
    if (value > best) {
      best = value;
      out.map = map.detach();
      out.objective = value;
    }
    out.best_trace.push_back(best);
    out.iterations = it;
    if (it == cfg.iterations) break;
    if (it > 0 && std::fabs(value - previous) <= cfg.rel_tol * std::max(std::fabs(previous), 1e-12)) break;
    previous = value;

    f.backward();
    const auto& g = map.grad();
    if (!g.allFinite()) {
      throw NonFiniteError("optimize_lambda_map: non-finite gradient at iteration " + std::to_string(it));
    }
    current = (current + static_cast<float>(cfg.step) * g).cwiseMax(0.0f).cwiseMin(1.0f);
  }
  return out;
}

std::vector<std::uint8_t> map_to_gray(const Tensor<float>& map) {
  std::vector<std::uint8_t> out(static_cast<std::size_t>(map.size()));
  for (Index i = 0; i < map.size(); ++i) {
    const double v = std::clamp(static_cast<double>(map.values()[i]), 0.0, 1.0);
    out[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(std::lround(v * 255.0));
  }
  return out;
}

#define MSL_INSTANTIATE(S)                                                                     \
  template Tensor<S> soft_mi(const Tensor<S>&, const Tensor<S>&, const SoftMIConfig&);        \
  template Tensor<S> soft_entropy(const Tensor<S>&, const SoftMIConfig&);                     \
  template Tensor<S> tv(const Tensor<S>&);                                                     \
  template Endpoints<S> endpoints(const model::MslModel<S>&, const Tensor<S>&);                \
  template Tensor<S> objective(const model::MslModel<S>&, const Tensor<S>&, const Tensor<S>&, \
                               const Endpoints<S>&, const LambdaOptConfig&);

MSL_INSTANTIATE(float)
MSL_INSTANTIATE(double)

}  // namespace msl::lambda_opt
