#pragma once

#include "msl/model/model.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace msl::lambda_opt {

struct SoftMIConfig {
  int bins = 32;
  // Gaussian kernel sigma in intensity units; 0 means one bin width.
  double bandwidth = 0.0;

  double sigma() const { return bandwidth > 0 ? bandwidth : 1.0 / bins; }
  void validate() const;
};

inline constexpr double kMiEps = 1e-10;
inline constexpr double kTvDelta = 1e-6;

// Parzen-window MI over [0, 1]: each pixel is softly assigned to `bins` Gaussian
// kernels centered at (k + 0.5) / bins (weights normalized per pixel), the joint
// density is the mean outer product of the assignments. Natural log. Inputs of
// any equal shape; values are clamped to [0, 1].
template <typename S>
Tensor<S> soft_mi(const Tensor<S>& a, const Tensor<S>& b, const SoftMIConfig& cfg = {});
// Entropy of the soft marginal histogram of `a`.
template <typename S>
Tensor<S> soft_entropy(const Tensor<S>& a, const SoftMIConfig& cfg = {});

// Anisotropic TV over the last two axes: sum of sqrt(d^2 + delta^2) - delta over
// horizontal and vertical first differences.
template <typename S>
Tensor<S> tv(const Tensor<S>& map);

struct LambdaOptConfig {
  double alpha = 0.001;
  double step = 0.05;
  int iterations = 200;
  double init = 0.5;
  double rel_tol = 1e-5;
  SoftMIConfig mi;

  void validate() const;
};

// The decoder's own endpoint images for a representation.
template <typename S>
struct Endpoints {
  Tensor<S> ct;   // decode(rep, 0)
  Tensor<S> mri;  // decode(rep, 1)
};

template <typename S>
Endpoints<S> endpoints(const model::MslModel<S>& model, const Tensor<S>& rep);

// 1/2 soft_mi(decode(rep, map), X_CT) + 1/2 soft_mi(decode(rep, map), X_MRI) - alpha tv(map).
template <typename S>
Tensor<S> objective(const model::MslModel<S>& model, const Tensor<S>& rep, const Tensor<S>& map,
                    const Endpoints<S>& ends, const LambdaOptConfig& cfg);

struct LambdaOptResult {
  Tensor<float> map;                 // [1, 1, h, w], entries in [0, 1]
  double objective = 0;              // of `map`
  double initial_objective = 0;      // of the constant init map
  std::vector<double> trace;         // objective per iterate, starting with the init map
  std::vector<double> best_trace;    // running best
  int iterations = 0;
};

// Projected gradient ascent on the map at representation resolution with the
// model weights frozen. `rep` must hold a single case.
LambdaOptResult optimize_lambda_map(const model::MslModel<float>& model, const Tensor<float>& rep,
                                    const LambdaOptConfig& cfg = {});

// 8-bit display rendering, row-major h x w: 0 = CT (black), 255 = MRI (white).
std::vector<std::uint8_t> map_to_gray(const Tensor<float>& map);

}  // namespace msl::lambda_opt
