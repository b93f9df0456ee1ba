#pragma once

#include "msl/core/tensor.hpp"

#include <Eigen/Core>

#include <complex>
#include <cstdint>
#include <span>
#include <vector>

namespace msl::physics {

template <typename S>
using Image = Eigen::Array<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using ComplexImage = Eigen::Array<std::complex<S>, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using ImageF = Image<float>;

// Parallel-beam sinogram. Row r holds the projection at angles_deg[r];
// detector k sits at offset k - (detectors - 1) / 2 with unit spacing.
template <typename S>
struct Sinogram {
  std::vector<double> angles_deg;
  Image<S> values;
  Index image_size = 0;

  Index views() const { return values.rows(); }
  Index detectors() const { return values.cols(); }
};

// Row-wise (phase-encode) Cartesian mask in centered k-space layout.
struct SamplingMask {
  std::vector<bool> keep;
  double rate = 1.0;
  double center_fraction = 0.0;
  std::uint64_t seed = 0;

  Index rows() const { return static_cast<Index>(keep.size()); }
  Index kept() const;
};

// Centered (DC at [H/2, W/2]) orthonormal k-space with its sampling mask.
template <typename S>
struct KSpace {
  ComplexImage<S> values;
  SamplingMask mask;
};

// `views` angles uniformly covering [0, 360).
std::vector<double> uniform_angles(int views);

// Smallest detector count covering the image diagonal.
Index min_detectors(Index image_size);

// Line integrals along parallel rays, bilinear sampling at half-pixel steps.
// `detectors` = 0 selects min_detectors(size).
template <typename S>
Sinogram<S> radon_forward(const Image<S>& image, std::span<const double> angles_deg,
                          Index detectors = 0);

// Ram-Lak filtered back-projection scaled by pi / views. The filter is the
// frequency response of the discrete spatial Ram-Lak kernel on a zero-padded grid.
template <typename S>
Image<S> fbp(const Sinogram<S>& sinogram);

template <typename S>
KSpace<S> fft2(const Image<S>& image);
template <typename S>
ComplexImage<S> ifft2_complex(const ComplexImage<S>& kspace);
// Real part of the inverse transform.
template <typename S>
Image<S> ifft2(const KSpace<S>& kspace);

// Keeps a center band of ceil(center_fraction * height) rows plus rows drawn
// uniformly without replacement until round(rate * height) rows are kept.
SamplingMask make_mask(Index height, double rate, double center_fraction, std::uint64_t seed);

// Zeroes unkept rows and records the mask.
template <typename S>
KSpace<S> apply_mask(KSpace<S> kspace, const SamplingMask& mask);

// Magnitude of the inverse transform of the masked grid.
template <typename S>
Image<S> zero_filled_recon(const KSpace<S>& kspace);

// [1, 1, H, W] tensor view of an image and back.
template <typename S>
Tensor<S> image_to_tensor(const Image<S>& image);
template <typename S>
Image<S> tensor_to_image(const Tensor<S>& tensor, Index batch = 0);

// ".mgt"-ready tensors: complex as trailing dimension 2, mask as 0/1 floats.
Tensor<float> kspace_to_tensor(const KSpace<float>& kspace);
KSpace<float> kspace_from_tensor(const Tensor<float>& values, const Tensor<float>& mask);
Tensor<float> mask_to_tensor(const SamplingMask& mask);
Tensor<float> sinogram_to_tensor(const Sinogram<float>& sinogram);
Tensor<float> angles_to_tensor(const Sinogram<float>& sinogram);
Sinogram<float> sinogram_from_tensor(const Tensor<float>& values, const Tensor<float>& angles,
                                     Index image_size);

}  // namespace msl::physics
