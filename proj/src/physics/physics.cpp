#include "msl/physics/physics.hpp"

#include "msl/core/random.hpp"

#include <unsupported/Eigen/FFT>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace msl::physics {

namespace {

bool is_power_of_two(Index n) { return n > 0 && (n & (n - 1)) == 0; }

Index next_power_of_two(Index n) {
  Index p = 1;
  while (p < n) p <<= 1;
  return p;
}

template <typename S>
S sample_bilinear(const Image<S>& img, double row, double col) {
  const Index H = img.rows(), W = img.cols();
  const double r0f = std::floor(row), c0f = std::floor(col);
  const Index r0 = static_cast<Index>(r0f), c0 = static_cast<Index>(c0f);
  const double fr = row - r0f, fc = col - c0f;
  auto at = [&](Index r, Index c) -> double {
    return (r >= 0 && r < H && c >= 0 && c < W) ? double(img(r, c)) : 0.0;
  };
  const double top = at(r0, c0) * (1 - fc) + at(r0, c0 + 1) * fc;
  const double bot = at(r0 + 1, c0) * (1 - fc) + at(r0 + 1, c0 + 1) * fc;
  return static_cast<S>(top * (1 - fr) + bot * fr);
}

// 1D complex transform along rows (axis = 1) or columns (axis = 0), unscaled.
template <typename S>
void fft_axis(ComplexImage<S>& a, int axis, bool inverse) {
  Eigen::FFT<S> fft;
  fft.SetFlag(Eigen::FFT<S>::Unscaled);
  const Index lines = axis == 1 ? a.rows() : a.cols();
  const Index n = axis == 1 ? a.cols() : a.rows();
  std::vector<std::complex<S>> in(static_cast<std::size_t>(n)), out;
  for (Index l = 0; l < lines; ++l) {
    for (Index i = 0; i < n; ++i) in[i] = axis == 1 ? a(l, i) : a(i, l);
    if (inverse) {
      fft.inv(out, in);
    } else {
      fft.fwd(out, in);
    }
    for (Index i = 0; i < n; ++i) (axis == 1 ? a(l, i) : a(i, l)) = out[i];
  }
}

template <typename S>
ComplexImage<S> roll_half(const ComplexImage<S>& a) {
  const Index H = a.rows(), W = a.cols();
  ComplexImage<S> out(H, W);
  for (Index r = 0; r < H; ++r)
    for (Index c = 0; c < W; ++c) out((r + H / 2) % H, (c + W / 2) % W) = a(r, c);
  return out;
}

template <typename S>
std::vector<S> ramlak_response(Index padded) {
  std::vector<std::complex<S>> h(static_cast<std::size_t>(padded), std::complex<S>(0));
  h[0] = S(0.25);
  for (Index n = 1; n < padded / 2; ++n) {
    if (n % 2 == 1) {
      const S v = static_cast<S>(-1.0 / (std::numbers::pi * std::numbers::pi * double(n) * double(n)));
      h[n] = v;
      h[padded - n] = v;
    }
  }
  Eigen::FFT<S> fft;
  std::vector<std::complex<S>> H;
  fft.fwd(H, h);
  std::vector<S> response(static_cast<std::size_t>(padded));
  for (Index i = 0; i < padded; ++i) response[i] = H[i].real();
  return response;
}

}  // namespace

Index SamplingMask::kept() const {
  return static_cast<Index>(std::count(keep.begin(), keep.end(), true));
}

std::vector<double> uniform_angles(int views) {
  if (views <= 0) throw std::invalid_argument("uniform_angles: views must be >= 1");
  std::vector<double> a(static_cast<std::size_t>(views));
  for (int i = 0; i < views; ++i) a[i] = 360.0 * i / views;
  return a;
}

Index min_detectors(Index image_size) {
  return static_cast<Index>(std::ceil(std::numbers::sqrt2 * static_cast<double>(image_size) - 1e-9));
}

template <typename S>
Sinogram<S> radon_forward(const Image<S>& image, std::span<const double> angles_deg, Index detectors) {
  if (angles_deg.empty()) throw std::invalid_argument("radon_forward: empty angle list");
  if (image.rows() != image.cols()) throw std::invalid_argument("radon_forward: image must be square");
  const Index N = image.rows();
  if (detectors == 0) detectors = min_detectors(N);
  for (double a : angles_deg) {
    if (!(a >= 0.0 && a < 360.0)) throw std::invalid_argument("radon_forward: angle outside [0, 360)");
  }
  const double center = (static_cast<double>(N) - 1.0) / 2.0;
  const double det_center = (static_cast<double>(detectors) - 1.0) / 2.0;
  const double ds = 0.5;
  const double reach = std::numbers::sqrt2 * static_cast<double>(N) / 2.0 + 1.0;
  const Index steps = static_cast<Index>(std::ceil(reach / ds));

  Sinogram<S> sino;
  sino.angles_deg.assign(angles_deg.begin(), angles_deg.end());
  sino.values = Image<S>::Zero(static_cast<Index>(angles_deg.size()), detectors);
  sino.image_size = N;
  for (Index v = 0; v < sino.views(); ++v) {
    const double th = angles_deg[v] * std::numbers::pi / 180.0;
    const double c = std::cos(th), s = std::sin(th);
    for (Index k = 0; k < detectors; ++k) {
      const double t = static_cast<double>(k) - det_center;
      double acc = 0.0;
      for (Index j = -steps; j <= steps; ++j) {
        const double along = static_cast<double>(j) * ds;
        const double x = t * c - along * s;
        const double y = t * s + along * c;
        acc += sample_bilinear(image, y + center, x + center);
      }
      sino.values(v, k) = static_cast<S>(acc * ds);
    }
  }
  return sino;
}

template <typename S>
Image<S> fbp(const Sinogram<S>& sinogram) {
  const Index views = sinogram.views();
  const Index D = sinogram.detectors();
  const Index N = sinogram.image_size;
  if (views < 1) throw std::invalid_argument("fbp: at least one view required");
  if (static_cast<Index>(sinogram.angles_deg.size()) != views) {
    throw std::invalid_argument("fbp: angle count does not match sinogram rows");
  }
  if (N <= 0 || D < min_detectors(N)) {
    throw std::invalid_argument("fbp: detector count " + std::to_string(D) +
                                " shorter than image diagonal " + std::to_string(min_detectors(N)));
  }

  const Index padded = next_power_of_two(2 * D);
  const std::vector<S> response = ramlak_response<S>(padded);
  Eigen::FFT<S> fft;
  Image<double> filtered(views, D);
  std::vector<std::complex<S>> row(static_cast<std::size_t>(padded)), spec, back;
  for (Index v = 0; v < views; ++v) {
    std::fill(row.begin(), row.end(), std::complex<S>(0));
    for (Index k = 0; k < D; ++k) row[k] = sinogram.values(v, k);
    fft.fwd(spec, row);
    for (Index i = 0; i < padded; ++i) spec[i] *= response[i];
    fft.inv(back, spec);
    for (Index k = 0; k < D; ++k) filtered(v, k) = back[k].real();
  }

  const double center = (static_cast<double>(N) - 1.0) / 2.0;
  const double det_center = (static_cast<double>(D) - 1.0) / 2.0;
  Image<double> acc = Image<double>::Zero(N, N);
  for (Index v = 0; v < views; ++v) {
    const double th = sinogram.angles_deg[v] * std::numbers::pi / 180.0;
    const double c = std::cos(th), s = std::sin(th);
    for (Index i = 0; i < N; ++i) {
      const double y = static_cast<double>(i) - center;
      for (Index j = 0; j < N; ++j) {
        const double x = static_cast<double>(j) - center;
        const double pos = x * c + y * s + det_center;
        const double f = std::floor(pos);
        const Index k0 = static_cast<Index>(f);
        const double w = pos - f;
        double val = 0.0;
        if (k0 >= 0 && k0 < D) val += (1.0 - w) * filtered(v, k0);
        if (k0 + 1 >= 0 && k0 + 1 < D) val += w * filtered(v, k0 + 1);
        acc(i, j) += val;
      }
    }
  }
  return (acc * (std::numbers::pi / static_cast<double>(views))).cast<S>();
}

template <typename S>
KSpace<S> fft2(const Image<S>& image) {
  if (!is_power_of_two(image.rows()) || !is_power_of_two(image.cols())) {
    throw std::invalid_argument("fft2: dimensions must be powers of two");
  }
  ComplexImage<S> a = image.template cast<std::complex<S>>();
  fft_axis(a, 1, false);
  fft_axis(a, 0, false);
  a /= static_cast<S>(std::sqrt(static_cast<double>(image.size())));
  KSpace<S> k;
  k.values = roll_half(a);
  k.mask.keep.assign(static_cast<std::size_t>(image.rows()), true);
  return k;
}

template <typename S>
ComplexImage<S> ifft2_complex(const ComplexImage<S>& kspace) {
  if (!is_power_of_two(kspace.rows()) || !is_power_of_two(kspace.cols())) {
    throw std::invalid_argument("ifft2: dimensions must be powers of two");
  }
  ComplexImage<S> a = roll_half(kspace);
  fft_axis(a, 1, true);
  fft_axis(a, 0, true);
  a /= static_cast<S>(std::sqrt(static_cast<double>(kspace.size())));
  return a;
}

template <typename S>
Image<S> ifft2(const KSpace<S>& kspace) {
  return ifft2_complex<S>(kspace.values).real();
}

SamplingMask make_mask(Index height, double rate, double center_fraction, std::uint64_t seed) {
  if (height <= 0) throw std::invalid_argument("make_mask: height must be positive");
  if (!(rate > 0.0 && rate <= 1.0)) throw std::invalid_argument("make_mask: rate must be in (0, 1]");
  if (!(center_fraction >= 0.0 && center_fraction <= 1.0)) {
    throw std::invalid_argument("make_mask: center fraction must be in [0, 1]");
  }
  if (rate < center_fraction) throw std::invalid_argument("make_mask: rate < center_fraction");

  SamplingMask mask;
  mask.rate = rate;
  mask.center_fraction = center_fraction;
  mask.seed = seed;
  mask.keep.assign(static_cast<std::size_t>(height), false);

  const Index band = static_cast<Index>(std::ceil(center_fraction * static_cast<double>(height) - 1e-9));
  const Index total = std::max(band, static_cast<Index>(std::llround(rate * static_cast<double>(height))));
  const Index start = height / 2 - band / 2;
  for (Index r = start; r < start + band; ++r) mask.keep[r] = true;

  std::vector<Index> pool;
  for (Index r = 0; r < height; ++r)
    if (!mask.keep[r]) pool.push_back(r);
  Rng rng(seed);
  const Index extra = std::min<Index>(total - band, static_cast<Index>(pool.size()));
  for (Index i = 0; i < extra; ++i) {
    const Index j = i + static_cast<Index>(rng.below(static_cast<std::uint64_t>(pool.size() - i)));
    std::swap(pool[i], pool[j]);
    mask.keep[pool[i]] = true;
  }
  return mask;
}

template <typename S>
KSpace<S> apply_mask(KSpace<S> kspace, const SamplingMask& mask) {
  if (mask.rows() != kspace.values.rows()) {
    throw std::invalid_argument("apply_mask: mask rows do not match k-space height");
  }
  for (Index r = 0; r < mask.rows(); ++r)
    if (!mask.keep[r]) kspace.values.row(r).setZero();
  kspace.mask = mask;
  return kspace;
}

template <typename S>
Image<S> zero_filled_recon(const KSpace<S>& kspace) {
  ComplexImage<S> masked = kspace.values;
  if (kspace.mask.rows() == masked.rows()) {
    for (Index r = 0; r < masked.rows(); ++r)
      if (!kspace.mask.keep[r]) masked.row(r).setZero();
  }
  return ifft2_complex<S>(masked).abs();
}

template <typename S>
Tensor<S> image_to_tensor(const Image<S>& image) {
  return Tensor<S>(Shape{1, 1, image.rows(), image.cols()},
                   Eigen::Map<const typename Tensor<S>::Storage>(image.data(), image.size()));
}

template <typename S>
Image<S> tensor_to_image(const Tensor<S>& tensor, Index batch) {
  if (tensor.ndim() != 4 || tensor.dim(1) != 1 || batch < 0 || batch >= tensor.dim(0)) {
    throw ShapeError("tensor_to_image: expected [N, 1, H, W], got " + to_string(tensor.shape()));
  }
  const Index H = tensor.dim(2), W = tensor.dim(3);
  return Eigen::Map<const Image<S>>(tensor.data() + batch * H * W, H, W);
}

Tensor<float> kspace_to_tensor(const KSpace<float>& kspace) {
  const Index H = kspace.values.rows(), W = kspace.values.cols();
  Tensor<float>::Storage v(H * W * 2);
  for (Index r = 0; r < H; ++r)
    for (Index c = 0; c < W; ++c) {
      v[(r * W + c) * 2] = kspace.values(r, c).real();
      v[(r * W + c) * 2 + 1] = kspace.values(r, c).imag();
    }
  return Tensor<float>(Shape{H, W, 2}, std::move(v));
}

Tensor<float> mask_to_tensor(const SamplingMask& mask) {
  Tensor<float>::Storage v(mask.rows());
  for (Index r = 0; r < mask.rows(); ++r) v[r] = mask.keep[r] ? 1.f : 0.f;
  return Tensor<float>(Shape{mask.rows()}, std::move(v));
}

KSpace<float> kspace_from_tensor(const Tensor<float>& values, const Tensor<float>& mask) {
  if (values.ndim() != 3 || values.dim(2) != 2) {
    throw ShapeError("k-space tensor must be [H, W, 2], got " + to_string(values.shape()));
  }
  const Index H = values.dim(0), W = values.dim(1);
  if (mask.ndim() != 1 || mask.dim(0) != H) throw ShapeError("mask tensor must be [H]");
  KSpace<float> k;
  k.values.resize(H, W);
  for (Index r = 0; r < H; ++r)
    for (Index c = 0; c < W; ++c) {
      k.values(r, c) = {values.values()[(r * W + c) * 2], values.values()[(r * W + c) * 2 + 1]};
    }
  k.mask.keep.resize(static_cast<std::size_t>(H));
  for (Index r = 0; r < H; ++r) k.mask.keep[r] = mask.values()[r] != 0.f;
  k.mask.rate = static_cast<double>(k.mask.kept()) / static_cast<double>(H);
  return k;
}

Tensor<float> sinogram_to_tensor(const Sinogram<float>& sinogram) {
  return Tensor<float>(Shape{sinogram.views(), sinogram.detectors()},
                       Eigen::Map<const Tensor<float>::Storage>(sinogram.values.data(),
                                                                sinogram.values.size()));
}

Tensor<float> angles_to_tensor(const Sinogram<float>& sinogram) {
  Tensor<float>::Storage v(sinogram.views());
  for (Index i = 0; i < v.size(); ++i) v[i] = static_cast<float>(sinogram.angles_deg[i]);
  return Tensor<float>(Shape{sinogram.views()}, std::move(v));
}

Sinogram<float> sinogram_from_tensor(const Tensor<float>& values, const Tensor<float>& angles,
                                     Index image_size) {
  if (values.ndim() != 2 || angles.ndim() != 1 || angles.dim(0) != values.dim(0)) {
    throw ShapeError("sinogram tensor must be [views, detectors] with [views] angles");
  }
  Sinogram<float> s;
  s.values = Eigen::Map<const ImageF>(values.data(), values.dim(0), values.dim(1));
  for (Index i = 0; i < angles.dim(0); ++i) s.angles_deg.push_back(angles.values()[i]);
  s.image_size = image_size;
  return s;
}

#define MSL_INSTANTIATE_PHYSICS(S)                                                           \
  template Sinogram<S> radon_forward(const Image<S>&, std::span<const double>, Index);      \
  template Image<S> fbp(const Sinogram<S>&);                                                 \
  template KSpace<S> fft2(const Image<S>&);                                                  \
  template ComplexImage<S> ifft2_complex(const ComplexImage<S>&);                            \
  template Image<S> ifft2(const KSpace<S>&);                                                 \
  template KSpace<S> apply_mask(KSpace<S>, const SamplingMask&);                             \
  template Image<S> zero_filled_recon(const KSpace<S>&);                                     \
  template Tensor<S> image_to_tensor(const Image<S>&);                                       \
  template Image<S> tensor_to_image(const Tensor<S>&, Index);

MSL_INSTANTIATE_PHYSICS(float)
MSL_INSTANTIATE_PHYSICS(double)

#undef MSL_INSTANTIATE_PHYSICS

}  // namespace msl::physics
