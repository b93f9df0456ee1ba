#pragma once

#include "msl/core/tensor.hpp"

#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace msl {

// Elementwise binary ops follow numpy broadcasting.
template <typename S> Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b);
template <typename S> Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b);
template <typename S> Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b);
template <typename S> Tensor<S> div(const Tensor<S>& a, const Tensor<S>& b);

template <typename S> Tensor<S> scale(const Tensor<S>& x, S factor);
template <typename S> Tensor<S> add_scalar(const Tensor<S>& x, S value);

template <typename S> Tensor<S> relu(const Tensor<S>& x);
template <typename S> Tensor<S> exp(const Tensor<S>& x);
template <typename S> Tensor<S> log(const Tensor<S>& x);
template <typename S> Tensor<S> sqrt(const Tensor<S>& x);
template <typename S> Tensor<S> abs(const Tensor<S>& x);
template <typename S> Tensor<S> square(const Tensor<S>& x);
// Gradient passes where lo <= x <= hi, zero elsewhere.
template <typename S> Tensor<S> clamp(const Tensor<S>& x, S lo, S hi);

// [.., M, K] x [K, N] or batched [B, M, K] x [B, K, N]. Each output row is
// accumulated in a fixed order independent of M.
template <typename S> Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b);

template <typename S> Tensor<S> softmax(const Tensor<S>& x, int axis);

// Reductions accumulate in double.
template <typename S> Tensor<S> sum(const Tensor<S>& x, std::vector<int> axes, bool keepdim);
template <typename S> Tensor<S> mean(const Tensor<S>& x, std::vector<int> axes, bool keepdim);
template <typename S> Tensor<S> reduce_sum(const Tensor<S>& x);
template <typename S> Tensor<S> reduce_mean(const Tensor<S>& x);

// NCHW per-channel statistics over H, W; output [N, C, 1, 1].
template <typename S> Tensor<S> channel_mean(const Tensor<S>& x);
// Biased standard deviation plus eps. Subgradient 0 for constant channels.
template <typename S> Tensor<S> channel_std(const Tensor<S>& x, S eps);

template <typename S> Tensor<S> reshape(const Tensor<S>& x, Shape shape);
template <typename S> Tensor<S> permute(const Tensor<S>& x, std::vector<int> order);
// Swaps the two trailing axes.
template <typename S> Tensor<S> transpose(const Tensor<S>& x);
template <typename S> Tensor<S> concat(std::span<const Tensor<S>> parts, int axis);
template <typename S> Tensor<S> slice(const Tensor<S>& x, int axis, Index start, Index length);

// [N, C, H, W] -> [N, (H/p)*(W/p), C*p*p]; tokens in raster patch order,
// features ordered (c, dy, dx).
template <typename S> Tensor<S> patchify(const Tensor<S>& x, int patch);
template <typename S> Tensor<S> unpatchify(const Tensor<S>& tokens, Index channels, Index height,
                                           Index width, int patch);

// weight [Cout, Cin, k, k], bias [Cout] (may be undefined). Zero padding.
template <typename S> Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& weight,
                                       const Tensor<S>& bias, int stride, int pad);
// weight [Cin, Cout, k, k]; the adjoint of conv2d with the same weight and geometry.
template <typename S> Tensor<S> conv_transpose2d(const Tensor<S>& x, const Tensor<S>& weight,
                                                 const Tensor<S>& bias, int stride, int pad,
                                                 int output_pad);

// Half-pixel (align_corners = false) bilinear resize of [N, C, H, W].
// A constant input resizes to exactly the same constant.
template <typename S> Tensor<S> resize_bilinear(const Tensor<S>& x, Index height, Index width);

template <typename S> Tensor<S> operator+(const Tensor<S>& a, const Tensor<S>& b) { return add(a, b); }
template <typename S> Tensor<S> operator-(const Tensor<S>& a, const Tensor<S>& b) { return sub(a, b); }
template <typename S> Tensor<S> operator*(const Tensor<S>& a, const Tensor<S>& b) { return mul(a, b); }
template <typename S> Tensor<S> operator/(const Tensor<S>& a, const Tensor<S>& b) { return div(a, b); }
template <typename S> Tensor<S> operator*(const Tensor<S>& a, S s) { return scale(a, s); }
template <typename S> Tensor<S> operator*(S s, const Tensor<S>& a) { return scale(a, s); }

Shape broadcast_shape(const Shape& a, const Shape& b, const char* op);

// Name-dispatched access to the op suite. Attribute keys per op:
//   scale/add_scalar: "value"; clamp: "lo", "hi"; softmax: "axis";
//   sum/mean: "axes" (list), "keepdim"; channel_std: "eps"; reshape: "shape";
//   permute: "order"; concat: "axis"; slice: "axis", "start", "length";
//   patchify: "patch"; unpatchify: "channels", "height", "width", "patch";
//   conv2d: "stride", "pad"; conv_transpose2d: "stride", "pad", "output_pad";
//   resize_bilinear: "height", "width".
struct OpAttrs {
  std::map<std::string, std::vector<double>, std::less<>> values;

  OpAttrs& set(std::string key, std::vector<double> v) {
    values[std::move(key)] = std::move(v);
    return *this;
  }
  double scalar(std::string_view key) const;
  double scalar_or(std::string_view key, double fallback) const;
  std::vector<double> list(std::string_view key) const;
};

template <typename S>
Tensor<S> apply_op(std::string_view op, std::span<const Tensor<S>> inputs, const OpAttrs& attrs = {});

std::vector<std::string> op_names();

}  // namespace msl
