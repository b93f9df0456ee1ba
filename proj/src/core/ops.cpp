#include "msl/core/ops.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>

namespace msl {

namespace {

template <typename S>
using Storage = Eigen::Array<S, Eigen::Dynamic, 1>;
template <typename S>
using MatRM = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MapM = Eigen::Map<MatRM<S>>;
template <typename S>
using MapCM = Eigen::Map<const MatRM<S>>;
template <typename S>
using NodeT = detail::Node<S>;

using Strides = std::vector<Index>;

Strides contiguous_strides(const Shape& s) {
  Strides st(s.size(), 1);
  for (int d = static_cast<int>(s.size()) - 2; d >= 0; --d) st[d] = st[d + 1] * s[d + 1];
  return st;
}

// Strides of `in` viewed at rank of `out`, with 0 on broadcast dimensions.
Strides broadcast_strides(const Shape& in, const Shape& out) {
  Strides st(out.size(), 0);
  const Strides own = contiguous_strides(in);
  const std::size_t offset = out.size() - in.size();
  for (std::size_t d = 0; d < in.size(); ++d) {
    st[offset + d] = (in[d] == 1 && out[offset + d] != 1) ? 0 : own[d];
  }
  return st;
}

// Calls f(out_index, a_index, b_index) over every element of `out` in row-major order.
template <typename F>
void for_each_index(const Shape& out, const Strides& sa, const Strides& sb, F&& f) {
  const int nd = static_cast<int>(out.size());
  if (nd == 0) {
    f(Index{0}, Index{0}, Index{0});
    return;
  }
  const Index total = numel(out);
  const Index inner = out[nd - 1];
  if (total == 0 || inner == 0) return;
  const Index step_a = sa[nd - 1];
  const Index step_b = sb[nd - 1];
  std::vector<Index> idx(static_cast<std::size_t>(nd), 0);
  Index base_a = 0;
  Index base_b = 0;
  Index o = 0;
  const Index outer = total / inner;
  for (Index r = 0; r < outer; ++r) {
    Index ia = base_a;
    Index ib = base_b;
    for (Index j = 0; j < inner; ++j) {
      f(o++, ia, ib);
      ia += step_a;
      ib += step_b;
    }
    for (int d = nd - 2; d >= 0; --d) {
      ++idx[d];
      base_a += sa[d];
      base_b += sb[d];
      if (idx[d] < out[d]) break;
      base_a -= sa[d] * out[d];
      base_b -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
}

int normalize_axis(int axis, int ndim, const char* op) {
  const int a = axis < 0 ? axis + ndim : axis;
  if (a < 0 || a >= ndim) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for rank " +
                     std::to_string(ndim));
  }
  return a;
}

template <typename S>
void add_to_grad(NodeT<S>& node, const Storage<S>& g) {
  node.grad_buffer() += g;
}

// Sums a full-size gradient down to the (broadcast) shape of a parent.
template <typename S>
void accumulate_reduced(NodeT<S>& parent, const Shape& out, const Storage<S>& g) {
  if (parent.shape == out) {
    add_to_grad(parent, g);
    return;
  }
  const Strides sp = broadcast_strides(parent.shape, out);
  const Strides none(out.size(), 0);
  Eigen::ArrayXd acc = Eigen::ArrayXd::Zero(parent.value.size());
  for_each_index(out, sp, none, [&](Index o, Index ip, Index) { acc[ip] += g[o]; });
  parent.grad_buffer() += acc.cast<S>();
}

template <typename S>
Tensor<S> unary(const char* op, const Tensor<S>& x, Storage<S> value,
                std::function<Storage<S>(const NodeT<S>& self, const NodeT<S>& in)> dfdx) {
  return detail::make_result<S>(op, x.shape(), std::move(value), {&x},
                                [dfdx = std::move(dfdx)](NodeT<S>& self) {
                                  NodeT<S>& in = self.parent(0);
                                  in.grad_buffer() += self.grad * dfdx(self, in);
                                });
}

std::string shapes_msg(const char* op, const Shape& a, const Shape& b) {
  return std::string(op) + ": incompatible shapes " + to_string(a) + " and " + to_string(b);
}

}  // namespace

Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  const std::size_t nd = std::max(a.size(), b.size());
  Shape out(nd, 1);
  for (std::size_t i = 0; i < nd; ++i) {
    const Index da = i + a.size() >= nd ? a[i + a.size() - nd] : 1;
    const Index db = i + b.size() >= nd ? b[i + b.size() - nd] : 1;
    if (da != db && da != 1 && db != 1) throw ShapeError(shapes_msg(op, a, b));
    out[i] = da == 1 ? db : da;
  }
  return out;
}

// ---------------------------------------------------------------- elementwise

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() == b.shape()) {
    return detail::make_result<S>("add", a.shape(), a.values() + b.values(), {&a, &b},
                                  [](NodeT<S>& self) {
                                    if (self.wants(0)) add_to_grad(self.parent(0), self.grad);
                                    if (self.wants(1)) add_to_grad(self.parent(1), self.grad);
                                  });
  }
  const Shape out = broadcast_shape(a.shape(), b.shape(), "add");
  const Strides sa = broadcast_strides(a.shape(), out);
  const Strides sb = broadcast_strides(b.shape(), out);
  Storage<S> v(numel(out));
  const S* pa = a.data();
  const S* pb = b.data();
  for_each_index(out, sa, sb, [&](Index o, Index ia, Index ib) { v[o] = pa[ia] + pb[ib]; });
  return detail::make_result<S>("add", out, std::move(v), {&a, &b}, [out](NodeT<S>& self) {
    if (self.wants(0)) accumulate_reduced(self.parent(0), out, self.grad);
    if (self.wants(1)) accumulate_reduced(self.parent(1), out, self.grad);
  });
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() == b.shape()) {
    return detail::make_result<S>("subtract", a.shape(), a.values() - b.values(), {&a, &b},
                                  [](NodeT<S>& self) {
                                    if (self.wants(0)) add_to_grad(self.parent(0), self.grad);
                                    if (self.wants(1)) self.parent(1).grad_buffer() -= self.grad;
                                  });
  }
  const Shape out = broadcast_shape(a.shape(), b.shape(), "subtract");
  const Strides sa = broadcast_strides(a.shape(), out);
  const Strides sb = broadcast_strides(b.shape(), out);
  Storage<S> v(numel(out));
  const S* pa = a.data();
  const S* pb = b.data();
  for_each_index(out, sa, sb, [&](Index o, Index ia, Index ib) { v[o] = pa[ia] - pb[ib]; });
  return detail::make_result<S>("subtract", out, std::move(v), {&a, &b}, [out](NodeT<S>& self) {
    if (self.wants(0)) accumulate_reduced(self.parent(0), out, self.grad);
    if (self.wants(1)) accumulate_reduced<S>(self.parent(1), out, -self.grad);
  });
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() == b.shape()) {
    return detail::make_result<S>("multiply", a.shape(), a.values() * b.values(), {&a, &b},
                                  [](NodeT<S>& self) {
                                    NodeT<S>& pa = self.parent(0);
                                    NodeT<S>& pb = self.parent(1);
                                    if (self.wants(0)) pa.grad_buffer() += self.grad * pb.value;
                                    if (self.wants(1)) pb.grad_buffer() += self.grad * pa.value;
                                  });
  }
  const Shape out = broadcast_shape(a.shape(), b.shape(), "multiply");
  const Strides sa = broadcast_strides(a.shape(), out);
  const Strides sb = broadcast_strides(b.shape(), out);
  Storage<S> v(numel(out));
  const S* pa = a.data();
  const S* pb = b.data();
  for_each_index(out, sa, sb, [&](Index o, Index ia, Index ib) { v[o] = pa[ia] * pb[ib]; });
  return detail::make_result<S>("multiply", out, std::move(v), {&a, &b},
                                [out, sa, sb](NodeT<S>& self) {
                                  NodeT<S>& na = self.parent(0);
                                  NodeT<S>& nb = self.parent(1);
                                  const S* va = na.value.data();
                                  const S* vb = nb.value.data();
                                  if (self.wants(0)) {
                                    Storage<S> full(self.grad.size());
                                    for_each_index(out, sa, sb, [&](Index o, Index, Index ib) {
                                      full[o] = self.grad[o] * vb[ib];
                                    });
                                    accumulate_reduced(na, out, full);
                                  }
                                  if (self.wants(1)) {
                                    Storage<S> full(self.grad.size());
                                    for_each_index(out, sa, sb, [&](Index o, Index ia, Index) {
                                      full[o] = self.grad[o] * va[ia];
                                    });
                                    accumulate_reduced(nb, out, full);
                                  }
                                });
}

template <typename S>
Tensor<S> div(const Tensor<S>& a, const Tensor<S>& b) {
  const Shape out = broadcast_shape(a.shape(), b.shape(), "divide");
  const Strides sa = broadcast_strides(a.shape(), out);
  const Strides sb = broadcast_strides(b.shape(), out);
  Storage<S> v(numel(out));
  const S* pa = a.data();
  const S* pb = b.data();
  for_each_index(out, sa, sb, [&](Index o, Index ia, Index ib) { v[o] = pa[ia] / pb[ib]; });
  return detail::make_result<S>("divide", out, std::move(v), {&a, &b},
                                [out, sa, sb](NodeT<S>& self) {
                                  NodeT<S>& na = self.parent(0);
                                  NodeT<S>& nb = self.parent(1);
                                  const S* va = na.value.data();
                                  const S* vb = nb.value.data();
                                  if (self.wants(0)) {
                                    Storage<S> full(self.grad.size());
                                    for_each_index(out, sa, sb, [&](Index o, Index, Index ib) {
                                      full[o] = self.grad[o] / vb[ib];
                                    });
                                    accumulate_reduced(na, out, full);
                                  }
                                  if (self.wants(1)) {
                                    Storage<S> full(self.grad.size());
                                    for_each_index(out, sa, sb, [&](Index o, Index ia, Index ib) {
                                      full[o] = -self.grad[o] * va[ia] / (vb[ib] * vb[ib]);
                                    });
                                    accumulate_reduced(nb, out, full);
                                  }
                                });
}

template <typename S>
Tensor<S> scale(const Tensor<S>& x, S factor) {
  return unary<S>("scalar_multiply", x, x.values() * factor,
                  [factor](const NodeT<S>&, const NodeT<S>& in) {
                    return Storage<S>::Constant(in.value.size(), factor);
                  });
}

template <typename S>
Tensor<S> add_scalar(const Tensor<S>& x, S value) {
  return detail::make_result<S>("add_scalar", x.shape(), x.values() + value, {&x},
                                [](NodeT<S>& self) { add_to_grad(self.parent(0), self.grad); });
}

template <typename S>
Tensor<S> relu(const Tensor<S>& x) {
  return unary<S>("relu", x, x.values().max(S(0)), [](const NodeT<S>&, const NodeT<S>& in) {
    return (in.value > S(0)).template cast<S>().eval();
  });
}

template <typename S>
Tensor<S> exp(const Tensor<S>& x) {
  return unary<S>("exp", x, x.values().exp(),
                  [](const NodeT<S>& self, const NodeT<S>&) { return self.value; });
}

template <typename S>
Tensor<S> log(const Tensor<S>& x) {
  return unary<S>("log", x, x.values().log(),
                  [](const NodeT<S>&, const NodeT<S>& in) { return in.value.inverse().eval(); });
}

template <typename S>
Tensor<S> sqrt(const Tensor<S>& x) {
  return unary<S>("sqrt", x, x.values().sqrt(), [](const NodeT<S>& self, const NodeT<S>&) {
    return (S(0.5) / self.value).eval();
  });
}

template <typename S>
Tensor<S> abs(const Tensor<S>& x) {
  return unary<S>("abs", x, x.values().abs(), [](const NodeT<S>&, const NodeT<S>& in) {
    return in.value.sign().eval();
  });
}

template <typename S>
Tensor<S> square(const Tensor<S>& x) {
  return unary<S>("square", x, x.values().square(),
                  [](const NodeT<S>&, const NodeT<S>& in) { return (S(2) * in.value).eval(); });
}

template <typename S>
Tensor<S> clamp(const Tensor<S>& x, S lo, S hi) {
  if (lo > hi) throw std::invalid_argument("clamp: lo > hi");
  return unary<S>("clamp", x, x.values().max(lo).min(hi),
                  [lo, hi](const NodeT<S>&, const NodeT<S>& in) {
                    return ((in.value >= lo) && (in.value <= hi)).template cast<S>().eval();
                  });
}

// ---------------------------------------------------------------- matmul

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.ndim() < 2 || b.ndim() < 2 || b.ndim() > 3) {
    throw ShapeError(shapes_msg("matmul", a.shape(), b.shape()));
  }
  const Index K = a.dim(-1);
  if (b.dim(-2) != K) throw ShapeError(shapes_msg("matmul", a.shape(), b.shape()));
  const Index N = b.dim(-1);

  Index batches = 1;
  Index M = 0;
  Shape out_shape = a.shape();
  out_shape.back() = N;
  if (b.ndim() == 2) {
    M = a.size() / K;
  } else {
    if (a.ndim() != 3 || a.dim(0) != b.dim(0)) {
      throw ShapeError(shapes_msg("matmul", a.shape(), b.shape()));
    }
    batches = a.dim(0);
    M = a.dim(1);
  }
  const bool shared_b = b.ndim() == 2;

  Storage<S> v(batches * M * N);
  for (Index bi = 0; bi < batches; ++bi) {
    MapCM<S> A(a.data() + bi * M * K, M, K);
    MapCM<S> B(b.data() + (shared_b ? 0 : bi * K * N), K, N);
    MapM<S> O(v.data() + bi * M * N, M, N);
    for (Index i = 0; i < M; ++i) {
      O.row(i).setZero();
      for (Index k = 0; k < K; ++k) O.row(i) += A(i, k) * B.row(k);
    }
  }
  return detail::make_result<S>(
      "matmul", out_shape, std::move(v), {&a, &b},
      [batches, M, K, N, shared_b](NodeT<S>& self) {
        NodeT<S>& na = self.parent(0);
        NodeT<S>& nb = self.parent(1);
        if (self.wants(0)) na.grad_buffer();
        if (self.wants(1)) nb.grad_buffer();
        for (Index bi = 0; bi < batches; ++bi) {
          MapCM<S> G(self.grad.data() + bi * M * N, M, N);
          MapCM<S> A(na.value.data() + bi * M * K, M, K);
          const Index boff = shared_b ? 0 : bi * K * N;
          MapCM<S> B(nb.value.data() + boff, K, N);
          if (self.wants(0)) {
            MapM<S> GA(na.grad.data() + bi * M * K, M, K);
            GA.noalias() += G * B.transpose();
          }
          if (self.wants(1)) {
            MapM<S> GB(nb.grad.data() + boff, K, N);
            GB.noalias() += A.transpose() * G;
          }
        }
      });
}

// ---------------------------------------------------------------- softmax

template <typename S>
Tensor<S> softmax(const Tensor<S>& x, int axis) {
  const int a = normalize_axis(axis, x.ndim(), "softmax");
  const Shape& s = x.shape();
  Index outer = 1, inner = 1;
  for (int d = 0; d < a; ++d) outer *= s[d];
  for (int d = a + 1; d < x.ndim(); ++d) inner *= s[d];
  const Index n = s[a];
  Storage<S> v(x.size());
  const S* px = x.data();
  for (Index o = 0; o < outer; ++o) {
    for (Index i = 0; i < inner; ++i) {
      const Index base = o * n * inner + i;
      S mx = -std::numeric_limits<S>::infinity();
      for (Index k = 0; k < n; ++k) mx = std::max(mx, px[base + k * inner]);
      double total = 0.0;
      for (Index k = 0; k < n; ++k) {
        const S e = std::exp(px[base + k * inner] - mx);
        v[base + k * inner] = e;
        total += e;
      }
      for (Index k = 0; k < n; ++k) v[base + k * inner] = static_cast<S>(v[base + k * inner] / total);
    }
  }
  return detail::make_result<S>("softmax", s, std::move(v), {&x},
                                [outer, inner, n](NodeT<S>& self) {
                                  Storage<S>& gx = self.parent(0).grad_buffer();
                                  const Storage<S>& y = self.value;
                                  const Storage<S>& g = self.grad;
                                  for (Index o = 0; o < outer; ++o) {
                                    for (Index i = 0; i < inner; ++i) {
                                      const Index base = o * n * inner + i;
                                      double dot = 0.0;
                                      for (Index k = 0; k < n; ++k) {
                                        dot += double(g[base + k * inner]) * y[base + k * inner];
                                      }
                                      for (Index k = 0; k < n; ++k) {
                                        const Index j = base + k * inner;
                                        gx[j] += static_cast<S>(y[j] * (g[j] - dot));
                                      }
                                    }
                                  }
                                });
}

// ---------------------------------------------------------------- reductions

namespace {

template <typename S>
Tensor<S> reduce_axes(const char* op, const Tensor<S>& x, std::vector<int> axes, bool keepdim,
                      bool average) {
  const int nd = x.ndim();
  std::vector<bool> reduced(static_cast<std::size_t>(nd), false);
  if (axes.empty()) {
    std::fill(reduced.begin(), reduced.end(), true);
  } else {
    for (int ax : axes) reduced[normalize_axis(ax, nd, op)] = true;
  }
  Shape kept = x.shape();
  Shape out_shape;
  Index count = 1;
  for (int d = 0; d < nd; ++d) {
    if (reduced[d]) {
      count *= kept[d];
      kept[d] = 1;
      if (keepdim) out_shape.push_back(1);
    } else {
      out_shape.push_back(kept[d]);
    }
  }
  const Strides sx = contiguous_strides(x.shape());
  const Strides so = broadcast_strides(kept, x.shape());
  Eigen::ArrayXd acc = Eigen::ArrayXd::Zero(numel(kept));
  const S* px = x.data();
  for_each_index(x.shape(), sx, so, [&](Index, Index ix, Index io) { acc[io] += px[ix]; });
  const double factor = average ? 1.0 / static_cast<double>(std::max<Index>(count, 1)) : 1.0;
  Storage<S> v = (acc * factor).cast<S>();
  return detail::make_result<S>(op, out_shape, std::move(v), {&x},
                                [sx, so, factor](NodeT<S>& self) {
                                  NodeT<S>& in = self.parent(0);
                                  Storage<S>& gx = in.grad_buffer();
                                  const S f = static_cast<S>(factor);
                                  for_each_index(in.shape, sx, so, [&](Index, Index ix, Index io) {
                                    gx[ix] += self.grad[io] * f;
                                  });
                                });
}

}  // namespace

template <typename S>
Tensor<S> sum(const Tensor<S>& x, std::vector<int> axes, bool keepdim) {
  return reduce_axes<S>("reduce_sum", x, std::move(axes), keepdim, false);
}

template <typename S>
Tensor<S> mean(const Tensor<S>& x, std::vector<int> axes, bool keepdim) {
  return reduce_axes<S>("reduce_mean", x, std::move(axes), keepdim, true);
}

template <typename S>
Tensor<S> reduce_sum(const Tensor<S>& x) {
  return reduce_axes<S>("reduce_sum", x, {}, false, false);
}

template <typename S>
Tensor<S> reduce_mean(const Tensor<S>& x) {
  return reduce_axes<S>("reduce_mean", x, {}, false, true);
}

template <typename S>
Tensor<S> channel_mean(const Tensor<S>& x) {
  if (x.ndim() != 4) throw ShapeError("per_channel_mean: expected NCHW, got " + to_string(x.shape()));
  return reduce_axes<S>("per_channel_mean", x, {2, 3}, true, true);
}

template <typename S>
Tensor<S> channel_std(const Tensor<S>& x, S eps) {
  if (x.ndim() != 4) throw ShapeError("per_channel_std: expected NCHW, got " + to_string(x.shape()));
  const Index planes = x.dim(0) * x.dim(1);
  const Index hw = x.dim(2) * x.dim(3);
  Storage<S> v(planes);
  Eigen::ArrayXd mu(planes);
  Eigen::ArrayXd sigma(planes);
  for (Index p = 0; p < planes; ++p) {
    const auto plane = x.values().segment(p * hw, hw).template cast<double>();
    mu[p] = plane.mean();
    sigma[p] = std::sqrt((plane - mu[p]).square().mean());
    v[p] = static_cast<S>(sigma[p] + double(eps));
  }
  return detail::make_result<S>(
      "per_channel_std", Shape{x.dim(0), x.dim(1), 1, 1}, std::move(v), {&x},
      [planes, hw, mu, sigma](NodeT<S>& self) {
        NodeT<S>& in = self.parent(0);
        Storage<S>& gx = in.grad_buffer();
        for (Index p = 0; p < planes; ++p) {
          if (sigma[p] <= 0.0) continue;
          const double c = double(self.grad[p]) / (double(hw) * sigma[p]);
          for (Index i = 0; i < hw; ++i) {
            gx[p * hw + i] += static_cast<S>(c * (double(in.value[p * hw + i]) - mu[p]));
          }
        }
      });
}

// ---------------------------------------------------------------- layout ops

template <typename S>
Tensor<S> reshape(const Tensor<S>& x, Shape shape) {
  Index inferred = -1;
  Index known = 1;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == -1) {
      if (inferred >= 0) throw ShapeError("reshape: more than one inferred dimension");
      inferred = static_cast<Index>(i);
    } else {
      known *= shape[i];
    }
  }
  if (inferred >= 0 && known > 0) shape[inferred] = x.size() / known;
  if (numel(shape) != x.size()) {
    throw ShapeError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  }
  return detail::make_result<S>("reshape", shape, x.values(), {&x},
                                [](NodeT<S>& self) { add_to_grad(self.parent(0), self.grad); });
}

template <typename S>
Tensor<S> permute(const Tensor<S>& x, std::vector<int> order) {
  const int nd = x.ndim();
  if (static_cast<int>(order.size()) != nd) throw ShapeError("permute: order rank mismatch");
  std::vector<bool> seen(static_cast<std::size_t>(nd), false);
  for (int& o : order) {
    o = normalize_axis(o, nd, "permute");
    if (seen[o]) throw ShapeError("permute: repeated axis");
    seen[o] = true;
  }
  const Strides sx = contiguous_strides(x.shape());
  Shape out(static_cast<std::size_t>(nd));
  Strides src(static_cast<std::size_t>(nd));
  for (int d = 0; d < nd; ++d) {
    out[d] = x.shape()[order[d]];
    src[d] = sx[order[d]];
  }
  const Strides so = contiguous_strides(out);
  Storage<S> v(x.size());
  const S* px = x.data();
  for_each_index(out, so, src, [&](Index o, Index, Index ix) { v[o] = px[ix]; });
  return detail::make_result<S>("permute", out, std::move(v), {&x}, [out, so, src](NodeT<S>& self) {
    Storage<S>& gx = self.parent(0).grad_buffer();
    for_each_index(out, so, src, [&](Index o, Index, Index ix) { gx[ix] += self.grad[o]; });
  });
}

template <typename S>
Tensor<S> transpose(const Tensor<S>& x) {
  if (x.ndim() < 2) throw ShapeError("transpose: rank < 2");
  std::vector<int> order(static_cast<std::size_t>(x.ndim()));
  std::iota(order.begin(), order.end(), 0);
  std::swap(order[order.size() - 1], order[order.size() - 2]);
  return permute(x, order);
}

template <typename S>
Tensor<S> concat(std::span<const Tensor<S>> parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const int nd = parts[0].ndim();
  const int a = normalize_axis(axis, nd, "concat");
  Shape out = parts[0].shape();
  out[a] = 0;
  std::vector<Index> widths;
  for (const auto& p : parts) {
    if (p.ndim() != nd) throw ShapeError(shapes_msg("concat", parts[0].shape(), p.shape()));
    for (int d = 0; d < nd; ++d) {
      if (d != a && p.shape()[d] != parts[0].shape()[d]) {
        throw ShapeError(shapes_msg("concat", parts[0].shape(), p.shape()));
      }
    }
    widths.push_back(p.shape()[a]);
    out[a] += p.shape()[a];
  }
  Index outer = 1, inner = 1;
  for (int d = 0; d < a; ++d) outer *= out[d];
  for (int d = a + 1; d < nd; ++d) inner *= out[d];
  const Index row = out[a] * inner;
  Storage<S> v(numel(out));
  Index offset = 0;
  std::vector<const Tensor<S>*> inputs;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const Index w = widths[i] * inner;
    for (Index o = 0; o < outer; ++o) {
      v.segment(o * row + offset, w) = parts[i].values().segment(o * w, w);
    }
    offset += w;
    inputs.push_back(&parts[i]);
  }
  return detail::make_result<S>("concat", out, std::move(v), std::move(inputs),
                                [widths, outer, inner, row](NodeT<S>& self) {
                                  Index off = 0;
                                  for (std::size_t i = 0; i < widths.size(); ++i) {
                                    const Index w = widths[i] * inner;
                                    if (self.wants(i)) {
                                      Storage<S>& g = self.parent(i).grad_buffer();
                                      for (Index o = 0; o < outer; ++o) {
                                        g.segment(o * w, w) += self.grad.segment(o * row + off, w);
                                      }
                                    }
                                    off += w;
                                  }
                                });
}

template <typename S>
Tensor<S> slice(const Tensor<S>& x, int axis, Index start, Index length) {
  const int nd = x.ndim();
  const int a = normalize_axis(axis, nd, "slice");
  if (start < 0 || length < 0 || start + length > x.shape()[a]) {
    throw ShapeError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") out of bounds for shape " + to_string(x.shape()));
  }
  Shape out = x.shape();
  out[a] = length;
  Index outer = 1, inner = 1;
  for (int d = 0; d < a; ++d) outer *= out[d];
  for (int d = a + 1; d < nd; ++d) inner *= out[d];
  const Index src_row = x.shape()[a] * inner;
  const Index w = length * inner;
  const Index off = start * inner;
  Storage<S> v(numel(out));
  for (Index o = 0; o < outer; ++o) v.segment(o * w, w) = x.values().segment(o * src_row + off, w);
  return detail::make_result<S>("slice", out, std::move(v), {&x},
                                [outer, src_row, w, off](NodeT<S>& self) {
                                  Storage<S>& g = self.parent(0).grad_buffer();
                                  for (Index o = 0; o < outer; ++o) {
                                    g.segment(o * src_row + off, w) += self.grad.segment(o * w, w);
                                  }
                                });
}

namespace {

// Flat source index in NCHW for each element of the token tensor.
std::vector<Index> patch_index(Index N, Index C, Index H, Index W, int p) {
  const Index gh = H / p;
  const Index gw = W / p;
  const Index T = gh * gw;
  const Index F = C * p * p;
  std::vector<Index> idx(static_cast<std::size_t>(N * T * F));
  for (Index n = 0; n < N; ++n)
    for (Index ty = 0; ty < gh; ++ty)
      for (Index tx = 0; tx < gw; ++tx)
        for (Index c = 0; c < C; ++c)
          for (Index dy = 0; dy < p; ++dy)
            for (Index dx = 0; dx < p; ++dx) {
              const Index t = ty * gw + tx;
              const Index f = (c * p + dy) * p + dx;
              idx[(n * T + t) * F + f] = ((n * C + c) * H + ty * p + dy) * W + tx * p + dx;
            }
  return idx;
}

}  // namespace

template <typename S>
Tensor<S> patchify(const Tensor<S>& x, int patch) {
  if (x.ndim() != 4 || patch <= 0 || x.dim(2) % patch != 0 || x.dim(3) % patch != 0) {
    throw ShapeError("patchify: shape " + to_string(x.shape()) + " not divisible by patch " +
                     std::to_string(patch));
  }
  const Index N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  auto idx = std::make_shared<std::vector<Index>>(patch_index(N, C, H, W, patch));
  Storage<S> v(x.size());
  for (std::size_t i = 0; i < idx->size(); ++i) v[i] = x.values()[(*idx)[i]];
  const Shape out{N, (H / patch) * (W / patch), C * patch * patch};
  return detail::make_result<S>("patchify", out, std::move(v), {&x}, [idx](NodeT<S>& self) {
    Storage<S>& g = self.parent(0).grad_buffer();
    for (std::size_t i = 0; i < idx->size(); ++i) g[(*idx)[i]] += self.grad[i];
  });
}

template <typename S>
Tensor<S> unpatchify(const Tensor<S>& tokens, Index channels, Index height, Index width, int patch) {
  if (tokens.ndim() != 3 || patch <= 0 || height % patch != 0 || width % patch != 0 ||
      tokens.dim(1) != (height / patch) * (width / patch) ||
      tokens.dim(2) != channels * patch * patch) {
    throw ShapeError("unpatchify: tokens " + to_string(tokens.shape()) + " do not tile " +
                     to_string({channels, height, width}) + " with patch " + std::to_string(patch));
  }
  const Index N = tokens.dim(0);
  auto idx = std::make_shared<std::vector<Index>>(patch_index(N, channels, height, width, patch));
  Storage<S> v(tokens.size());
  for (std::size_t i = 0; i < idx->size(); ++i) v[(*idx)[i]] = tokens.values()[i];
  return detail::make_result<S>("unpatchify", Shape{N, channels, height, width}, std::move(v),
                                {&tokens}, [idx](NodeT<S>& self) {
                                  Storage<S>& g = self.parent(0).grad_buffer();
                                  for (std::size_t i = 0; i < idx->size(); ++i) {
                                    g[i] += self.grad[(*idx)[i]];
                                  }
                                });
}

// ---------------------------------------------------------------- convolution

namespace {

struct ConvGeom {
  Index C, H, W;      // image side (conv input / transposed-conv output)
  Index k, s, p;
  Index Ho, Wo;       // column side (conv output / transposed-conv input)
  Index rows() const { return C * k * k; }
  Index cols() const { return Ho * Wo; }
};

// Output columns ox with 0 <= ox * s - p + kx < W, as a half-open range.
inline std::pair<Index, Index> valid_columns(const ConvGeom& g, Index kx) {
  const Index off = kx - g.p;
  const Index lo = off >= 0 ? 0 : (-off + g.s - 1) / g.s;
  const Index hi = g.W - off <= 0 ? 0 : std::min(g.Wo, (g.W - off - 1) / g.s + 1);
  return {lo, std::max(lo, hi)};
}

template <typename S>
void im2col(const S* img, const ConvGeom& g, S* cols) {
  const Index n = g.cols();
  for (Index c = 0; c < g.C; ++c)
    for (Index ky = 0; ky < g.k; ++ky)
      for (Index kx = 0; kx < g.k; ++kx) {
        S* row = cols + ((c * g.k + ky) * g.k + kx) * n;
        const auto [lo, hi] = valid_columns(g, kx);
        for (Index oy = 0; oy < g.Ho; ++oy) {
          const Index iy = oy * g.s - g.p + ky;
          S* dst = row + oy * g.Wo;
          if (iy < 0 || iy >= g.H) {
            std::fill(dst, dst + g.Wo, S(0));
            continue;
          }
          const S* src = img + (c * g.H + iy) * g.W;
          const Index off = kx - g.p;
          std::fill(dst, dst + lo, S(0));
          if (g.s == 1) {
            std::copy(src + lo + off, src + hi + off, dst + lo);
          } else {
            for (Index ox = lo; ox < hi; ++ox) dst[ox] = src[ox * g.s + off];
          }
          std::fill(dst + hi, dst + g.Wo, S(0));
        }
      }
}

template <typename S>
void col2im(const S* cols, const ConvGeom& g, S* img) {
  const Index n = g.cols();
  for (Index c = 0; c < g.C; ++c)
    for (Index ky = 0; ky < g.k; ++ky)
      for (Index kx = 0; kx < g.k; ++kx) {
        const S* row = cols + ((c * g.k + ky) * g.k + kx) * n;
        const auto [lo, hi] = valid_columns(g, kx);
        for (Index oy = 0; oy < g.Ho; ++oy) {
          const Index iy = oy * g.s - g.p + ky;
          if (iy < 0 || iy >= g.H) continue;
          S* dst = img + (c * g.H + iy) * g.W;
          const Index off = kx - g.p;
          const S* src = row + oy * g.Wo;
          for (Index ox = lo; ox < hi; ++ox) dst[ox * g.s + off] += src[ox];
        }
      }
}

void check_conv_args(const char* op, const Shape& x, const Shape& w, Index in_channels_axis,
                     int stride, int pad) {
  if (x.size() != 4 || w.size() != 4 || w[2] != w[3]) throw ShapeError(shapes_msg(op, x, w));
  if (x[1] != w[in_channels_axis]) throw ShapeError(shapes_msg(op, x, w));
  if (stride <= 0 || pad < 0) throw ShapeError(std::string(op) + ": invalid stride/padding");
}

}  // namespace

template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& weight, const Tensor<S>& bias, int stride,
                 int pad) {
  check_conv_args("conv2d", x.shape(), weight.shape(), 1, stride, pad);
  const Index N = x.dim(0), Cout = weight.dim(0), k = weight.dim(2);
  ConvGeom g{x.dim(1), x.dim(2), x.dim(3), k, stride, pad, 0, 0};
  g.Ho = (g.H + 2 * pad - k) / stride + 1;
  g.Wo = (g.W + 2 * pad - k) / stride + 1;
  if (g.Ho <= 0 || g.Wo <= 0) throw ShapeError(shapes_msg("conv2d", x.shape(), weight.shape()));
  const bool has_bias = bias.defined();
  if (has_bias && (bias.ndim() != 1 || bias.dim(0) != Cout)) {
    throw ShapeError(shapes_msg("conv2d", weight.shape(), bias.shape()));
  }

  MapCM<S> Wm(weight.data(), Cout, g.rows());
  MatRM<S> cols(g.rows(), g.cols());
  Storage<S> v(N * Cout * g.cols());
  for (Index n = 0; n < N; ++n) {
    im2col(x.data() + n * g.C * g.H * g.W, g, cols.data());
    MapM<S> O(v.data() + n * Cout * g.cols(), Cout, g.cols());
    O.noalias() = Wm * cols;
    if (has_bias) O.colwise() += MapCM<S>(bias.data(), Cout, 1).col(0);
  }
  std::vector<const Tensor<S>*> inputs{&x, &weight};
  if (has_bias) inputs.push_back(&bias);
  return detail::make_result<S>(
      "conv2d", Shape{N, Cout, g.Ho, g.Wo}, std::move(v), std::move(inputs),
      [g, N, Cout, has_bias](NodeT<S>& self) {
        NodeT<S>& nx = self.parent(0);
        NodeT<S>& nw = self.parent(1);
        MapCM<S> Wm(nw.value.data(), Cout, g.rows());
        MatRM<S> cols(g.rows(), g.cols());
        MatRM<S> dcols(g.rows(), g.cols());
        if (self.wants(0)) nx.grad_buffer();
        if (self.wants(1)) nw.grad_buffer();
        for (Index n = 0; n < N; ++n) {
          MapCM<S> G(self.grad.data() + n * Cout * g.cols(), Cout, g.cols());
          if (self.wants(1)) {
            im2col(nx.value.data() + n * g.C * g.H * g.W, g, cols.data());
            MapM<S>(nw.grad.data(), Cout, g.rows()).noalias() += G * cols.transpose();
          }
          if (self.wants(0)) {
            dcols.noalias() = Wm.transpose() * G;
            col2im(dcols.data(), g, nx.grad.data() + n * g.C * g.H * g.W);
          }
        }
        if (has_bias && self.wants(2)) {
          Storage<S>& gb = self.parent(2).grad_buffer();
          for (Index n = 0; n < N; ++n) {
            MapCM<S> G(self.grad.data() + n * Cout * g.cols(), Cout, g.cols());
            gb += G.rowwise().sum().array();
          }
        }
      });
}

template <typename S>
Tensor<S> conv_transpose2d(const Tensor<S>& x, const Tensor<S>& weight, const Tensor<S>& bias,
                           int stride, int pad, int output_pad) {
  check_conv_args("conv_transpose2d", x.shape(), weight.shape(), 0, stride, pad);
  if (output_pad < 0 || output_pad >= stride) {
    throw ShapeError("conv_transpose2d: output_pad must be in [0, stride)");
  }
  const Index N = x.dim(0), Cin = weight.dim(0), Cout = weight.dim(1), k = weight.dim(2);
  const Index Hi = x.dim(2), Wi = x.dim(3);
  ConvGeom g{Cout, (Hi - 1) * stride - 2 * pad + k + output_pad,
             (Wi - 1) * stride - 2 * pad + k + output_pad, k, stride, pad, Hi, Wi};
  if (g.H <= 0 || g.W <= 0) throw ShapeError(shapes_msg("conv_transpose2d", x.shape(), weight.shape()));
  const bool has_bias = bias.defined();
  if (has_bias && (bias.ndim() != 1 || bias.dim(0) != Cout)) {
    throw ShapeError(shapes_msg("conv_transpose2d", weight.shape(), bias.shape()));
  }

  MapCM<S> Wm(weight.data(), Cin, g.rows());
  MatRM<S> cols(g.rows(), g.cols());
  const Index out_plane = g.H * g.W;
  Storage<S> v = Storage<S>::Zero(N * Cout * out_plane);
  for (Index n = 0; n < N; ++n) {
    MapCM<S> X(x.data() + n * Cin * g.cols(), Cin, g.cols());
    cols.noalias() = Wm.transpose() * X;
    S* out = v.data() + n * Cout * out_plane;
    col2im(cols.data(), g, out);
    if (has_bias) {
      for (Index c = 0; c < Cout; ++c) {
        Eigen::Map<Storage<S>>(out + c * out_plane, out_plane) += bias.values()[c];
      }
    }
  }
  std::vector<const Tensor<S>*> inputs{&x, &weight};
  if (has_bias) inputs.push_back(&bias);
  return detail::make_result<S>(
      "conv_transpose2d", Shape{N, Cout, g.H, g.W}, std::move(v), std::move(inputs),
      [g, N, Cin, Cout, out_plane, has_bias](NodeT<S>& self) {
        NodeT<S>& nx = self.parent(0);
        NodeT<S>& nw = self.parent(1);
        MapCM<S> Wm(nw.value.data(), Cin, g.rows());
        MatRM<S> gcols(g.rows(), g.cols());
        if (self.wants(0)) nx.grad_buffer();
        if (self.wants(1)) nw.grad_buffer();
        for (Index n = 0; n < N; ++n) {
          im2col(self.grad.data() + n * Cout * out_plane, g, gcols.data());
          if (self.wants(0)) {
            MapM<S>(nx.grad.data() + n * Cin * g.cols(), Cin, g.cols()).noalias() += Wm * gcols;
          }
          if (self.wants(1)) {
            MapCM<S> X(nx.value.data() + n * Cin * g.cols(), Cin, g.cols());
            MapM<S>(nw.grad.data(), Cin, g.rows()).noalias() += X * gcols.transpose();
          }
        }
        if (has_bias && self.wants(2)) {
          Storage<S>& gb = self.parent(2).grad_buffer();
          for (Index n = 0; n < N; ++n)
            for (Index c = 0; c < Cout; ++c) {
              gb[c] += self.grad.segment((n * Cout + c) * out_plane, out_plane).sum();
            }
        }
      });
}

// ---------------------------------------------------------------- resize

namespace {

struct Tap {
  Index i0, i1;
  double f;
};

std::vector<Tap> bilinear_taps(Index in, Index out) {
  std::vector<Tap> taps(static_cast<std::size_t>(out));
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (Index o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
    if (src < 0.0) src = 0.0;
    Index i0 = static_cast<Index>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const Index i1 = std::min(i0 + 1, in - 1);
    taps[o] = {i0, i1, src - static_cast<double>(i0)};
  }
  return taps;
}

}  // namespace

template <typename S>
Tensor<S> resize_bilinear(const Tensor<S>& x, Index height, Index width) {
  if (x.ndim() != 4 || height <= 0 || width <= 0) {
    throw ShapeError("bilinear_resize: expected NCHW input, got " + to_string(x.shape()));
  }
  const Index planes = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
  const auto ty = bilinear_taps(H, height);
  const auto tx = bilinear_taps(W, width);
  Storage<S> v(planes * height * width);
  for (Index p = 0; p < planes; ++p) {
    const S* src = x.data() + p * H * W;
    S* dst = v.data() + p * height * width;
    for (Index oy = 0; oy < height; ++oy) {
      const Tap& a = ty[oy];
      const S fy = static_cast<S>(a.f);
      for (Index ox = 0; ox < width; ++ox) {
        const Tap& b = tx[ox];
        const S fx = static_cast<S>(b.f);
        const S v00 = src[a.i0 * W + b.i0], v01 = src[a.i0 * W + b.i1];
        const S v10 = src[a.i1 * W + b.i0], v11 = src[a.i1 * W + b.i1];
        const S top = v00 + fx * (v01 - v00);
        const S bot = v10 + fx * (v11 - v10);
        dst[oy * width + ox] = top + fy * (bot - top);
      }
    }
  }
  return detail::make_result<S>(
      "bilinear_resize", Shape{x.dim(0), x.dim(1), height, width}, std::move(v), {&x},
      [ty, tx, planes, H, W, height, width](NodeT<S>& self) {
        Storage<S>& gx = self.parent(0).grad_buffer();
        for (Index p = 0; p < planes; ++p) {
          S* dst = gx.data() + p * H * W;
          const S* g = self.grad.data() + p * height * width;
          for (Index oy = 0; oy < height; ++oy) {
            const Tap& a = ty[oy];
            const S fy = static_cast<S>(a.f);
            for (Index ox = 0; ox < width; ++ox) {
              const Tap& b = tx[ox];
              const S fx = static_cast<S>(b.f);
              const S gv = g[oy * width + ox];
              dst[a.i0 * W + b.i0] += gv * (1 - fx) * (1 - fy);
              dst[a.i0 * W + b.i1] += gv * fx * (1 - fy);
              dst[a.i1 * W + b.i0] += gv * (1 - fx) * fy;
              dst[a.i1 * W + b.i1] += gv * fx * fy;
            }
          }
        }
      });
}

// ---------------------------------------------------------------- dispatch

double OpAttrs::scalar(std::string_view key) const {
  auto it = values.find(key);
  if (it == values.end() || it->second.size() != 1) {
    throw std::invalid_argument("missing scalar attribute '" + std::string(key) + "'");
  }
  return it->second.front();
}

double OpAttrs::scalar_or(std::string_view key, double fallback) const {
  auto it = values.find(key);
  return it == values.end() || it->second.empty() ? fallback : it->second.front();
}

std::vector<double> OpAttrs::list(std::string_view key) const {
  auto it = values.find(key);
  if (it == values.end()) throw std::invalid_argument("missing attribute '" + std::string(key) + "'");
  return it->second;
}

std::vector<std::string> op_names() {
  return {"add",      "subtract",   "multiply",       "scalar_multiply", "add_scalar",
          "matmul",   "conv2d",     "conv_transpose2d", "relu",           "softmax",
          "per_channel_mean", "per_channel_std", "reshape", "permute",    "concat",
          "slice",    "patchify",   "unpatchify",     "bilinear_resize", "abs",
          "square",   "exp",        "log",            "sqrt",            "clamp",
          "reduce_mean", "reduce_sum"};
}

template <typename S>
Tensor<S> apply_op(std::string_view op, std::span<const Tensor<S>> in, const OpAttrs& attrs) {
  auto need = [&](std::size_t n) {
    if (in.size() < n) {
      throw std::invalid_argument(std::string(op) + ": expected " + std::to_string(n) + " inputs");
    }
  };
  auto ints = [&](std::string_view key) {
    std::vector<int> out;
    for (double d : attrs.list(key)) out.push_back(static_cast<int>(d));
    return out;
  };
  auto idx = [&](std::string_view key) { return static_cast<Index>(attrs.scalar(key)); };
  const Tensor<S> none;

  if (op == "add") return need(2), add(in[0], in[1]);
  if (op == "subtract") return need(2), sub(in[0], in[1]);
  if (op == "multiply") return need(2), mul(in[0], in[1]);
  if (op == "divide") return need(2), div(in[0], in[1]);
  if (op == "scalar_multiply") return need(1), scale(in[0], static_cast<S>(attrs.scalar("value")));
  if (op == "add_scalar") return need(1), add_scalar(in[0], static_cast<S>(attrs.scalar("value")));
  if (op == "matmul") return need(2), matmul(in[0], in[1]);
  if (op == "conv2d") {
    need(2);
    return conv2d(in[0], in[1], in.size() > 2 ? in[2] : none, static_cast<int>(attrs.scalar_or("stride", 1)),
                  static_cast<int>(attrs.scalar_or("pad", 0)));
  }
  if (op == "conv_transpose2d") {
    need(2);
    return conv_transpose2d(in[0], in[1], in.size() > 2 ? in[2] : none,
                            static_cast<int>(attrs.scalar_or("stride", 1)),
                            static_cast<int>(attrs.scalar_or("pad", 0)),
                            static_cast<int>(attrs.scalar_or("output_pad", 0)));
  }
  if (op == "relu") return need(1), relu(in[0]);
  if (op == "softmax") return need(1), softmax(in[0], static_cast<int>(attrs.scalar_or("axis", -1)));
  if (op == "per_channel_mean") return need(1), channel_mean(in[0]);
  if (op == "per_channel_std") return need(1), channel_std(in[0], static_cast<S>(attrs.scalar_or("eps", 1e-5)));
  if (op == "reshape") {
    need(1);
    Shape s;
    for (double d : attrs.list("shape")) s.push_back(static_cast<Index>(d));
    return reshape(in[0], s);
  }
  if (op == "permute") return need(1), permute(in[0], ints("order"));
  if (op == "concat") return need(1), concat(in, static_cast<int>(attrs.scalar("axis")));
  if (op == "slice") return need(1), slice(in[0], static_cast<int>(attrs.scalar("axis")), idx("start"), idx("length"));
  if (op == "patchify") return need(1), patchify(in[0], static_cast<int>(attrs.scalar("patch")));
  if (op == "unpatchify") {
    need(1);
    return unpatchify(in[0], idx("channels"), idx("height"), idx("width"),
                      static_cast<int>(attrs.scalar("patch")));
  }
  if (op == "bilinear_resize") return need(1), resize_bilinear(in[0], idx("height"), idx("width"));
  if (op == "abs") return need(1), abs(in[0]);
  if (op == "square") return need(1), square(in[0]);
  if (op == "exp") return need(1), exp(in[0]);
  if (op == "log") return need(1), log(in[0]);
  if (op == "sqrt") return need(1), sqrt(in[0]);
  if (op == "clamp") {
    need(1);
    return clamp(in[0], static_cast<S>(attrs.scalar("lo")), static_cast<S>(attrs.scalar("hi")));
  }
  if (op == "reduce_mean") {
    need(1);
    if (attrs.values.count("axes")) return mean(in[0], ints("axes"), attrs.scalar_or("keepdim", 0) != 0);
    return reduce_mean(in[0]);
  }
  if (op == "reduce_sum") {
    need(1);
    if (attrs.values.count("axes")) return sum(in[0], ints("axes"), attrs.scalar_or("keepdim", 0) != 0);
    return reduce_sum(in[0]);
  }
  throw std::invalid_argument("unknown op kind '" + std::string(op) + "'");
}

#define MSL_INSTANTIATE_OPS(S)                                                                  \
  template Tensor<S> add(const Tensor<S>&, const Tensor<S>&);                                  \
  template Tensor<S> sub(const Tensor<S>&, const Tensor<S>&);                                  \
  template Tensor<S> mul(const Tensor<S>&, const Tensor<S>&);                                  \
  template Tensor<S> div(const Tensor<S>&, const Tensor<S>&);                                  \
  template Tensor<S> scale(const Tensor<S>&, S);                                               \
  template Tensor<S> add_scalar(const Tensor<S>&, S);                                          \
  template Tensor<S> relu(const Tensor<S>&);                                                   \
  template Tensor<S> exp(const Tensor<S>&);                                                    \
  template Tensor<S> log(const Tensor<S>&);                                                    \
  template Tensor<S> sqrt(const Tensor<S>&);                                                   \
  template Tensor<S> abs(const Tensor<S>&);                                                    \
  template Tensor<S> square(const Tensor<S>&);                                                 \
  template Tensor<S> clamp(const Tensor<S>&, S, S);                                            \
  template Tensor<S> matmul(const Tensor<S>&, const Tensor<S>&);                               \
  template Tensor<S> softmax(const Tensor<S>&, int);                                           \
  template Tensor<S> sum(const Tensor<S>&, std::vector<int>, bool);                            \
  template Tensor<S> mean(const Tensor<S>&, std::vector<int>, bool);                           \
  template Tensor<S> reduce_sum(const Tensor<S>&);                                             \
  template Tensor<S> reduce_mean(const Tensor<S>&);                                            \
  template Tensor<S> channel_mean(const Tensor<S>&);                                           \
  template Tensor<S> channel_std(const Tensor<S>&, S);                                         \
  template Tensor<S> reshape(const Tensor<S>&, Shape);                                         \
  template Tensor<S> permute(const Tensor<S>&, std::vector<int>);                              \
  template Tensor<S> transpose(const Tensor<S>&);                                              \
  template Tensor<S> concat(std::span<const Tensor<S>>, int);                                  \
  template Tensor<S> slice(const Tensor<S>&, int, Index, Index);                               \
  template Tensor<S> patchify(const Tensor<S>&, int);                                          \
  template Tensor<S> unpatchify(const Tensor<S>&, Index, Index, Index, int);                   \
  template Tensor<S> conv2d(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, int, int);   \
  template Tensor<S> conv_transpose2d(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&,    \
                                      int, int, int);                                          \
  template Tensor<S> resize_bilinear(const Tensor<S>&, Index, Index);                          \
  template Tensor<S> apply_op(std::string_view, std::span<const Tensor<S>>, const OpAttrs&);

MSL_INSTANTIATE_OPS(float)
MSL_INSTANTIATE_OPS(double)

#undef MSL_INSTANTIATE_OPS

}  // namespace msl
