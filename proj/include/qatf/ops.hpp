// SPDX-FileCopyrightText: (c) 2026 The qatf Authors
//
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "qatf/tensor.hpp"

// Differentiable primitives. Broadcasting is limited to two cases: the second
// operand is a scalar, or its shape is a suffix of the first operand's shape
// (leading-batch broadcast).

namespace qatf {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using MapConstMat = Eigen::Map<const RowMat<T>>;

inline bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

template <typename T>
void check_broadcast(std::string_view op, const Tensor<T>& a, const Tensor<T>& b) {
  if (b.numel() == 1 || is_suffix(b.shape(), a.shape())) return;
  throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(b.shape()) + " onto " +
                   shape_str(a.shape()));
}

template <typename T>
using ArrMap = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>;
template <typename T>
using ConstArrMap = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;

template <typename T>
ArrMap<T> arr(std::span<T> s) {
  return ArrMap<T>(s.data(), static_cast<Eigen::Index>(s.size()));
}
template <typename T>
ConstArrMap<T> arr(std::span<const T> s) {
  return ConstArrMap<T>(s.data(), static_cast<Eigen::Index>(s.size()));
}

// Calls f(i, j) for every element i of a tensor of n values and the element j
// of a broadcast operand of nb values (nb divides n).
template <typename F>
void for_broadcast(std::size_t n, std::size_t nb, F&& f) {
  for (std::size_t base = 0; base < n; base += nb)
    for (std::size_t j = 0; j < nb; ++j) f(base + j, j);
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_broadcast("add", a, b);
  Tensor<T> out = a.clone();
  auto os = out.data();
  auto bs = b.data();
  detail::for_broadcast(os.size(), bs.size(), [&](std::size_t i, std::size_t j) { os[i] += bs[j]; });
  return record_op<T>("add", out, {&a, &b}, [a, b](std::span<const T> g) {
    if (a.requires_grad()) detail::arr(a.grad_buffer()) += detail::arr(g);
    if (b.requires_grad()) {
      auto gb = b.grad_buffer();
      detail::for_broadcast(g.size(), gb.size(), [&](std::size_t i, std::size_t j) { gb[j] += g[i]; });
    }
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_broadcast("sub", a, b);
  Tensor<T> out = a.clone();
  auto os = out.data();
  auto bs = b.data();
  detail::for_broadcast(os.size(), bs.size(), [&](std::size_t i, std::size_t j) { os[i] -= bs[j]; });
  return record_op<T>("sub", out, {&a, &b}, [a, b](std::span<const T> g) {
    if (a.requires_grad()) detail::arr(a.grad_buffer()) += detail::arr(g);
    if (b.requires_grad()) {
      auto gb = b.grad_buffer();
      detail::for_broadcast(g.size(), gb.size(), [&](std::size_t i, std::size_t j) { gb[j] -= g[i]; });
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_broadcast("mul", a, b);
  Tensor<T> out = a.clone();
  auto os = out.data();
  auto bs = b.data();
  detail::for_broadcast(os.size(), bs.size(), [&](std::size_t i, std::size_t j) { os[i] *= bs[j]; });
  return record_op<T>("mul", out, {&a, &b}, [a, b](std::span<const T> g) {
    auto as = a.data();
    auto bs = b.data();
    if (a.requires_grad()) {
      auto ga = a.grad_buffer();
      detail::for_broadcast(g.size(), bs.size(), [&](std::size_t i, std::size_t j) { ga[i] += g[i] * bs[j]; });
    }
    if (b.requires_grad()) {
      auto gb = b.grad_buffer();
      detail::for_broadcast(g.size(), bs.size(), [&](std::size_t i, std::size_t j) { gb[j] += g[i] * as[i]; });
    }
  });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T c) {
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  detail::arr(out.data()) = detail::arr(x.data()) + c;
  return record_op<T>("add_scalar", out, {&x}, [x](std::span<const T> g) {
    detail::arr(x.grad_buffer()) += detail::arr(g);
  });
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& x, T c) {
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  detail::arr(out.data()) = detail::arr(x.data()) * c;
  return record_op<T>("mul_scalar", out, {&x}, [x, c](std::span<const T> g) {
    detail::arr(x.grad_buffer()) += detail::arr(g) * c;
  });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  detail::arr(out.data()) = detail::arr(x.data()).exp();
  return record_op<T>("exp", out, {&x}, [x, out](std::span<const T> g) {
    detail::arr(x.grad_buffer()) += detail::arr(g) * detail::arr(out.data());
  });
}

template <typename T>
Tensor<T> log(const Tensor<T>& x) {
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  detail::arr(out.data()) = detail::arr(x.data()).log();
  return record_op<T>("log", out, {&x}, [x](std::span<const T> g) {
    detail::arr(x.grad_buffer()) += detail::arr(g) / detail::arr(x.data());
  });
}

template <typename T>
Tensor<T> sqrt(const Tensor<T>& x) {
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  detail::arr(out.data()) = detail::arr(x.data()).sqrt();
  return record_op<T>("sqrt", out, {&x}, [x, out](std::span<const T> g) {
    detail::arr(x.grad_buffer()) += detail::arr(g) / (T(2) * detail::arr(out.data()));
  });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  detail::arr(out.data()) = T(1) / (T(1) + (-detail::arr(x.data())).exp());
  return record_op<T>("sigmoid", out, {&x}, [x, out](std::span<const T> g) {
    auto y = detail::arr(out.data());
    detail::arr(x.grad_buffer()) += detail::arr(g) * y * (T(1) - y);
  });
}

template <typename T>
Tensor<T> silu(const Tensor<T>& x) {
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  auto xa = detail::arr(x.data());
  detail::arr(out.data()) = xa / (T(1) + (-xa).exp());
  return record_op<T>("silu", out, {&x}, [x](std::span<const T> g) {
    auto xa = detail::arr(x.data());
    const Eigen::Array<T, Eigen::Dynamic, 1> s = T(1) / (T(1) + (-xa).exp());
    detail::arr(x.grad_buffer()) += detail::arr(g) * s * (T(1) + xa * (T(1) - s));
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = 0;
  for (const T v : x.data()) acc += v;
  Tensor<T> out = Tensor<T>::scalar(acc);
  return record_op<T>("sum", out, {&x}, [x](std::span<const T> g) {
    auto gx = x.grad_buffer();
    for (auto& v : gx) v += g[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  T acc = 0;
  for (const T v : x.data()) acc += v;
  const T n = static_cast<T>(x.numel());
  Tensor<T> out = Tensor<T>::scalar(acc / n);
  return record_op<T>("mean", out, {&x}, [x, n](std::span<const T> g) {
    auto gx = x.grad_buffer();
    for (auto& v : gx) v += g[0] / n;
  });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel_of(shape) != x.numel())
    throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  Tensor<T> out(std::move(shape), x.values());
  return record_op<T>("reshape", out, {&x}, [x](std::span<const T> g) {
    auto gx = x.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

namespace detail {

// Copies src into dst with axes a1 and a2 exchanged. With accumulate, adds.
template <typename T>
void swap_axes_copy(std::span<const T> src, const Shape& src_shape, std::span<T> dst,
                    std::size_t a1, std::size_t a2, bool accumulate) {
  const std::size_t r = src_shape.size();
  std::vector<std::int64_t> stride(r, 1);
  for (std::size_t i = r - 1; i > 0; --i) stride[i - 1] = stride[i] * src_shape[i];
  Shape dst_shape = src_shape;
  std::swap(dst_shape[a1], dst_shape[a2]);
  std::vector<std::int64_t> dst_stride(r, 1);
  for (std::size_t i = r - 1; i > 0; --i) dst_stride[i - 1] = dst_stride[i] * dst_shape[i];
  // Source stride as seen when walking the destination index space.
  std::vector<std::int64_t> walk = stride;
  std::swap(walk[a1], walk[a2]);
  std::vector<std::int64_t> idx(r, 0);
  const std::int64_t n = numel_of(src_shape);
  std::int64_t src_off = 0;
  for (std::int64_t d = 0; d < n; ++d) {
    if (accumulate)
      dst[static_cast<std::size_t>(d)] += src[static_cast<std::size_t>(src_off)];
    else
      dst[static_cast<std::size_t>(d)] = src[static_cast<std::size_t>(src_off)];
    for (std::size_t k = r; k-- > 0;) {
      ++idx[k];
      src_off += walk[k];
      if (idx[k] < dst_shape[k]) break;
      src_off -= walk[k] * dst_shape[k];
      idx[k] = 0;
    }
  }
}

inline std::size_t norm_axis(std::int64_t axis, std::int64_t rank, std::string_view op) {
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank)
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for rank " +
                     std::to_string(rank));
  return static_cast<std::size_t>(axis);
}

}  // namespace detail

/// Exchanges two axes (default: the last two).
template <typename T>
Tensor<T> transpose(const Tensor<T>& x, std::int64_t axis1 = -2, std::int64_t axis2 = -1) {
  const auto a1 = detail::norm_axis(axis1, x.rank(), "transpose");
  const auto a2 = detail::norm_axis(axis2, x.rank(), "transpose");
  Shape shape = x.shape();
  std::swap(shape[a1], shape[a2]);
  Tensor<T> out = Tensor<T>::zeros(shape);
  detail::swap_axes_copy<T>(x.data(), x.shape(), out.data(), a1, a2, false);
  return record_op<T>("transpose", out, {&x}, [x, shape, a1, a2](std::span<const T> g) {
    detail::swap_axes_copy<T>(g, shape, x.grad_buffer(), a1, a2, true);
  });
}

/// Elements [begin, end) along `axis`.
template <typename T>
Tensor<T> slice(const Tensor<T>& x, std::int64_t axis, std::int64_t begin, std::int64_t end) {
  const auto ax = detail::norm_axis(axis, x.rank(), "slice");
  if (begin < 0 || end > x.dim(static_cast<std::int64_t>(ax)) || begin >= end)
    throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") invalid for " + shape_str(x.shape()));
  std::int64_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= x.shape()[i];
  for (std::size_t i = ax + 1; i < x.shape().size(); ++i) inner *= x.shape()[i];
  const std::int64_t len = x.shape()[ax];
  Shape shape = x.shape();
  shape[ax] = end - begin;
  Tensor<T> out = Tensor<T>::zeros(shape);
  auto xs = x.data();
  auto os = out.data();
  const std::int64_t w = (end - begin) * inner;
  for (std::int64_t o = 0; o < outer; ++o)
    std::copy_n(xs.begin() + (o * len + begin) * inner, w, os.begin() + o * w);
  return record_op<T>("slice", out, {&x},
                      [x, outer, inner, len, begin, w](std::span<const T> g) {
                        auto gx = x.grad_buffer();
                        for (std::int64_t o = 0; o < outer; ++o)
                          for (std::int64_t i = 0; i < w; ++i)
                            gx[static_cast<std::size_t>((o * len + begin) * inner + i)] +=
                                g[static_cast<std::size_t>(o * w + i)];
                      });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::int64_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const auto ax = detail::norm_axis(axis, parts[0].rank(), "concat");
  Shape shape = parts[0].shape();
  shape[ax] = 0;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (s.size() != shape.size()) throw ShapeError("concat: rank mismatch");
    shape[ax] += s[ax];
    s[ax] = 0;
    Shape ref = parts[0].shape();
    ref[ax] = 0;
    if (s != ref)
      throw ShapeError("concat: " + shape_str(p.shape()) + " vs " + shape_str(parts[0].shape()));
  }
  std::int64_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= shape[i];
  for (std::size_t i = ax + 1; i < shape.size(); ++i) inner *= shape[i];
  Tensor<T> out = Tensor<T>::zeros(shape);
  auto os = out.data();
  const std::int64_t row = shape[ax] * inner;
  std::int64_t off = 0;
  for (const auto& p : parts) {
    const std::int64_t w = p.shape()[ax] * inner;
    auto ps = p.data();
    for (std::int64_t o = 0; o < outer; ++o)
      std::copy_n(ps.begin() + o * w, w, os.begin() + o * row + off);
    off += w;
  }
  detail::check_finite("concat", out);
  auto* tape = Tape<T>::current();
  const bool needs = std::any_of(parts.begin(), parts.end(), [](const auto& p) { return p.requires_grad(); });
  if (tape == nullptr || !needs) return out;
  out.set_requires_grad(true);
  tape->record("concat", out.node(), [parts, outer, inner, row, ax](std::span<const T> g) {
    std::int64_t off = 0;
    for (auto& p : parts) {
      const std::int64_t w = p.shape()[ax] * inner;
      if (p.requires_grad()) {
        auto gp = p.grad_buffer();
        for (std::int64_t o = 0; o < outer; ++o)
          for (std::int64_t i = 0; i < w; ++i)
            gp[static_cast<std::size_t>(o * w + i)] += g[static_cast<std::size_t>(o * row + off + i)];
      }
      off += w;
    }
  });
  return out;
}

/// a [..., M, K] times b [K, N] (shared right operand) or b [..., K, N] with
/// the same leading dimensions as a.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || b.rank() < 2)
    throw ShapeError("matmul: operands must have rank >= 2, got " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  const std::int64_t m = a.dim(-2), k = a.dim(-1), n = b.dim(-1);
  const bool shared = b.rank() == 2;
  if (b.dim(-2) != k ||
      (!shared && (b.rank() != a.rank() ||
                   !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin()))))
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  Shape shape = a.shape();
  shape.back() = n;
  Tensor<T> out = Tensor<T>::zeros(shape);
  using detail::MapConstMat;
  using detail::MapMat;
  if (shared) {
    const std::int64_t rows = a.numel() / k;
    MapMat<T>(out.data().data(), rows, n).noalias() =
        MapConstMat<T>(a.data().data(), rows, k) * MapConstMat<T>(b.data().data(), k, n);
  } else {
    const std::int64_t batch = a.numel() / (m * k);
    for (std::int64_t i = 0; i < batch; ++i)
      MapMat<T>(out.data().data() + i * m * n, m, n).noalias() =
          MapConstMat<T>(a.data().data() + i * m * k, m, k) *
          MapConstMat<T>(b.data().data() + i * k * n, k, n);
  }
  return record_op<T>("matmul", out, {&a, &b},
                      [a, b, m, k, n, shared](std::span<const T> g) {
                        if (shared) {
                          const std::int64_t rows = a.numel() / k;
                          MapConstMat<T> gm(g.data(), rows, n);
                          if (a.requires_grad())
                            MapMat<T>(a.grad_buffer().data(), rows, k).noalias() +=
                                gm * MapConstMat<T>(b.data().data(), k, n).transpose();
                          if (b.requires_grad())
                            MapMat<T>(b.grad_buffer().data(), k, n).noalias() +=
                                MapConstMat<T>(a.data().data(), rows, k).transpose() * gm;
                          return;
                        }
                        const std::int64_t batch = a.numel() / (m * k);
                        for (std::int64_t i = 0; i < batch; ++i) {
                          MapConstMat<T> gm(g.data() + i * m * n, m, n);
                          if (a.requires_grad())
                            MapMat<T>(a.grad_buffer().data() + i * m * k, m, k).noalias() +=
                                gm * MapConstMat<T>(b.data().data() + i * k * n, k, n).transpose();
                          if (b.requires_grad())
                            MapMat<T>(b.grad_buffer().data() + i * k * n, k, n).noalias() +=
                                MapConstMat<T>(a.data().data() + i * m * k, m, k).transpose() * gm;
                        }
                      });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x) {
  const std::int64_t n = x.dim(-1);
  const std::int64_t rows = x.numel() / n;
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  detail::MapConstMat<T> xm(x.data().data(), rows, n);
  detail::MapMat<T> ym(out.data().data(), rows, n);
  for (std::int64_t r = 0; r < rows; ++r) {
    auto yr = ym.row(r).array();
    yr = (xm.row(r).array() - xm.row(r).maxCoeff()).exp();
    yr /= yr.sum();
  }
  return record_op<T>("softmax", out, {&x}, [x, out, n, rows](std::span<const T> g) {
    detail::MapConstMat<T> ym(out.data().data(), rows, n);
    detail::MapConstMat<T> gm(g.data(), rows, n);
    detail::MapMat<T> gx(x.grad_buffer().data(), rows, n);
    for (std::int64_t r = 0; r < rows; ++r) {
      const T dot = (gm.row(r).array() * ym.row(r).array()).sum();
      gx.row(r).array() += ym.row(r).array() * (gm.row(r).array() - dot);
    }
  });
}

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& x) {
  const std::int64_t n = x.dim(-1);
  const std::int64_t rows = x.numel() / n;
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  detail::MapConstMat<T> xm(x.data().data(), rows, n);
  detail::MapMat<T> ym(out.data().data(), rows, n);
  for (std::int64_t r = 0; r < rows; ++r) {
    const T mx = xm.row(r).maxCoeff();
    const T lse = mx + std::log((xm.row(r).array() - mx).exp().sum());
    ym.row(r).array() = xm.row(r).array() - lse;
  }
  return record_op<T>("log_softmax", out, {&x}, [x, out, n, rows](std::span<const T> g) {
    detail::MapConstMat<T> ym(out.data().data(), rows, n);
    detail::MapConstMat<T> gm(g.data(), rows, n);
    detail::MapMat<T> gx(x.grad_buffer().data(), rows, n);
    for (std::int64_t r = 0; r < rows; ++r) {
      const T gs = gm.row(r).sum();
      gx.row(r).array() += gm.row(r).array() - ym.row(r).array().exp() * gs;
    }
  });
}

/// Rows of `table` selected by `ids`; output shape [ids.size(), D].
template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const std::int32_t> ids) {
  if (table.rank() != 2) throw ShapeError("embedding: table must be 2-D, got " + shape_str(table.shape()));
  const std::int64_t vocab = table.dim(0), d = table.dim(1);
  Tensor<T> out = Tensor<T>::zeros({static_cast<std::int64_t>(ids.size()), d});
  auto ts = table.data();
  auto os = out.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= vocab)
      throw Error("embedding: token id " + std::to_string(ids[i]) + " outside vocabulary of " +
                  std::to_string(vocab));
    std::copy_n(ts.begin() + ids[i] * d, d, os.begin() + static_cast<std::int64_t>(i) * d);
  }
  std::vector<std::int32_t> idv(ids.begin(), ids.end());
  return record_op<T>("embedding", out, {&table}, [table, idv, d](std::span<const T> g) {
    auto gt = table.grad_buffer();
    for (std::size_t i = 0; i < idv.size(); ++i)
      for (std::int64_t j = 0; j < d; ++j)
        gt[static_cast<std::size_t>(idv[i] * d + j)] += g[i * static_cast<std::size_t>(d) + static_cast<std::size_t>(j)];
  });
}

/// Replaces x with `value` wherever mask is nonzero. The mask covers a suffix
/// of x's shape and repeats over the leading dimensions.
template <typename T>
Tensor<T> masked_fill(const Tensor<T>& x, std::span<const std::uint8_t> mask, T value) {
  if (mask.empty() || x.numel() % static_cast<std::int64_t>(mask.size()) != 0)
    throw ShapeError("masked_fill: mask of " + std::to_string(mask.size()) + " does not tile " +
                     shape_str(x.shape()));
  Tensor<T> out = x.clone();
  auto os = out.data();
  for (std::size_t i = 0; i < os.size(); ++i)
    if (mask[i % mask.size()]) os[i] = value;
  std::vector<std::uint8_t> m(mask.begin(), mask.end());
  return record_op<T>("masked_fill", out, {&x}, [x, m](std::span<const T> g) {
    auto gx = x.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (!m[i % m.size()]) gx[i] += g[i];
  });
}

/// out[r] = x[r, index[r]] over the last axis.
template <typename T>
Tensor<T> gather_last(const Tensor<T>& x, std::span<const std::int32_t> index) {
  const std::int64_t n = x.dim(-1);
  const std::int64_t rows = x.numel() / n;
  if (static_cast<std::int64_t>(index.size()) != rows)
    throw ShapeError("gather_last: " + std::to_string(index.size()) + " indices for " +
                     std::to_string(rows) + " rows");
  Shape shape(x.shape().begin(), x.shape().end() - 1);
  if (shape.empty()) shape = {1};
  Tensor<T> out = Tensor<T>::zeros(shape);
  auto xs = x.data();
  auto os = out.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    if (index[r] < 0 || index[r] >= n)
      throw Error("gather_last: index " + std::to_string(index[r]) + " out of range " + std::to_string(n));
    os[r] = xs[r * n + index[r]];
  }
  std::vector<std::int32_t> idx(index.begin(), index.end());
  return record_op<T>("gather_last", out, {&x}, [x, idx, n](std::span<const T> g) {
    auto gx = x.grad_buffer();
    for (std::size_t r = 0; r < idx.size(); ++r)
      gx[r * static_cast<std::size_t>(n) + static_cast<std::size_t>(idx[r])] += g[r];
  });
}

}  // namespace qatf
