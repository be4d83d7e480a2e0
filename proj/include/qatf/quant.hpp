// SPDX-FileCopyrightText: (c) 2026 The qatf Authors
//
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "qatf/tensor.hpp"

// Uniform fake quantization:
//   q(x; s, z) = s * (clamp(round(x / s) + z, qmin, qmax) - z)
// with round-half-to-even. The asymmetric grid is [0, 2^b - 1]; the
// symmetric-signed grid is [-2^(b-1), 2^(b-1) - 1] with z = 0.

namespace qatf {

enum class Symmetry { kSymmetricSigned, kAsymmetric };

enum class CalibrationMethod { kMinMax, kMse };

inline constexpr double kScaleFloor = 1e-8;

struct QuantScheme {
  int bitwidth = 4;
  Symmetry symmetry = Symmetry::kSymmetricSigned;
  bool per_channel = true;
  int axis = 1;  // only meaningful when per_channel

  std::int64_t grid_min() const {
    return symmetry == Symmetry::kAsymmetric ? 0 : -(std::int64_t{1} << (bitwidth - 1));
  }
  std::int64_t grid_max() const {
    return symmetry == Symmetry::kAsymmetric ? (std::int64_t{1} << bitwidth) - 1
                                             : (std::int64_t{1} << (bitwidth - 1)) - 1;
  }

  void validate() const {
    if (bitwidth < 2 || bitwidth > 16)
      throw Error("quant: bitwidth " + std::to_string(bitwidth) + " outside [2, 16]");
    if (per_channel && axis < 0) throw Error("quant: negative per-channel axis");
  }

  static QuantScheme per_tensor(int bits, Symmetry sym) { return {bits, sym, false, 0}; }
  static QuantScheme per_channel_on(int bits, Symmetry sym, int axis) { return {bits, sym, true, axis}; }

  bool operator==(const QuantScheme&) const = default;
};

/// One (scale, zero_point) per group: per output channel, or a single entry.
struct QuantParams {
  std::vector<double> scale;
  std::vector<std::int64_t> zero_point;

  bool operator==(const QuantParams&) const = default;
};

class QuantizerState {
 public:
  QuantizerState() = default;
  QuantizerState(QuantScheme scheme, QuantParams params) : scheme_(scheme), params_(std::move(params)) {
    scheme_.validate();
  }

  const QuantScheme& scheme() const { return scheme_; }
  const QuantParams& params() const { return params_; }
  bool enabled() const { return enabled_; }
  bool frozen() const { return frozen_; }
  void set_enabled(bool on) { enabled_ = on; }
  /// Freezing is one-way for the lifetime of the state.
  void freeze() { frozen_ = true; }
  void set_params(QuantParams params) {
    if (frozen_) throw Error("quant: parameters of a frozen quantizer cannot change");
    params_ = std::move(params);
  }

 private:
  QuantScheme scheme_;
  QuantParams params_;
  bool enabled_ = true;
  bool frozen_ = false;
};

namespace detail {

// Element i belongs to group (i / inner) % groups; `outer` blocks repeat.
struct GroupLayout {
  std::int64_t groups = 1;
  std::int64_t inner = 1;
  std::int64_t outer = 1;

  template <typename F>
  void for_each_in_group(std::int64_t g, F&& f) const {
    for (std::int64_t o = 0; o < outer; ++o) {
      const std::int64_t base = (o * groups + g) * inner;
      for (std::int64_t j = 0; j < inner; ++j) f(base + j);
    }
  }
};

inline GroupLayout group_layout(const Shape& shape, const QuantScheme& scheme) {
  GroupLayout layout;
  const std::int64_t n = numel_of(shape);
  if (!scheme.per_channel) {
    layout.inner = n;
    return layout;
  }
  if (scheme.axis >= static_cast<int>(shape.size()))
    throw ShapeError("quant: per-channel axis " + std::to_string(scheme.axis) + " invalid for shape " +
                     shape_str(shape));
  const auto ax = static_cast<std::size_t>(scheme.axis);
  layout.groups = shape[ax];
  for (std::size_t i = ax + 1; i < shape.size(); ++i) layout.inner *= shape[i];
  layout.outer = n / (layout.groups * layout.inner);
  return layout;
}

inline void check_params(const QuantParams& p, const QuantScheme& scheme, std::int64_t groups) {
  if (static_cast<std::int64_t>(p.scale.size()) != groups ||
      static_cast<std::int64_t>(p.zero_point.size()) != groups)
    throw ShapeError("quant: expected " + std::to_string(groups) + " scale/zero-point groups, got " +
                     std::to_string(p.scale.size()) + "/" + std::to_string(p.zero_point.size()));
  for (std::size_t g = 0; g < p.scale.size(); ++g) {
    if (!(p.scale[g] > 0) || !std::isfinite(p.scale[g]))
      throw Error("quant: scale must be positive, got " + std::to_string(p.scale[g]) + " in group " +
                  std::to_string(g));
    if (p.zero_point[g] < scheme.grid_min() || p.zero_point[g] > scheme.grid_max() ||
        (scheme.symmetry == Symmetry::kSymmetricSigned && p.zero_point[g] != 0))
      throw Error("quant: zero-point " + std::to_string(p.zero_point[g]) + " invalid in group " +
                  std::to_string(g));
  }
}

template <typename T>
T fake_quant_value(T x, T s, T z, T qmin, T qmax) {
  const T q = std::clamp(std::nearbyint(x / s) + z, qmin, qmax);
  return s * (q - z);
}

template <typename T>
bool ste_pass(T x, T s, T z, T qmin, T qmax) {
  const T q = std::nearbyint(x / s) + z;
  return q >= qmin && q <= qmax;
}

template <typename T, typename F>
void for_each_group(const Shape& shape, const QuantScheme& scheme, const QuantParams& params, F&& f) {
  scheme.validate();
  const auto layout = group_layout(shape, scheme);
  check_params(params, scheme, layout.groups);
  const T qmin = static_cast<T>(scheme.grid_min());
  const T qmax = static_cast<T>(scheme.grid_max());
  for (std::int64_t g = 0; g < layout.groups; ++g)
    f(layout, g, static_cast<T>(params.scale[g]), static_cast<T>(params.zero_point[g]), qmin, qmax);
}

// Sum of squared reconstruction errors of one group, accumulated in double in
// element order. Shared by calibrate_mse and reconstruction_mse so the two
// agree bit for bit.
template <typename T>
double group_sse(std::span<const T> w, const GroupLayout& layout, std::int64_t g, T s, T z, T qmin, T qmax) {
  double acc = 0.0;
  layout.for_each_in_group(g, [&](std::int64_t i) {
    const double d = static_cast<double>(w[i]) - static_cast<double>(fake_quant_value(w[i], s, z, qmin, qmax));
    acc += d * d;
  });
  return acc;
}

}  // namespace detail

/// Values-only quantize-dequantize; no gradient is recorded.
template <typename T>
Tensor<T> quantize_dequantize(const Tensor<T>& x, const QuantizerState& state) {
  if (!state.enabled()) throw Error("quantize_dequantize: quantizer is disabled");
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  auto xs = x.data();
  auto os = out.data();
  detail::for_each_group<T>(x.shape(), state.scheme(), state.params(),
                            [&](const detail::GroupLayout& layout, std::int64_t g, T s, T z, T qmin, T qmax) {
                              layout.for_each_in_group(g, [&](std::int64_t i) {
                                os[i] = detail::fake_quant_value(xs[i], s, z, qmin, qmax);
                              });
                            });
  return out;
}

/// Clipped straight-through estimator: upstream passes where the pre-clamp
/// integer round(x/s)+z lies on the grid, zero elsewhere.
template <typename T>
Tensor<T> ste_backward(const Tensor<T>& upstream, const Tensor<T>& x, const QuantizerState& state) {
  if (upstream.shape() != x.shape())
    throw ShapeError("ste_backward: upstream " + shape_str(upstream.shape()) + " vs input " +
                     shape_str(x.shape()));
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  auto xs = x.data();
  auto us = upstream.data();
  auto os = out.data();
  detail::for_each_group<T>(x.shape(), state.scheme(), state.params(),
                            [&](const detail::GroupLayout& layout, std::int64_t g, T s, T z, T qmin, T qmax) {
                              layout.for_each_in_group(g, [&](std::int64_t i) {
                                os[i] = detail::ste_pass(xs[i], s, z, qmin, qmax) ? us[i] : T(0);
                              });
                            });
  return out;
}

/// Differentiable fake quantization (forward: quantize_dequantize, backward:
/// ste_backward). A disabled quantizer is the identity.
template <typename T>
Tensor<T> fake_quant(const Tensor<T>& x, const QuantizerState& state) {
  if (!state.enabled()) return x;
  Tensor<T> out = quantize_dequantize(x, state);
  return record_op<T>("fake_quant", out, {&x}, [x, state](std::span<const T> g) mutable {
    Tensor<T> up(x.shape(), std::vector<T>(g.begin(), g.end()));
    Tensor<T> dx = ste_backward(up, x, state);
    auto gx = x.grad_buffer();
    auto ds = dx.data();
    for (std::size_t i = 0; i < ds.size(); ++i) gx[i] += ds[i];
  });
}

/// Scale and zero-point covering [lo, hi] (extended to contain zero for the
/// asymmetric grid). Scales never drop below kScaleFloor.
inline void params_from_range(double lo, double hi, const QuantScheme& scheme, double& scale,
                              std::int64_t& zero_point) {
  if (scheme.symmetry == Symmetry::kSymmetricSigned) {
    const double maxabs = std::max(std::abs(lo), std::abs(hi));
    scale = std::max(maxabs / static_cast<double>(scheme.grid_max()), kScaleFloor);
    zero_point = 0;
    return;
  }
  lo = std::min(lo, 0.0);
  hi = std::max(hi, 0.0);
  const double levels = static_cast<double>(scheme.grid_max());
  scale = std::max((hi - lo) / levels, kScaleFloor);
  const double z = std::nearbyint(-lo / scale);
  zero_point = static_cast<std::int64_t>(std::clamp(z, 0.0, levels));
}

template <typename T>
QuantParams calibrate_minmax(const Tensor<T>& w, const QuantScheme& scheme) {
  if (!w.defined() || w.numel() == 0) throw Error("calibrate_minmax: empty tensor");
  scheme.validate();
  const auto layout = detail::group_layout(w.shape(), scheme);
  auto ws = w.data();
  QuantParams p;
  p.scale.resize(static_cast<std::size_t>(layout.groups));
  p.zero_point.resize(static_cast<std::size_t>(layout.groups));
  for (std::int64_t g = 0; g < layout.groups; ++g) {
    double lo = std::numeric_limits<double>::infinity();
    double hi = -lo;
    layout.for_each_in_group(g, [&](std::int64_t i) {
      lo = std::min(lo, static_cast<double>(ws[i]));
      hi = std::max(hi, static_cast<double>(ws[i]));
    });
    params_from_range(lo, hi, scheme, p.scale[g], p.zero_point[g]);
  }
  return p;
}

/// Candidate multipliers of the min-max scale searched by calibrate_mse:
/// `grid_points` values evenly spaced over [0.2, 1.2], with 1.0 guaranteed.
inline std::vector<double> mse_candidates(int grid_points) {
  if (grid_points < 2) throw Error("calibrate_mse: grid_points must be >= 2");
  std::vector<double> c;
  bool has_one = false;
  for (int i = 0; i < grid_points; ++i) {
    double v = 0.2 + 1.0 * static_cast<double>(i) / static_cast<double>(grid_points - 1);
    if (std::abs(v - 1.0) < 1e-12) {
      v = 1.0;
      has_one = true;
    }
    c.push_back(v);
  }
  if (!has_one) {
    c.push_back(1.0);
    std::sort(c.begin(), c.end());
  }
  return c;
}

/// Per group, picks the scale c * s_minmax minimising the reconstruction MSE
/// (zero-point held at its min-max value); ties go to the smallest c.
template <typename T>
QuantParams calibrate_mse(const Tensor<T>& w, const QuantScheme& scheme, int grid_points = 101) {
  QuantParams base = calibrate_minmax(w, scheme);
  const auto candidates = mse_candidates(grid_points);
  const auto layout = detail::group_layout(w.shape(), scheme);
  const T qmin = static_cast<T>(scheme.grid_min());
  const T qmax = static_cast<T>(scheme.grid_max());
  auto ws = w.data();
  QuantParams best = base;
  for (std::int64_t g = 0; g < layout.groups; ++g) {
    const T z = static_cast<T>(base.zero_point[g]);
    double best_sse = std::numeric_limits<double>::infinity();
    for (const double c : candidates) {
      const double s = std::max(c * base.scale[g], kScaleFloor);
      const double sse = detail::group_sse<T>(ws, layout, g, static_cast<T>(s), z, qmin, qmax);
      if (sse < best_sse) {
        best_sse = sse;
        best.scale[g] = s;
      }
    }
  }
  return best;
}

/// Mean of squared differences between w and its quantize-dequantize image.
template <typename T>
double reconstruction_mse(const Tensor<T>& w, const QuantParams& params, const QuantScheme& scheme) {
  if (!w.defined() || w.numel() == 0) throw Error("reconstruction_mse: empty tensor");
  auto ws = w.data();
  double total = 0.0;
  detail::for_each_group<T>(w.shape(), scheme, params,
                            [&](const detail::GroupLayout& layout, std::int64_t g, T s, T z, T qmin, T qmax) {
                              total += detail::group_sse<T>(ws, layout, g, s, z, qmin, qmax);
                            });
  return total / static_cast<double>(w.numel());
}

template <typename T>
QuantParams calibrate(const Tensor<T>& w, const QuantScheme& scheme, CalibrationMethod method,
                      int grid_points = 101) {
  return method == CalibrationMethod::kMse ? calibrate_mse(w, scheme, grid_points)
                                           : calibrate_minmax(w, scheme);
}

inline std::string to_string(Symmetry s) {
  return s == Symmetry::kAsymmetric ? "asymmetric" : "symmetric";
}
inline Symmetry symmetry_from_string(const std::string& s) {
  if (s == "asymmetric") return Symmetry::kAsymmetric;
  if (s == "symmetric") return Symmetry::kSymmetricSigned;
  throw Error("unknown quantization symmetry '" + s + "'");
}
inline std::string to_string(CalibrationMethod m) { return m == CalibrationMethod::kMse ? "mse" : "minmax"; }
inline CalibrationMethod calibration_from_string(const std::string& s) {
  if (s == "mse") return CalibrationMethod::kMse;
  if (s == "minmax") return CalibrationMethod::kMinMax;
  throw Error("unknown calibration method '" + s + "'");
}

}  // namespace qatf
