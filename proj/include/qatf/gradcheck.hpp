// SPDX-FileCopyrightText: (c) 2026 The qatf Authors
//
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "qatf/tensor.hpp"

namespace qatf {

/// A single coordinate of a tensor to perturb.
template <typename T>
struct GradCoordinate {
  Tensor<T> tensor;
  std::int64_t index = 0;
};

/// Max over `coords` of |analytic - central difference| / max(1, |central difference|).
/// `f` must rebuild the scalar from the current tensor values on every call.
template <typename T>
double finite_difference_check(const std::function<Tensor<T>()>& f,
                               std::vector<GradCoordinate<T>> coords, double epsilon = 1e-4) {
  if (!(epsilon > 0)) throw Error("finite_difference_check: epsilon must be positive");
  for (auto& c : coords) c.tensor.drop_grad();
  {
    Tape<T> tape;
    Tensor<T> loss;
    {
      typename Tape<T>::Scope scope(tape);
      loss = f();
    }
    tape.backward(loss);
  }
  std::vector<double> analytic;
  analytic.reserve(coords.size());
  for (auto& c : coords)
    analytic.push_back(c.tensor.has_grad() ? static_cast<double>(c.tensor.grad()[c.index]) : 0.0);

  auto eval = [&f]() {
    NoGrad<T> off;
    const double v = static_cast<double>(f().item());
    if (!std::isfinite(v)) throw NonFiniteError("finite_difference_check: f returned a non-finite value");
    return v;
  };
  double worst = 0.0;
  for (std::size_t i = 0; i < coords.size(); ++i) {
    auto values = coords[i].tensor.data();
    const T saved = values[coords[i].index];
    values[coords[i].index] = saved + static_cast<T>(epsilon);
    const double fp = eval();
    values[coords[i].index] = saved - static_cast<T>(epsilon);
    const double fm = eval();
    values[coords[i].index] = saved;
    const double fd = (fp - fm) / (2.0 * epsilon);
    worst = std::max(worst, std::abs(analytic[i] - fd) / std::max(1.0, std::abs(fd)));
  }
  return worst;
}

/// Checks `samples` uniformly chosen coordinates of x (all of them when
/// samples <= 0 or exceeds the element count).
template <typename T>
double finite_difference_check(const std::function<Tensor<T>()>& f, Tensor<T> x,
                               double epsilon = 1e-4, int samples = 0, std::uint64_t seed = 0) {
  std::vector<GradCoordinate<T>> coords;
  if (samples <= 0 || samples >= x.numel()) {
    for (std::int64_t i = 0; i < x.numel(); ++i) coords.push_back({x, i});
  } else {
    std::mt19937_64 rng(seed);
    for (int s = 0; s < samples; ++s)
      coords.push_back({x, static_cast<std::int64_t>(rng() % static_cast<std::uint64_t>(x.numel()))});
  }
  return finite_difference_check<T>(f, std::move(coords), epsilon);
}

}  // namespace qatf
