#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <span>
#include <vector>

#include "cas/error.hpp"
#include "cas/tape.hpp"
#include "cas/tensor.hpp"

namespace cas {

/// f maps an input variable on a fresh tape to a scalar variable.
template <typename F, typename T>
concept TapeFunction = requires(F f, Tape<T>& tape, Var<T> x) {
  { f(tape, x) } -> std::same_as<Var<T>>;
};

template <std::floating_point T, TapeFunction<T> F>
T eval_scalar(F&& f, const Tensor<T>& x) {
  Tape<T> tape;
  Var<T> y = f(tape, tape.borrow(x));
  require(y.size() == 1, ErrorCode::shape,
          "grad_check: function must return a scalar, got " + to_string(y.shape()));
  return y.item();
}

template <std::floating_point T, TapeFunction<T> F>
Tensor<T> analytic_gradient(F&& f, const Tensor<T>& x) {
  Tensor<T> input(x.shape, x.data);
  input.requires_grad = true;
  Tape<T> tape;
  Var<T> y = f(tape, tape.leaf(input));
  require(y.size() == 1, ErrorCode::shape,
          "grad_check: function must return a scalar, got " + to_string(y.shape()));
  tape.backward(y);
  Tensor<T> g(x.shape);
  if (input.grad) g.data = *input.grad;
  return g;
}

/// max_i |analytic_i - (f(x + h e_i) - f(x - h e_i)) / 2h| / max(|analytic_i|, 1e-8),
/// over `coords` (all coordinates when empty).
template <std::floating_point T, TapeFunction<T> F>
double grad_check(F&& f, const Tensor<T>& x, double h = 1e-5, std::span<const std::size_t> coords = {}) {
  require(h > 0.0, ErrorCode::invalid_argument, "grad_check: step must be positive");
  Tensor<T> g = analytic_gradient<T>(f, x);
  std::vector<std::size_t> all;
  if (coords.empty()) {
    all.resize(x.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    coords = all;
  }
  Tensor<T> probe(x.shape, x.data);
  double worst = 0.0;
  for (std::size_t i : coords) {
    require(i < x.size(), ErrorCode::invalid_argument, "grad_check: coordinate out of range");
    const T saved = probe[i];
    probe[i] = saved + static_cast<T>(h);
    const double up = eval_scalar<T>(f, probe);
    probe[i] = saved - static_cast<T>(h);
    const double down = eval_scalar<T>(f, probe);
    probe[i] = saved;
    const double numeric = (up - down) / (2.0 * h);
    const double analytic = g[i];
    worst = std::max(worst, std::abs(analytic - numeric) / std::max(std::abs(analytic), 1e-8));
  }
  return worst;
}

/// Same measure for every tensor of a parameter map. `loss(tape, params)` must
/// bind the parameters as leaves (the non-const model_forward does). Tensors
/// larger than `max_coords` are probed at a seeded random sample of coordinates.
template <std::floating_point T, typename LossFn>
double parameter_grad_check(std::map<std::string, Tensor<T>>& params, LossFn&& loss, double h = 1e-5,
                            std::size_t max_coords = 0, std::uint64_t seed = 0) {
  require(h > 0.0, ErrorCode::invalid_argument, "grad_check: step must be positive");
  for (auto& [_, t] : params) {
    t.requires_grad = true;
    t.zero_grad();
  }
  {
    Tape<T> tape;
    Var<T> y = loss(tape, params);
    require(y.size() == 1, ErrorCode::shape, "grad_check: loss must be a scalar, got " + to_string(y.shape()));
    tape.backward(y);
  }
  auto value = [&] {
    Tape<T> tape;
    return static_cast<double>(loss(tape, params).item());
  };
  std::mt19937_64 rng(seed);
  double worst = 0.0;
  for (auto& [name, t] : params) {
    const std::vector<T> grad = t.grad ? *t.grad : std::vector<T>(t.size(), T{0});
    std::vector<std::size_t> coords;
    if (max_coords == 0 || t.size() <= max_coords) {
      for (std::size_t i = 0; i < t.size(); ++i) coords.push_back(i);
    } else {
      for (std::size_t k = 0; k < max_coords; ++k) coords.push_back(static_cast<std::size_t>(rng() % t.size()));
    }
    for (std::size_t i : coords) {
      const T saved = t.data[i];
      t.data[i] = saved + static_cast<T>(h);
      const double up = value();
      t.data[i] = saved - static_cast<T>(h);
      const double down = value();
      t.data[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double analytic = grad[i];
      worst = std::max(worst, std::abs(analytic - numeric) / std::max(std::abs(analytic), 1e-8));
    }
  }
  return worst;
}

}  // namespace cas
