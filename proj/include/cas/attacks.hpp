#pragma once

// White-box L-infinity attacks in [0,1] pixel space: FGSM, PGD with random
// start, CW-inf optimised by PGD, and the adaptive joint CE + CAS attack.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cas/error.hpp"
#include "cas/model.hpp"
#include "cas/objectives.hpp"
#include "cas/tape.hpp"
#include "cas/tensor.hpp"

namespace cas {

enum class AttackLoss {
  ce,         // cross-entropy of the final logits
  cas,        // mean CAS loss over the auxiliary classifiers only
  ce_cas,     // CE + beta/S * sum CAS (the joint training objective)
  cw,         // CW margin of the final logits
  cw_cas,     // CW margin + beta/S * sum CW margin of each auxiliary classifier
  trades_kl,  // KL(p(x_nat) || p(x')), the TRADES generation rule
};

constexpr std::string_view to_string(AttackLoss loss) noexcept {
  switch (loss) {
    case AttackLoss::ce: return "CE";
    case AttackLoss::cas: return "CAS";
    case AttackLoss::ce_cas: return "CE+CAS";
    case AttackLoss::cw: return "CW";
    case AttackLoss::cw_cas: return "CW+CAS";
    case AttackLoss::trades_kl: return "TRADES-KL";
  }
  return "?";
}

inline AttackLoss parse_attack_loss(std::string_view name) {
  for (AttackLoss l : {AttackLoss::ce, AttackLoss::cas, AttackLoss::ce_cas, AttackLoss::cw, AttackLoss::cw_cas,
                       AttackLoss::trades_kl})
    if (name == to_string(l)) return l;
  fail(ErrorCode::config, "unknown attack loss '" + std::string(name) + "' (expected CE, CAS, CE+CAS, CW, CW+CAS, TRADES-KL)");
}

inline bool uses_cas(AttackLoss loss) noexcept {
  return loss == AttackLoss::cas || loss == AttackLoss::ce_cas || loss == AttackLoss::cw_cas;
}

struct AttackConfig {
  double epsilon = 0.1;
  double step_size = 0.02;
  std::size_t steps = 10;
  bool random_start = true;
  AttackLoss loss = AttackLoss::ce;
  std::uint64_t seed = 0;
  double beta = 1.0;           // weight of the CAS terms in ce_cas / cw_cas
  Phase phase = Phase::test;   // CAS selection rule used by the attacked forward pass

  void validate() const {
    require(epsilon >= 0.0 && std::isfinite(epsilon), ErrorCode::config, "attack epsilon must be finite and >= 0");
    require(step_size >= 0.0 && std::isfinite(step_size), ErrorCode::config, "attack step size must be finite and >= 0");
    require(steps >= 1, ErrorCode::config, "attack needs at least one step");
    require(beta >= 0.0, ErrorCode::config, "attack beta must be >= 0");
  }
};

/// Clamps x_adv into [x - eps, x + eps] intersected with [0, 1], elementwise.
template <std::floating_point T>
Tensor<T> project_linf(const Tensor<T>& x_adv, const Tensor<T>& x, double epsilon) {
  require(x_adv.shape == x.shape, ErrorCode::shape,
          "project_linf: shape mismatch " + to_string(x_adv.shape) + " vs " + to_string(x.shape));
  const T eps = static_cast<T>(epsilon);
  Tensor<T> out(x.shape);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T lo = std::max(x[i] - eps, T{0});
    const T hi = std::min(x[i] + eps, T{1});
    out[i] = std::clamp(x_adv[i], lo, hi);
  }
  return out;
}

namespace detail {

template <typename T>
Var<T> attack_objective(const ForwardResult<T>& fwd, std::span<const int> labels, const AttackConfig& cfg,
                        std::optional<Var<T>> natural_logits) {
  const std::size_t s = fwd.aux.size();
  if (uses_cas(cfg.loss))
    require(s > 0, ErrorCode::invalid_argument,
            "attack loss " + std::string(to_string(cfg.loss)) + " needs a model with CAS modules");
  auto aux_sum = [&](auto&& loss_fn) {
    Var<T> total = loss_fn(fwd.aux[0], labels);
    for (std::size_t i = 1; i < s; ++i) total = add(total, loss_fn(fwd.aux[i], labels));
    return total;
  };
  auto ce_fn = [](Var<T> z, std::span<const int> y) { return cross_entropy(z, y); };
  auto cw_fn = [](Var<T> z, std::span<const int> y) { return cw_margin(z, y); };
  switch (cfg.loss) {
    case AttackLoss::ce:
      return cross_entropy(fwd.logits, labels);
    case AttackLoss::cas:
      return scale(aux_sum(ce_fn), static_cast<T>(1.0 / static_cast<double>(s)));
    case AttackLoss::ce_cas: {
      LossConfig lc;
      lc.beta = cfg.beta;
      lc.cas_points = s;
      return combined_loss<T>(fwd.logits, fwd.aux, labels, lc);
    }
    case AttackLoss::cw:
      return cw_margin(fwd.logits, labels);
    case AttackLoss::cw_cas: {
      Var<T> margin = cw_margin(fwd.logits, labels);
      if (cfg.beta == 0.0) return margin;
      return add(margin, scale(aux_sum(cw_fn), static_cast<T>(cfg.beta / static_cast<double>(s))));
    }
    case AttackLoss::trades_kl:
      require(natural_logits.has_value(), ErrorCode::invalid_argument, "TRADES-KL attack needs natural logits");
      return kl_div(*natural_logits, fwd.logits);
  }
  fail(ErrorCode::invalid_argument, "unhandled attack loss");
}

template <typename T>
Tensor<T> natural_logits(const ModelConfig& config, const Parameters<T>& params, const Tensor<T>& x,
                         std::span<const int> labels, Phase phase) {
  Tape<T> tape;
  ForwardOptions opts{phase, labels, false};
  auto fwd = model_forward(tape, tape.borrow(x), params, config, opts);
  return tape.tensor(fwd.logits);
}

}  // namespace detail

/// Gradient of the attack objective w.r.t. the input batch, plus the objective value.
template <std::floating_point T>
std::pair<Tensor<T>, T> input_gradient(const ModelConfig& config, const Parameters<T>& params, const Tensor<T>& x,
                                       std::span<const int> labels, const AttackConfig& cfg,
                                       const Tensor<T>* natural = nullptr) {
  Tensor<T> input = x;
  input.requires_grad = true;
  input.zero_grad();
  Tape<T> tape;
  ForwardOptions opts{cfg.phase, labels, false};
  auto fwd = model_forward(tape, tape.leaf(input), params, config, opts);
  std::optional<Var<T>> nat;
  if (natural != nullptr) nat = tape.borrow(*natural);
  Var<T> loss = detail::attack_objective(fwd, labels, cfg, nat);
  tape.backward(loss);
  Tensor<T> grad(x.shape);
  if (input.grad) grad.data = std::move(*input.grad);
  return {std::move(grad), loss.item()};
}

/// One ascent step: project(x_adv + step * sign(grad)) around `origin`. sign(0) = 0.
template <std::floating_point T>
Tensor<T> signed_step(const Tensor<T>& x_adv, const Tensor<T>& grad, double step, const Tensor<T>& origin,
                      double epsilon) {
  Tensor<T> moved = x_adv;
  const T a = static_cast<T>(step);
  for (std::size_t i = 0; i < moved.size(); ++i) {
    const T g = grad[i];
    moved[i] += g > T{0} ? a : (g < T{0} ? -a : T{0});
  }
  return project_linf(moved, origin, epsilon);
}

/// Uniform start in [-eps, eps] per pixel, projected to the valid range.
template <std::floating_point T>
Tensor<T> random_start(const Tensor<T>& x, double epsilon, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(-epsilon, epsilon);
  Tensor<T> out = x;
  for (T& v : out.data) v += static_cast<T>(dist(rng));
  return project_linf(out, x, epsilon);
}

/// Projected gradient ascent on cfg.loss inside the eps-ball around x.
template <std::floating_point T>
Tensor<T> pgd(const ModelConfig& config, const Parameters<T>& params, const Tensor<T>& x, std::span<const int> labels,
              const AttackConfig& cfg) {
  cfg.validate();
  std::optional<Tensor<T>> natural;
  if (cfg.loss == AttackLoss::trades_kl) natural = detail::natural_logits(config, params, x, labels, cfg.phase);
  Tensor<T> x_adv = cfg.random_start ? random_start(x, cfg.epsilon, cfg.seed) : x;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    auto [grad, _] = input_gradient(config, params, x_adv, labels, cfg, natural ? &*natural : nullptr);
    x_adv = signed_step(x_adv, grad, cfg.step_size, x, cfg.epsilon);
  }
  return x_adv;
}

/// Single signed-gradient step of size eps from the natural input.
template <std::floating_point T>
Tensor<T> fgsm(const ModelConfig& config, const Parameters<T>& params, const Tensor<T>& x, std::span<const int> labels,
               double epsilon, AttackLoss loss = AttackLoss::ce, double beta = 1.0, Phase phase = Phase::test) {
  AttackConfig cfg;
  cfg.epsilon = epsilon;
  cfg.step_size = epsilon;
  cfg.steps = 1;
  cfg.random_start = false;
  cfg.loss = loss;
  cfg.beta = beta;
  cfg.phase = phase;
  cfg.validate();
  std::optional<Tensor<T>> natural;
  if (loss == AttackLoss::trades_kl) natural = detail::natural_logits(config, params, x, labels, phase);
  auto [grad, _] = input_gradient(config, params, x, labels, cfg, natural ? &*natural : nullptr);
  return signed_step(x, grad, epsilon, x, epsilon);
}

/// CW-inf: PGD maximising the logit margin. A cw_cas config keeps its CAS terms.
template <std::floating_point T>
Tensor<T> cw_pgd(const ModelConfig& config, const Parameters<T>& params, const Tensor<T>& x, std::span<const int> labels,
                 AttackConfig cfg) {
  if (cfg.loss != AttackLoss::cw_cas) cfg.loss = AttackLoss::cw;
  return pgd(config, params, x, labels, cfg);
}

/// PGD on CE + beta/S * sum CAS through the test-phase forward pass: every
/// module reweights by its own prediction, recomputed at each step.
template <std::floating_point T>
Tensor<T> adaptive_joint_attack(const ModelConfig& config, const Parameters<T>& params, const Tensor<T>& x,
                                std::span<const int> labels, AttackConfig cfg) {
  require(config.has_cas(), ErrorCode::invalid_argument,
          "adaptive joint attack needs a model with CAS modules; use plain PGD instead");
  cfg.loss = AttackLoss::ce_cas;
  cfg.phase = Phase::test;
  return pgd(config, params, x, labels, cfg);
}

/// Per-example value of the attack objective (each example evaluated alone).
template <std::floating_point T>
std::vector<double> example_objectives(const ModelConfig& config, const Parameters<T>& params, const Tensor<T>& x,
                                       std::span<const int> labels, const AttackConfig& cfg) {
  require(cfg.loss != AttackLoss::trades_kl, ErrorCode::invalid_argument,
          "example_objectives: TRADES-KL depends on the natural input; not supported");
  const std::size_t n = x.dim(0), per = x.size() / n;
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    Shape s = x.shape;
    s[0] = 1;
    Tensor<T> xi(s, std::vector<T>(x.data.begin() + static_cast<std::ptrdiff_t>(i * per),
                                   x.data.begin() + static_cast<std::ptrdiff_t>((i + 1) * per)));
    Tape<T> tape;
    ForwardOptions opts{cfg.phase, labels.subspan(i, 1), false};
    auto fwd = model_forward(tape, tape.borrow(xi), params, config, opts);
    out[i] = static_cast<double>(detail::attack_objective<T>(fwd, labels.subspan(i, 1), cfg, std::nullopt).item());
  }
  return out;
}

}  // namespace cas
