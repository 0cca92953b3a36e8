#pragma once

// Training and attack objectives. Every loss reduces over the batch with a mean.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cas/error.hpp"
#include "cas/ops.hpp"
#include "cas/tape.hpp"

namespace cas {

namespace detail {

template <typename T>
void log_softmax_row(const T* z, std::size_t c, T* out) {
  const T m = *std::max_element(z, z + c);
  T s = 0;
  for (std::size_t j = 0; j < c; ++j) s += std::exp(z[j] - m);
  const T lse = m + std::log(s);
  for (std::size_t j = 0; j < c; ++j) out[j] = z[j] - lse;
}

template <typename T>
std::vector<T> log_softmax_rows(std::span<const T> z, std::size_t n, std::size_t c) {
  std::vector<T> out(n * c);
  for (std::size_t i = 0; i < n; ++i) log_softmax_row(z.data() + i * c, c, out.data() + i * c);
  return out;
}

/// Index of the largest entry other than `skip`; lowest index among ties.
template <typename T>
std::size_t argmax_excluding(const T* row, std::size_t c, std::size_t skip) {
  std::size_t best = skip == 0 ? 1 : 0;
  for (std::size_t j = 0; j < c; ++j)
    if (j != skip && row[j] > row[best]) best = j;
  return best;
}

template <typename T>
void check_logits(Var<T> logits, std::span<const int> labels, std::size_t min_classes, const char* op) {
  require(logits.shape().size() == 2, ErrorCode::shape,
          std::string(op) + ": expected [N,C] logits, got " + to_string(logits.shape()));
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  require(c >= min_classes, ErrorCode::shape, std::string(op) + ": needs at least " + std::to_string(min_classes) + " classes");
  require(labels.size() == n, ErrorCode::shape,
          std::string(op) + ": " + std::to_string(labels.size()) + " labels for " + std::to_string(n) + " rows");
  for (int y : labels)
    require(y >= 0 && static_cast<std::size_t>(y) < c, ErrorCode::invalid_argument,
            std::string(op) + ": label " + std::to_string(y) + " outside [0," + std::to_string(c) + ")");
}

inline constexpr double kLogClamp = 1e-12;

}  // namespace detail

/// Mean over the batch of -log softmax(logits)[n, y_n].
template <std::floating_point T>
Var<T> cross_entropy(Var<T> logits, std::span<const int> labels) {
  detail::check_logits(logits, labels, 1, "cross_entropy");
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  auto lp = detail::log_softmax_rows(logits.value(), n, c);
  T total = 0;
  for (std::size_t i = 0; i < n; ++i) total -= lp[i * c + static_cast<std::size_t>(labels[i])];
  const T inv = T{1} / static_cast<T>(n);
  return logits.tape->record(
      Shape{}, {total * inv}, {logits},
      [logits, n, c, inv, lp = std::move(lp), y = std::vector<int>(labels.begin(), labels.end())](
          Tape<T>& tape, std::span<const T> g) {
        auto gz = tape.grad_of(logits);
        const T s = g[0] * inv;
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < c; ++j) {
            const T p = std::exp(lp[i * c + j]);
            gz[i * c + j] += s * (p - (j == static_cast<std::size_t>(y[i]) ? T{1} : T{0}));
          }
      });
}

/// Cross-entropy of the auxiliary classifier: softmax over gap(f) * M.
template <std::floating_point T>
Var<T> cas_loss(Var<T> aux_logits, std::span<const int> labels) {
  return cross_entropy(aux_logits, labels);
}

/// Per-row KL(softmax(p) || softmax(q)) -> [N].
template <std::floating_point T>
Var<T> kl_rows(Var<T> p_logits, Var<T> q_logits) {
  detail::require_same_shape(p_logits.shape(), q_logits.shape(), "kl_div");
  detail::require_rank(p_logits.shape(), 2, "kl_div");
  const std::size_t n = p_logits.dim(0), c = p_logits.dim(1);
  auto lp = detail::log_softmax_rows(p_logits.value(), n, c);
  auto lq = detail::log_softmax_rows(q_logits.value(), n, c);
  std::vector<T> out(n, T{0});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i] += std::exp(lp[i * c + j]) * (lp[i * c + j] - lq[i * c + j]);
  std::vector<T> kl = out;
  return p_logits.tape->record(
      Shape{n}, std::move(out), {p_logits, q_logits},
      [p_logits, q_logits, n, c, lp = std::move(lp), lq = std::move(lq), kl = std::move(kl)](Tape<T>& tape,
                                                                                              std::span<const T> g) {
        if (tape.needs_grad(p_logits)) {
          auto gp = tape.grad_of(p_logits);
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < c; ++j) {
              const std::size_t k = i * c + j;
              gp[k] += g[i] * std::exp(lp[k]) * ((lp[k] - lq[k]) - kl[i]);
            }
        }
        if (tape.needs_grad(q_logits)) {
          auto gq = tape.grad_of(q_logits);
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < c; ++j) {
              const std::size_t k = i * c + j;
              gq[k] += g[i] * (std::exp(lq[k]) - std::exp(lp[k]));
            }
        }
      });
}

/// Mean over the batch of KL(softmax(p) || softmax(q)).
template <std::floating_point T>
Var<T> kl_div(Var<T> p_logits, Var<T> q_logits) {
  return mean(kl_rows(p_logits, q_logits));
}

/// softmax(logits)[n, y_n] -> [N].
template <std::floating_point T>
Var<T> prob_at(Var<T> logits, std::span<const int> labels) {
  detail::check_logits(logits, labels, 1, "prob_at");
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  auto lp = detail::log_softmax_rows(logits.value(), n, c);
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = std::exp(lp[i * c + static_cast<std::size_t>(labels[i])]);
  return logits.tape->record(
      Shape{n}, std::move(out), {logits},
      [logits, n, c, lp = std::move(lp), y = std::vector<int>(labels.begin(), labels.end())](Tape<T>& tape,
                                                                                          std::span<const T> g) {
        auto gz = tape.grad_of(logits);
        for (std::size_t i = 0; i < n; ++i) {
          const std::size_t yi = static_cast<std::size_t>(y[i]);
          const T py = std::exp(lp[i * c + yi]);
          for (std::size_t j = 0; j < c; ++j)
            gz[i * c + j] += g[i] * py * ((j == yi ? T{1} : T{0}) - std::exp(lp[i * c + j]));
        }
      });
}

/// Boosted cross-entropy: mean of -log p_y - log(1 - max_{k != y} p_k).
/// The wrong-class max is a hard selection; the inner log argument is clamped at 1e-12.
template <std::floating_point T>
Var<T> bce_mart(Var<T> logits, std::span<const int> labels) {
  detail::check_logits(logits, labels, 2, "bce_mart");
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  auto lp = detail::log_softmax_rows(logits.value(), n, c);
  std::vector<std::size_t> runner(n);
  std::vector<bool> clamped(n);
  T total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t yi = static_cast<std::size_t>(labels[i]);
    runner[i] = detail::argmax_excluding(lp.data() + i * c, c, yi);
    const T u = T{1} - std::exp(lp[i * c + runner[i]]);
    clamped[i] = u < static_cast<T>(detail::kLogClamp);
    total += -lp[i * c + yi] - std::log(clamped[i] ? static_cast<T>(detail::kLogClamp) : u);
  }
  const T inv = T{1} / static_cast<T>(n);
  return logits.tape->record(
      Shape{}, {total * inv}, {logits},
      [logits, n, c, inv, lp = std::move(lp), runner = std::move(runner), clamped = std::move(clamped),
       y = std::vector<int>(labels.begin(), labels.end())](Tape<T>& tape, std::span<const T> g) {
        auto gz = tape.grad_of(logits);
        const T s = g[0] * inv;
        for (std::size_t i = 0; i < n; ++i) {
          const std::size_t yi = static_cast<std::size_t>(y[i]), m = runner[i];
          const T pm = std::exp(lp[i * c + m]);
          const T boost = clamped[i] ? T{0} : pm / (T{1} - pm);
          for (std::size_t j = 0; j < c; ++j) {
            const T pj = std::exp(lp[i * c + j]);
            T d = pj - (j == yi ? T{1} : T{0});
            d += boost * ((j == m ? T{1} : T{0}) - pj);
            gz[i * c + j] += s * d;
          }
        }
      });
}

/// Carlini-Wagner margin with zero confidence: mean of max_{k != y} z_k - z_y.
template <std::floating_point T>
Var<T> cw_margin(Var<T> logits, std::span<const int> labels) {
  detail::check_logits(logits, labels, 2, "cw_margin");
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  auto z = logits.value();
  std::vector<std::size_t> runner(n);
  T total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t yi = static_cast<std::size_t>(labels[i]);
    runner[i] = detail::argmax_excluding(z.data() + i * c, c, yi);
    total += z[i * c + runner[i]] - z[i * c + yi];
  }
  const T inv = T{1} / static_cast<T>(n);
  return logits.tape->record(
      Shape{}, {total * inv}, {logits},
      [logits, c, inv, runner = std::move(runner), y = std::vector<int>(labels.begin(), labels.end())](
          Tape<T>& tape, std::span<const T> g) {
        auto gz = tape.grad_of(logits);
        for (std::size_t i = 0; i < runner.size(); ++i) {
          gz[i * c + runner[i]] += g[0] * inv;
          gz[i * c + static_cast<std::size_t>(y[i])] -= g[0] * inv;
        }
      });
}

// ---------------------------------------------------------------------------
// Defense objectives, with and without CAS terms.

enum class Variant { at, trades, mart };

constexpr std::string_view to_string(Variant v) noexcept {
  switch (v) {
    case Variant::at: return "AT";
    case Variant::trades: return "TRADES";
    case Variant::mart: return "MART";
  }
  return "?";
}

inline Variant parse_variant(std::string_view name) {
  if (name == "AT" || name == "at") return Variant::at;
  if (name == "TRADES" || name == "trades") return Variant::trades;
  if (name == "MART" || name == "mart") return Variant::mart;
  fail(ErrorCode::config, "unknown loss variant '" + std::string(name) + "' (expected AT, TRADES or MART)");
}

struct LossConfig {
  Variant variant = Variant::at;
  double beta = 1.0;    // CAS strength
  double lambda = 6.0;  // TRADES / MART trade-off
  std::size_t cas_points = 0;
};

namespace detail {

template <typename T>
void check_aux(std::span<const Var<T>> aux, const LossConfig& cfg, const char* op) {
  require(aux.size() == cfg.cas_points, ErrorCode::shape,
          std::string(op) + ": got " + std::to_string(aux.size()) + " auxiliary outputs for " +
              std::to_string(cfg.cas_points) + " CAS points");
}

}  // namespace detail

/// CE(logits, y) + beta/S * sum_s CAS(aux_s, y).
template <std::floating_point T>
Var<T> combined_loss(Var<T> logits, std::span<const Var<T>> aux, std::span<const int> labels, const LossConfig& cfg) {
  detail::check_aux(aux, cfg, "combined_loss");
  Var<T> loss = cross_entropy(logits, labels);
  if (cfg.beta == 0.0 || aux.empty()) return loss;
  Var<T> cas_total = cas_loss(aux[0], labels);
  for (std::size_t s = 1; s < aux.size(); ++s) cas_total = add(cas_total, cas_loss(aux[s], labels));
  return add(loss, scale(cas_total, static_cast<T>(cfg.beta / static_cast<double>(aux.size()))));
}

/// TRADES with CAS terms:
/// CE(nat) + lambda*KL(nat||adv) + beta/S sum CE(nat_aux) + beta*lambda/S sum KL(nat_aux||adv_aux).
template <std::floating_point T>
Var<T> trades_cas_loss(Var<T> nat_logits, Var<T> adv_logits, std::span<const Var<T>> nat_aux,
                       std::span<const Var<T>> adv_aux, std::span<const int> labels, const LossConfig& cfg) {
  detail::check_aux(nat_aux, cfg, "trades_cas_loss");
  detail::check_aux(adv_aux, cfg, "trades_cas_loss");
  const T lambda = static_cast<T>(cfg.lambda);
  Var<T> loss = add(cross_entropy(nat_logits, labels), scale(kl_div(nat_logits, adv_logits), lambda));
  if (cfg.beta == 0.0 || nat_aux.empty()) return loss;
  const T per_point = static_cast<T>(cfg.beta / static_cast<double>(nat_aux.size()));
  for (std::size_t s = 0; s < nat_aux.size(); ++s) {
    loss = add(loss, scale(cross_entropy(nat_aux[s], labels), per_point));
    loss = add(loss, scale(kl_div(nat_aux[s], adv_aux[s]), per_point * lambda));
  }
  return loss;
}

/// MART with CAS terms. The (1 - p_y(nat)) weights multiply each example's KL
/// before the batch mean.
template <std::floating_point T>
Var<T> mart_cas_loss(Var<T> nat_logits, Var<T> adv_logits, std::span<const Var<T>> nat_aux,
                     std::span<const Var<T>> adv_aux, std::span<const int> labels, const LossConfig& cfg) {
  detail::check_aux(nat_aux, cfg, "mart_cas_loss");
  detail::check_aux(adv_aux, cfg, "mart_cas_loss");
  auto weighted_kl = [&](Var<T> nat, Var<T> adv) {
    Var<T> confidence_gap = add_scalar(neg(prob_at(nat, labels)), T{1});
    return mean(mul(kl_rows(nat, adv), confidence_gap));
  };
  const T lambda = static_cast<T>(cfg.lambda);
  Var<T> loss = add(bce_mart(adv_logits, labels), scale(weighted_kl(nat_logits, adv_logits), lambda));
  if (cfg.beta == 0.0 || nat_aux.empty()) return loss;
  const T per_point = static_cast<T>(cfg.beta / static_cast<double>(nat_aux.size()));
  for (std::size_t s = 0; s < nat_aux.size(); ++s) {
    loss = add(loss, scale(bce_mart(adv_aux[s], labels), per_point));
    loss = add(loss, scale(weighted_kl(nat_aux[s], adv_aux[s]), per_point * lambda));
  }
  return loss;
}

}  // namespace cas
