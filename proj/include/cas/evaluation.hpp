#pragma once

// Robust-accuracy harness: natural accuracy and accuracy under FGSM, PGD,
// CW-inf and the adaptive joint attack, with one CSV row per (attack, eps).

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <locale>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "cas/attacks.hpp"
#include "cas/datasets.hpp"
#include "cas/error.hpp"
#include "cas/model.hpp"

namespace cas {

enum class AttackKind { none, fgsm, pgd, cw, joint };

constexpr std::string_view to_string(AttackKind k) noexcept {
  switch (k) {
    case AttackKind::none: return "none";
    case AttackKind::fgsm: return "fgsm";
    case AttackKind::pgd: return "pgd";
    case AttackKind::cw: return "cw";
    case AttackKind::joint: return "joint";
  }
  return "?";
}

inline AttackKind parse_attack_kind(std::string_view name) {
  for (AttackKind k : {AttackKind::none, AttackKind::fgsm, AttackKind::pgd, AttackKind::cw, AttackKind::joint})
    if (to_string(k) == name) return k;
  fail(ErrorCode::unknown_attack, "unknown attack '" + std::string(name) + "' (valid: none, fgsm, pgd, cw, joint)");
}

/// Splitmix64-style mixing of a run seed with stream/epoch/batch counters.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t a = 0, std::uint64_t b = 0) {
  std::uint64_t z = seed;
  for (std::uint64_t v : {stream, a, b}) {
    z += 0x9e3779b97f4a7c15ULL + v;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    z ^= z >> 31;
  }
  return z;
}

struct EvalAttack {
  AttackKind kind = AttackKind::pgd;
  double epsilon = 0.1;
  double step_size = 0.01;
  std::size_t steps = 20;
  bool random_start = true;
  bool adaptive = true;  // CAS models: include the CAS terms in the objective
  double beta = 1.0;
  std::uint64_t seed = 0;
};

/// PGD-20 with step eps/10, the default robustness evaluation.
inline EvalAttack pgd20(double epsilon, std::uint64_t seed = 0) {
  return EvalAttack{AttackKind::pgd, epsilon, epsilon / 10.0, 20, true, true, 1.0, seed};
}

/// Name of the objective an attack maximises against `config`.
inline std::string attack_objective_name(const ModelConfig& config, const EvalAttack& a) {
  const bool cas_terms = a.adaptive && config.has_cas();
  switch (a.kind) {
    case AttackKind::none: return "none";
    case AttackKind::fgsm:
    case AttackKind::pgd: return cas_terms ? "CE+CAS" : "CE";
    case AttackKind::cw: return cas_terms ? "CW+CAS" : "CW";
    case AttackKind::joint: return "CE+CAS";
  }
  return "?";
}

/// Adversarial version of one batch. Attacks run against the test-phase forward pass.
template <std::floating_point T>
Tensor<T> attack_batch(const ModelConfig& config, const Parameters<T>& params, const Tensor<T>& x,
                       std::span<const int> labels, const EvalAttack& a, std::uint64_t seed) {
  const bool cas_terms = a.adaptive && config.has_cas();
  AttackConfig cfg;
  cfg.epsilon = a.epsilon;
  cfg.step_size = a.step_size;
  cfg.steps = std::max<std::size_t>(a.steps, 1);
  cfg.random_start = a.random_start;
  cfg.beta = a.beta;
  cfg.seed = seed;
  cfg.phase = Phase::test;
  switch (a.kind) {
    case AttackKind::none:
      return x;
    case AttackKind::fgsm:
      return fgsm(config, params, x, labels, a.epsilon, cas_terms ? AttackLoss::ce_cas : AttackLoss::ce, a.beta);
    case AttackKind::pgd:
      cfg.loss = cas_terms ? AttackLoss::ce_cas : AttackLoss::ce;
      return pgd(config, params, x, labels, cfg);
    case AttackKind::cw:
      cfg.loss = cas_terms ? AttackLoss::cw_cas : AttackLoss::cw;
      return cw_pgd(config, params, x, labels, cfg);
    case AttackKind::joint:
      return adaptive_joint_attack(config, params, x, labels, cfg);
  }
  fail(ErrorCode::invalid_argument, "unhandled attack kind");
}

struct EvalRow {
  std::string attack;
  double epsilon = 0.0;
  std::size_t steps = 0;
  std::string objective;
  std::size_t correct = 0;
  std::size_t total = 0;

  double accuracy() const noexcept { return total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total); }
  double accuracy_pct() const noexcept { return 100.0 * accuracy(); }
};

/// Counts test-phase predictions that stay correct under the attack.
template <std::floating_point T>
EvalRow evaluate(const ModelConfig& config, const Parameters<T>& params, const Tensor<T>& images,
                 std::span<const int> labels, const EvalAttack& a, std::size_t batch = 128) {
  require(images.rank() == 4 && images.dim(0) == labels.size() && !labels.empty(), ErrorCode::shape,
          "evaluate: images and labels disagree on the example count");
  EvalRow row{std::string(to_string(a.kind)), a.kind == AttackKind::none ? 0.0 : a.epsilon,
              a.kind == AttackKind::none ? 0 : (a.kind == AttackKind::fgsm ? 1 : a.steps),
              attack_objective_name(config, a), 0, labels.size()};
  const std::size_t n = labels.size();
  for (std::size_t start = 0, b = 0; start < n; start += batch, ++b) {
    const std::size_t count = std::min(batch, n - start);
    Tensor<T> x = slice_rows(images, start, count);
    auto y = labels.subspan(start, count);
    Tensor<T> adv = attack_batch(config, params, x, y, a, derive_seed(a.seed, 0, b));
    auto pred = predict(config, params, adv, count);
    for (std::size_t i = 0; i < count; ++i) row.correct += pred[i] == y[i] ? 1 : 0;
  }
  return row;
}

inline EvalRow evaluate(const ModelConfig& config, const Parameters<float>& params, const Dataset& ds,
                        const EvalAttack& a, std::size_t batch = 128) {
  return evaluate<float>(config, params, ds.images, ds.labels, a, batch);
}

inline void write_report_csv(std::ostream& out, std::span<const EvalRow> rows) {
  std::ostringstream s;
  s.imbue(std::locale::classic());
  s.precision(10);
  s << "attack,epsilon,steps,objective,correct,total,accuracy_pct\n";
  for (const auto& r : rows)
    s << r.attack << ',' << r.epsilon << ',' << r.steps << ',' << r.objective << ',' << r.correct << ',' << r.total << ','
      << r.accuracy_pct() << '\n';
  out << s.str();
}

}  // namespace cas
