#pragma once

// Adversarial training loop: per batch, craft x' with the attack matching the
// loss variant, evaluate the variant objective and take one SGD-momentum step
// on all parameters (network and CAS matrices) jointly.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <locale>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "cas/attacks.hpp"
#include "cas/checkpoint.hpp"
#include "cas/config.hpp"
#include "cas/datasets.hpp"
#include "cas/evaluation.hpp"
#include "cas/model.hpp"
#include "cas/objectives.hpp"

namespace cas {

struct EpochMetrics {
  std::size_t epoch = 0;
  double lr = 0.0;
  double train_loss = std::numeric_limits<double>::quiet_NaN();
  double nat_acc = 0.0;
  double pgd_acc = 0.0;
};

/// Learning rate of 1-based epoch e: divided by the drop factor once for every
/// drop epoch d < e.
inline double learning_rate(const OptimizerConfig& o, std::size_t epoch) {
  double lr = o.lr;
  for (std::size_t d : o.lr_drop_epochs)
    if (epoch > d) lr /= o.lr_drop_factor;
  return lr;
}

/// SGD with momentum and L2 weight decay: v = mu v + (g + wd p); p -= lr v.
class Sgd {
 public:
  void step(Parameters<float>& params, double lr, double momentum, double weight_decay) {
    for (auto& [name, p] : params) {
      if (!p.grad) continue;
      auto& v = velocity_[name];
      if (v.empty()) v.assign(p.size(), 0.0f);
      const auto& g = *p.grad;
      const float mu = static_cast<float>(momentum), wd = static_cast<float>(weight_decay), a = static_cast<float>(lr);
      for (std::size_t i = 0; i < p.size(); ++i) {
        v[i] = mu * v[i] + (g[i] + wd * p.data[i]);
        p.data[i] -= a * v[i];
      }
    }
  }

 private:
  std::map<std::string, std::vector<float>> velocity_;
};

/// Seed streams derived from the experiment seed.
enum SeedStream : std::uint64_t { shuffle_stream = 1, train_attack_stream = 2, eval_attack_stream = 3 };

/// Attack used to craft training examples: CE+CAS for AT (CE when the model has
/// no CAS module), TRADES-KL for TRADES, CE for MART. Runs in train phase.
inline AttackConfig training_attack(const ExperimentConfig& cfg, std::size_t epoch, std::size_t batch) {
  AttackConfig a = cfg.train_attack;
  switch (cfg.loss.variant) {
    case Variant::at: a.loss = cfg.model.has_cas() ? AttackLoss::ce_cas : AttackLoss::ce; break;
    case Variant::trades: a.loss = AttackLoss::trades_kl; break;
    case Variant::mart: a.loss = AttackLoss::ce; break;
  }
  a.beta = cfg.loss.beta;
  a.phase = Phase::train;
  a.seed = derive_seed(cfg.seed, train_attack_stream, epoch, batch);
  return a;
}

/// Held-out robustness check used for metrics and best-checkpoint selection:
/// the training budget, with the adaptive objective on CAS models.
inline EvalAttack heldout_attack(const ExperimentConfig& cfg, std::size_t epoch) {
  const auto& t = cfg.train_attack;
  return EvalAttack{AttackKind::pgd, t.epsilon, t.step_size, t.steps, t.random_start, true, cfg.loss.beta,
                    derive_seed(cfg.seed, eval_attack_stream, epoch)};
}

inline BatchPlan training_plan(const ExperimentConfig& cfg) {
  BatchPlan plan;
  plan.batch_size = cfg.data.batch_size;
  plan.shuffle_seed = derive_seed(cfg.seed, shuffle_stream);
  return plan;
}

/// Training objective of one batch on `tape`; parameters become leaves.
inline Var<float> batch_objective(Tape<float>& tape, const ExperimentConfig& cfg, Parameters<float>& params,
                                  const Batch& batch, std::size_t epoch, std::size_t batch_index) {
  std::span<const int> y = batch.labels;
  const ForwardOptions opts{Phase::train, y, false};
  LossConfig lc = cfg.loss;
  lc.cas_points = cfg.model.cas_points.size();
  if (!cfg.adversarial) {
    auto fwd = model_forward(tape, tape.borrow(batch.images), params, cfg.model, opts);
    return combined_loss<float>(fwd.logits, fwd.aux, y, lc);
  }
  const Parameters<float>& frozen = params;
  Tensor<float> x_adv = pgd(cfg.model, frozen, batch.images, y, training_attack(cfg, epoch, batch_index));
  Var<float> xa = tape.constant(std::move(x_adv));
  auto adv = model_forward(tape, xa, params, cfg.model, opts);
  if (cfg.loss.variant == Variant::at) return combined_loss<float>(adv.logits, adv.aux, y, lc);
  auto nat = model_forward(tape, tape.borrow(batch.images), params, cfg.model, opts);
  if (cfg.loss.variant == Variant::trades)
    return trades_cas_loss<float>(nat.logits, adv.logits, nat.aux, adv.aux, y, lc);
  return mart_cas_loss<float>(nat.logits, adv.logits, nat.aux, adv.aux, y, lc);
}

struct TrainData {
  Dataset train;
  Dataset heldout;
};

/// Loads both splits and applies the class-balanced subset plan.
inline TrainData load_train_data(const ExperimentConfig& cfg) {
  check_paths(cfg);
  Dataset train = load_split(cfg.data, true);
  Dataset test = load_split(cfg.data, false);
  train.num_classes = test.num_classes = cfg.model.num_classes;
  auto ti = per_class_indices(train, cfg.data.train_per_class);
  auto hi = per_class_indices(test, cfg.data.test_per_class);
  return {take(train, ti), take(test, hi)};
}

struct TrainResult {
  std::vector<EpochMetrics> metrics;
  Parameters<float> last;
  Parameters<float> best;
  std::size_t best_epoch = 0;
};

inline std::string format_metrics_row(const EpochMetrics& m) {
  std::ostringstream s;
  s.imbue(std::locale::classic());
  s.precision(10);
  s << m.epoch << ',' << m.lr << ',';
  if (std::isnan(m.train_loss))
    s << "nan";
  else
    s << m.train_loss;
  s << ',' << m.nat_acc << ',' << m.pgd_acc << '\n';
  return s.str();
}

inline constexpr const char* kMetricsHeader = "epoch,lr,train_loss,nat_acc,pgd_acc\n";

/// Runs the configured schedule. Writes init.ckpt, last.ckpt (every epoch),
/// best.ckpt (highest held-out PGD accuracy, earliest on ties) and metrics.csv
/// into cfg.output_dir. Row 0 of the metrics describes the initial parameters.
inline TrainResult train(const ExperimentConfig& cfg, const Dataset& train_set, const Dataset& heldout,
                         std::ostream* progress = nullptr) {
  cfg.validate();
  const std::filesystem::path out_dir = cfg.output_dir;
  std::filesystem::create_directories(out_dir);
  std::ofstream metrics_file(out_dir / "metrics.csv", std::ios::trunc);
  require(static_cast<bool>(metrics_file), ErrorCode::io, "cannot write metrics log in '" + out_dir.string() + "'");
  metrics_file << kMetricsHeader;

  Parameters<float> params = init_params<float>(cfg.model, cfg.seed);
  save_checkpoint(out_dir / "init.ckpt", make_checkpoint(cfg, 0, params));

  const BatchPlan plan = training_plan(cfg);
  Sgd opt;
  TrainResult result;
  double best_acc = -1.0;

  for (std::size_t epoch = 0; epoch <= cfg.optimizer.epochs; ++epoch) {
    EpochMetrics m;
    m.epoch = epoch;
    m.lr = learning_rate(cfg.optimizer, std::max<std::size_t>(epoch, 1));
    if (epoch > 0 || cfg.log_initial_loss) {
      double total = 0.0;
      std::size_t seen = 0, b = 0;
      for (const auto& idx : epoch_batches(train_set, plan, epoch)) {
        Batch batch = gather(train_set, idx);
        Tape<float> tape;
        Var<float> loss = batch_objective(tape, cfg, params, batch, epoch, b++);
        total += static_cast<double>(loss.item()) * static_cast<double>(idx.size());
        seen += idx.size();
        if (epoch == 0) continue;
        zero_grads(params);
        tape.backward(loss);
        opt.step(params, m.lr, cfg.optimizer.momentum, cfg.optimizer.weight_decay);
      }
      m.train_loss = total / static_cast<double>(seen);
    }
    m.nat_acc = evaluate(cfg.model, params, heldout, EvalAttack{AttackKind::none}).accuracy();
    m.pgd_acc = evaluate(cfg.model, params, heldout, heldout_attack(cfg, epoch)).accuracy();
    result.metrics.push_back(m);
    metrics_file << format_metrics_row(m);
    metrics_file.flush();

    const auto ckpt = make_checkpoint(cfg, static_cast<std::uint32_t>(epoch), params);
    save_checkpoint(out_dir / "last.ckpt", ckpt);
    if (m.pgd_acc > best_acc) {
      best_acc = m.pgd_acc;
      result.best_epoch = epoch;
      result.best = ckpt.params;
      save_checkpoint(out_dir / "best.ckpt", ckpt);
    }
    if (progress) *progress << format_metrics_row(m) << std::flush;
  }
  require(static_cast<bool>(metrics_file), ErrorCode::io, "error writing metrics log");
  result.last = std::move(params);
  return result;
}

}  // namespace cas
