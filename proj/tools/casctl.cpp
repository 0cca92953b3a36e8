// casctl: train, evaluate and inspect CAS models from the command line.
//
//   casctl train --config run.json [--seed N] [--beta R] [--out DIR]
//   casctl eval --checkpoint best.ckpt [--attack pgd --attack fgsm ...] [--eps R ...]
//   casctl analyze --checkpoint last.ckpt --class 3 [--threshold 0.01 ...]
//   casctl export-features --checkpoint last.ckpt --out features.csv
//   casctl grad-check [--seed N]
//
// Failures print "error: <category>: <message>" on stderr and exit with a
// category-specific code.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <locale>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cas/cas.hpp"

namespace fs = std::filesystem;
using namespace cas;

namespace {

struct Options {
  std::string config;
  std::string checkpoint;
  std::vector<std::string> attacks;
  std::vector<double> eps;
  std::optional<double> alpha;
  std::optional<std::size_t> steps;
  std::optional<double> beta;
  int class_id = -1;
  std::vector<double> thresholds;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<std::size_t> layer;
  bool raw = false;
};

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::trunc);
  require(static_cast<bool>(f), ErrorCode::io, "cannot write '" + path.string() + "'");
  f << text;
  require(static_cast<bool>(f), ErrorCode::io, "error writing '" + path.string() + "'");
}

/// Checkpoint plus the experiment it belongs to; --config replaces the dataset section.
struct Loaded {
  Checkpoint ckpt;
  ExperimentConfig cfg;
};

Loaded load_model(const Options& o) {
  require(!o.checkpoint.empty(), ErrorCode::invalid_argument, "--checkpoint is required");
  Loaded l{load_checkpoint(o.checkpoint), {}};
  l.cfg = config_from_text(l.ckpt.config_text);
  if (!o.config.empty()) l.cfg.data = load_config(o.config).data;
  return l;
}

Dataset heldout_set(const ExperimentConfig& cfg) {
  check_paths(cfg);
  Dataset test = load_split(cfg.data, false);
  test.num_classes = cfg.model.num_classes;
  return take(test, per_class_indices(test, cfg.data.test_per_class));
}

EvalAttack make_attack(const Options& o, const ExperimentConfig& cfg, AttackKind kind, double eps) {
  EvalAttack a;
  a.kind = kind;
  a.epsilon = eps;
  a.step_size = o.alpha.value_or(eps / 10.0);
  a.steps = o.steps.value_or(20);
  a.beta = o.beta.value_or(cfg.loss.beta);
  a.seed = o.seed.value_or(cfg.seed);
  return a;
}

int cmd_train(const Options& o) {
  require(!o.config.empty(), ErrorCode::invalid_argument, "--config is required");
  ExperimentConfig cfg = load_config(o.config);
  if (o.seed) cfg.seed = *o.seed;
  if (o.beta) cfg.loss.beta = *o.beta;
  if (!o.out.empty()) cfg.output_dir = o.out;
  cfg.validate();
  TrainData data = load_train_data(cfg);
  std::cout << kMetricsHeader;
  TrainResult r = train(cfg, data.train, data.heldout, &std::cout);
  std::cout << "best epoch " << r.best_epoch << ", checkpoints in " << cfg.output_dir << "\n";
  return 0;
}

int cmd_eval(const Options& o) {
  Loaded l = load_model(o);
  Dataset test = heldout_set(l.cfg);
  std::vector<std::string> names = o.attacks.empty() ? std::vector<std::string>{"pgd"} : o.attacks;
  std::vector<AttackKind> kinds;
  for (const auto& n : names) kinds.push_back(parse_attack_kind(n));
  std::vector<double> eps = o.eps.empty() ? std::vector<double>{l.cfg.train_attack.epsilon} : o.eps;
  std::vector<EvalRow> rows{evaluate(l.cfg.model, l.ckpt.params, test, EvalAttack{AttackKind::none})};
  for (AttackKind k : kinds) {
    if (k == AttackKind::none) continue;
    for (double e : eps) rows.push_back(evaluate(l.cfg.model, l.ckpt.params, test, make_attack(o, l.cfg, k, e)));
  }
  std::ostringstream csv;
  write_report_csv(csv, rows);
  std::cout << csv.str();
  if (!o.out.empty()) write_file(fs::path(o.out) / "report.csv", csv.str());
  return 0;
}

std::string threshold_tag(double t) {
  std::ostringstream s;
  s.imbue(std::locale::classic());
  s << t;
  return s.str();
}

int cmd_analyze(const Options& o) {
  Loaded l = load_model(o);
  const auto& model = l.cfg.model;
  require(o.class_id >= 0 && static_cast<std::size_t>(o.class_id) < model.num_classes, ErrorCode::invalid_argument,
          "--class must lie in [0, " + std::to_string(model.num_classes) + ")");
  Dataset test = heldout_set(l.cfg);
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < test.size(); ++i)
    if (test.labels[i] == o.class_id) idx.push_back(i);
  Dataset cls = take(test, idx);

  const AttackKind kind = parse_attack_kind(o.attacks.empty() ? "pgd" : o.attacks.front());
  const double eps = o.eps.empty() ? l.cfg.train_attack.epsilon : o.eps.front();
  const EvalAttack attack = make_attack(o, l.cfg, kind, eps);
  Tensor<float> adv(cls.images.shape);
  for (std::size_t start = 0, b = 0; start < cls.size(); start += 128, ++b) {
    const std::size_t count = std::min<std::size_t>(128, cls.size() - start);
    Tensor<float> x = slice_rows(cls.images, start, count);
    Tensor<float> xa = attack_batch(model, l.ckpt.params, x, std::span<const int>(cls.labels).subspan(start, count),
                                    attack, derive_seed(attack.seed, 0, b));
    std::copy(xa.data.begin(), xa.data.end(), adv.data.begin() + static_cast<std::ptrdiff_t>(start * (x.size() / count)));
  }

  const std::size_t layer = o.layer.value_or(model.penultimate_layer());
  const FeatureSource source = (o.raw || !model.has_cas()) ? FeatureSource::raw : FeatureSource::reweighted;
  auto nat = collect_pooled(model, l.ckpt.params, cls.images, cls.labels, layer, source);
  auto adv_pooled = collect_pooled(model, l.ckpt.params, adv, cls.labels, layer, source);

  const fs::path out = o.out.empty() ? fs::path("analysis") : fs::path(o.out);
  {
    auto rows = compare_profiles(magnitude_profile(nat, o.class_id), magnitude_profile(adv_pooled, o.class_id),
                                 SortKey::nat_magnitude);
    std::ostringstream csv;
    write_comparison_csv(csv, rows);
    write_file(out / "magnitude.csv", csv.str());
  }
  std::ostringstream summary;
  summary.imbue(std::locale::classic());
  summary.precision(10);
  summary << "threshold,population,uniformity\n";
  const std::vector<double> thresholds = o.thresholds.empty() ? std::vector<double>{0.005, 0.01, 0.05} : o.thresholds;
  for (double t : thresholds) {
    auto pn = frequency_profile(nat, t, o.class_id);
    auto pa = frequency_profile(adv_pooled, t, o.class_id);
    auto rows = compare_profiles(pn, pa);
    std::ostringstream csv;
    write_comparison_csv(csv, rows);
    write_file(out / ("frequency_" + threshold_tag(t) + ".csv"), csv.str());
    summary << t << ",natural," << uniformity(pn) << "\n" << t << ",adversarial," << uniformity(pa) << "\n";
  }
  write_file(out / "uniformity.csv", summary.str());
  std::cout << "layer " << layer << ", class " << o.class_id << ", " << cls.size() << " examples, attack "
            << to_string(kind) << " eps " << eps << "\n"
            << summary.str();
  return 0;
}

int cmd_export_features(const Options& o) {
  Loaded l = load_model(o);
  Dataset test = heldout_set(l.cfg);
  const std::size_t layer = o.layer.value_or(l.cfg.model.penultimate_layer());
  auto table = export_features(l.cfg.model, l.ckpt.params, test.images, test.labels, layer);
  std::ostringstream csv;
  write_features_csv(csv, table);
  const fs::path out = o.out.empty() ? fs::path("features.csv") : fs::path(o.out);
  write_file(out, csv.str());
  std::cout << "wrote " << table.pooled.rows() << " rows x " << table.pooled.channels << " features to " << out.string()
            << "\n";
  return 0;
}

/// Finite-difference check of the full SmallConvNet+CAS training objective at
/// double precision on a small random batch, over every parameter tensor.
int cmd_grad_check(const Options& o) {
  const std::uint64_t seed = o.seed.value_or(0);
  const ModelConfig model = small_conv_net({1, 12, 12}, 4, true);
  auto params = init_params<double>(model, seed);
  std::mt19937_64 rng(seed + 1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Tensor<double> x(Shape{2, 1, 12, 12});
  for (double& v : x.data) v = u(rng);
  const std::vector<int> y{static_cast<int>(rng() % 4), static_cast<int>(rng() % 4)};
  const LossConfig lc{Variant::at, o.beta.value_or(1.0), 6.0, 1};
  auto objective = [&](Tape<double>& tape, Parameters<double>& p) {
    ForwardOptions opts{Phase::train, y, false};
    auto fwd = model_forward(tape, tape.borrow(x), p, model, opts);
    return combined_loss<double>(fwd.logits, fwd.aux, y, lc);
  };
  const double err = parameter_grad_check<double>(params, objective, 1e-5, 64, seed);
  std::cout << "max relative error " << err << (err < 1e-4 ? " (ok)" : " (FAILED)") << "\n";
  return err < 1e-4 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Channel-wise activation suppressing: adversarial training and analysis"};
  app.require_subcommand(1);
  Options o;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "Experiment config (JSON)");
    sub->add_option("--seed", o.seed, "Seed override");
    sub->add_option("--out", o.out, "Output directory or file");
    sub->add_option("--beta", o.beta, "CAS strength override");
  };
  auto add_attack = [&](CLI::App* sub) {
    sub->add_option("--attack", o.attacks, "Attack: none, fgsm, pgd, cw, joint (repeatable)");
    sub->add_option("--eps", o.eps, "Perturbation budget (repeatable)");
    sub->add_option("--alpha", o.alpha, "Step size (default eps/10)");
    sub->add_option("--steps", o.steps, "Attack iterations (default 20)");
  };

  auto* train_cmd = app.add_subcommand("train", "Adversarial training with checkpoints and a metrics log");
  add_common(train_cmd);
  auto* eval_cmd = app.add_subcommand("eval", "Natural and robust accuracy report");
  add_common(eval_cmd);
  add_attack(eval_cmd);
  eval_cmd->add_option("--checkpoint", o.checkpoint, "Checkpoint to evaluate")->required();
  auto* analyze_cmd = app.add_subcommand("analyze", "Channel magnitude and frequency profiles for one class");
  add_common(analyze_cmd);
  add_attack(analyze_cmd);
  analyze_cmd->add_option("--checkpoint", o.checkpoint, "Checkpoint to analyse")->required();
  analyze_cmd->add_option("--class", o.class_id, "Class to analyse")->required();
  analyze_cmd->add_option("--threshold", o.thresholds, "Activation threshold fraction (repeatable)");
  analyze_cmd->add_option("--layer", o.layer, "Layer index (default: penultimate)");
  analyze_cmd->add_flag("--raw", o.raw, "Use activations before CAS reweighting");
  auto* export_cmd = app.add_subcommand("export-features", "Pooled penultimate features as CSV");
  add_common(export_cmd);
  export_cmd->add_option("--checkpoint", o.checkpoint, "Checkpoint to read")->required();
  export_cmd->add_option("--layer", o.layer, "Layer index (default: penultimate)");
  auto* grad_cmd = app.add_subcommand("grad-check", "Finite-difference check of the training objective");
  grad_cmd->add_option("--seed", o.seed, "Seed");
  grad_cmd->add_option("--beta", o.beta, "CAS strength");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::cerr << "error: usage: " << e.what() << "\n";
    return 2;
  }

  try {
    if (*train_cmd) return cmd_train(o);
    if (*eval_cmd) return cmd_eval(o);
    if (*analyze_cmd) return cmd_analyze(o);
    if (*export_cmd) return cmd_export_features(o);
    if (*grad_cmd) return cmd_grad_check(o);
  } catch (const Error& e) {
    std::cerr << "error: " << to_string(e.code()) << ": " << e.what() << "\n";
    return exit_code(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
