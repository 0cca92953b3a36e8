#pragma once

// Experiment configuration as a JSON document. Every field round-trips
// losslessly; unknown keys are rejected so typos surface as config errors.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cas/attacks.hpp"
#include "cas/datasets.hpp"
#include "cas/error.hpp"
#include "cas/model.hpp"
#include "cas/objectives.hpp"

namespace cas {

struct OptimizerConfig {
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 2e-4;
  std::size_t epochs = 20;
  std::vector<std::size_t> lr_drop_epochs{15, 18};
  double lr_drop_factor = 10.0;

  bool operator==(const OptimizerConfig&) const = default;
};

struct DataConfig {
  std::string format = "mnist";  // "mnist" (IDX pair) or "cifar10" (binary batches)
  std::vector<std::string> train_files;  // mnist: {images, labels}; cifar10: batch files
  std::vector<std::string> test_files;
  std::size_t train_per_class = 200;
  std::size_t test_per_class = 50;
  std::size_t batch_size = 32;

  bool operator==(const DataConfig&) const = default;
};

struct ExperimentConfig {
  ModelConfig model = small_conv_net({1, 28, 28}, 10, true);
  LossConfig loss{Variant::at, 1.0, 6.0, 1};
  bool adversarial = true;  // false: standard training on natural inputs
  AttackConfig train_attack;  // budget only: objective, beta, seed and phase follow the loss variant
  OptimizerConfig optimizer;
  DataConfig data;
  std::uint64_t seed = 0;
  std::string output_dir = "runs/default";
  bool log_initial_loss = true;  // evaluate the objective at initialisation as epoch 0

  bool operator==(const ExperimentConfig& o) const {
    return model == o.model && loss.variant == o.loss.variant && loss.beta == o.loss.beta &&
           loss.lambda == o.loss.lambda && loss.cas_points == o.loss.cas_points && adversarial == o.adversarial &&
           train_attack.epsilon == o.train_attack.epsilon && train_attack.step_size == o.train_attack.step_size &&
           train_attack.steps == o.train_attack.steps && train_attack.random_start == o.train_attack.random_start &&
           optimizer == o.optimizer && data == o.data && seed == o.seed && output_dir == o.output_dir &&
           log_initial_loss == o.log_initial_loss;
  }

  void validate() const;
};

/// CIFAR-10 counterpart of the default recipe: 3x32x32 inputs, eps 8/255, step 2/255.
inline ExperimentConfig cifar10_defaults() {
  ExperimentConfig cfg;
  cfg.model = small_conv_net({3, 32, 32}, 10, true);
  cfg.train_attack.epsilon = 8.0 / 255.0;
  cfg.train_attack.step_size = 2.0 / 255.0;
  cfg.data.format = "cifar10";
  return cfg;
}

namespace detail {

using nlohmann::json;

inline std::string_view layer_kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::conv: return "conv";
    case LayerKind::relu: return "relu";
    case LayerKind::maxpool: return "maxpool";
    case LayerKind::flatten: return "flatten";
    case LayerKind::linear: return "linear";
    case LayerKind::gap: return "gap";
    case LayerKind::normalize: return "normalize";
  }
  return "?";
}

inline LayerKind parse_layer_kind(const std::string& s) {
  for (LayerKind k : {LayerKind::conv, LayerKind::relu, LayerKind::maxpool, LayerKind::flatten, LayerKind::linear,
                      LayerKind::gap, LayerKind::normalize})
    if (layer_kind_name(k) == s) return k;
  fail(ErrorCode::config, "unknown layer kind '" + s + "'");
}

/// Reads `key` into `out` when present; a wrong type is a config error.
template <typename V>
void get_opt(const json& j, const char* key, V& out) {
  auto it = j.find(key);
  if (it == j.end()) return;
  try {
    it->get_to(out);
  } catch (const json::exception& e) {
    fail(ErrorCode::config, std::string("field '") + key + "': " + e.what());
  }
}

inline void check_keys(const json& j, std::initializer_list<std::string_view> allowed, const std::string& where) {
  require(j.is_object(), ErrorCode::config, where + " must be an object");
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (auto a : allowed) ok = ok || key == a;
    require(ok, ErrorCode::config, where + ": unknown field '" + key + "'");
  }
}

inline json to_json(const LayerSpec& l) {
  json j{{"kind", layer_kind_name(l.kind)}};
  if (l.kind == LayerKind::conv) j.update({{"out", l.out}, {"kernel", l.kernel}, {"stride", l.stride}, {"padding", l.padding}});
  if (l.kind == LayerKind::linear) j["out"] = l.out;
  if (l.kind == LayerKind::normalize) j.update({{"mean", l.mean}, {"stddev", l.stddev}});
  return j;
}

inline LayerSpec layer_from_json(const json& j) {
  check_keys(j, {"kind", "out", "kernel", "stride", "padding", "mean", "stddev"}, "layer");
  require(j.contains("kind") && j["kind"].is_string(), ErrorCode::config, "layer needs a string 'kind'");
  LayerSpec l;
  l.kind = parse_layer_kind(j["kind"].get<std::string>());
  get_opt(j, "out", l.out);
  get_opt(j, "kernel", l.kernel);
  get_opt(j, "stride", l.stride);
  get_opt(j, "padding", l.padding);
  get_opt(j, "mean", l.mean);
  get_opt(j, "stddev", l.stddev);
  return l;
}

}  // namespace detail

inline nlohmann::json to_json(const ExperimentConfig& c) {
  using detail::json;
  json layers = json::array();
  for (const auto& l : c.model.layers) layers.push_back(detail::to_json(l));
  const auto& a = c.train_attack;
  const auto& o = c.optimizer;
  const auto& d = c.data;
  return json{
      {"model",
       {{"layers", layers},
        {"cas_points", c.model.cas_points},
        {"num_classes", c.model.num_classes},
        {"input_shape", c.model.input_shape},
        {"suppress", c.model.suppress}}},
      {"loss", {{"variant", to_string(c.loss.variant)}, {"beta", c.loss.beta}, {"lambda", c.loss.lambda}}},
      {"adversarial", c.adversarial},
      {"train_attack",
       {{"epsilon", a.epsilon},
        {"step_size", a.step_size},
        {"steps", a.steps},
        {"random_start", a.random_start}}},
      {"optimizer",
       {{"lr", o.lr},
        {"momentum", o.momentum},
        {"weight_decay", o.weight_decay},
        {"epochs", o.epochs},
        {"lr_drop_epochs", o.lr_drop_epochs},
        {"lr_drop_factor", o.lr_drop_factor}}},
      {"dataset",
       {{"format", d.format},
        {"train_files", d.train_files},
        {"test_files", d.test_files},
        {"train_per_class", d.train_per_class},
        {"test_per_class", d.test_per_class},
        {"batch_size", d.batch_size}}},
      {"seed", c.seed},
      {"output_dir", c.output_dir},
      {"log_initial_loss", c.log_initial_loss},
  };
}

/// Missing fields keep their defaults. The CAS point count of the loss always
/// follows the model.
inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  using detail::get_opt;
  detail::check_keys(j, {"model", "loss", "adversarial", "train_attack", "optimizer", "dataset", "seed", "output_dir",
                         "log_initial_loss"},
                     "config");
  ExperimentConfig c;
  if (j.contains("model")) {
    const auto& m = j["model"];
    detail::check_keys(m, {"layers", "cas_points", "num_classes", "input_shape", "suppress"}, "model");
    if (m.contains("layers")) {
      require(m["layers"].is_array(), ErrorCode::config, "model.layers must be an array");
      c.model.layers.clear();
      for (const auto& l : m["layers"]) c.model.layers.push_back(detail::layer_from_json(l));
    }
    get_opt(m, "cas_points", c.model.cas_points);
    get_opt(m, "num_classes", c.model.num_classes);
    get_opt(m, "input_shape", c.model.input_shape);
    get_opt(m, "suppress", c.model.suppress);
  }
  if (j.contains("loss")) {
    const auto& l = j["loss"];
    detail::check_keys(l, {"variant", "beta", "lambda"}, "loss");
    std::string variant{to_string(c.loss.variant)};
    get_opt(l, "variant", variant);
    c.loss.variant = parse_variant(variant);
    get_opt(l, "beta", c.loss.beta);
    get_opt(l, "lambda", c.loss.lambda);
  }
  get_opt(j, "adversarial", c.adversarial);
  if (j.contains("train_attack")) {
    const auto& a = j["train_attack"];
    detail::check_keys(a, {"epsilon", "step_size", "steps", "random_start"}, "train_attack");
    get_opt(a, "epsilon", c.train_attack.epsilon);
    get_opt(a, "step_size", c.train_attack.step_size);
    get_opt(a, "steps", c.train_attack.steps);
    get_opt(a, "random_start", c.train_attack.random_start);
  }
  if (j.contains("optimizer")) {
    const auto& o = j["optimizer"];
    detail::check_keys(o, {"lr", "momentum", "weight_decay", "epochs", "lr_drop_epochs", "lr_drop_factor"}, "optimizer");
    get_opt(o, "lr", c.optimizer.lr);
    get_opt(o, "momentum", c.optimizer.momentum);
    get_opt(o, "weight_decay", c.optimizer.weight_decay);
    get_opt(o, "epochs", c.optimizer.epochs);
    get_opt(o, "lr_drop_epochs", c.optimizer.lr_drop_epochs);
    get_opt(o, "lr_drop_factor", c.optimizer.lr_drop_factor);
  }
  if (j.contains("dataset")) {
    const auto& d = j["dataset"];
    detail::check_keys(d, {"format", "train_files", "test_files", "train_per_class", "test_per_class", "batch_size"},
                       "dataset");
    get_opt(d, "format", c.data.format);
    get_opt(d, "train_files", c.data.train_files);
    get_opt(d, "test_files", c.data.test_files);
    get_opt(d, "train_per_class", c.data.train_per_class);
    get_opt(d, "test_per_class", c.data.test_per_class);
    get_opt(d, "batch_size", c.data.batch_size);
  }
  get_opt(j, "seed", c.seed);
  get_opt(j, "output_dir", c.output_dir);
  get_opt(j, "log_initial_loss", c.log_initial_loss);
  c.loss.cas_points = c.model.cas_points.size();
  return c;
}

inline std::string config_to_text(const ExperimentConfig& c) { return to_json(c).dump(2) + "\n"; }

inline ExperimentConfig config_from_text(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    fail(ErrorCode::config, std::string("config is not valid JSON: ") + e.what());
  }
  return config_from_json(j);
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorCode::io, "cannot open config '" + path.string() + "'");
  std::ostringstream s;
  s << in.rdbuf();
  return config_from_text(s.str());
}

inline void ExperimentConfig::validate() const {
  model.validate();
  require(loss.cas_points == model.cas_points.size(), ErrorCode::config,
          "loss CAS point count does not match the model");
  require(loss.beta >= 0.0 && loss.lambda >= 0.0, ErrorCode::config, "beta and lambda must be >= 0");
  train_attack.validate();
  require(optimizer.lr > 0.0 && optimizer.momentum >= 0.0 && optimizer.weight_decay >= 0.0, ErrorCode::config,
          "optimizer lr must be > 0, momentum and weight decay >= 0");
  require(optimizer.lr_drop_factor > 0.0, ErrorCode::config, "lr drop factor must be > 0");
  require(data.format == "mnist" || data.format == "cifar10", ErrorCode::config,
          "dataset format must be 'mnist' or 'cifar10', got '" + data.format + "'");
  require(data.batch_size > 0 && data.train_per_class > 0 && data.test_per_class > 0, ErrorCode::config,
          "batch size and subset counts must be positive");
  if (data.format == "mnist")
    require(data.train_files.size() == 2 && data.test_files.size() == 2, ErrorCode::config,
            "mnist needs [images, labels] for both train_files and test_files");
  else
    require(!data.train_files.empty() && !data.test_files.empty(), ErrorCode::config,
            "cifar10 needs at least one train and one test batch file");
}

/// Fails with an io error naming the first dataset file that does not exist.
inline void check_paths(const ExperimentConfig& c) {
  for (const auto* files : {&c.data.train_files, &c.data.test_files})
    for (const auto& f : *files)
      require(std::filesystem::exists(f), ErrorCode::io, "dataset file '" + f + "' does not exist");
}

inline Dataset load_split(const DataConfig& d, bool train) {
  const auto& files = train ? d.train_files : d.test_files;
  if (d.format == "mnist") {
    require(files.size() == 2, ErrorCode::config, "mnist needs [images, labels]");
    return load_mnist_idx(files[0], files[1]);
  }
  std::vector<std::filesystem::path> paths(files.begin(), files.end());
  return load_cifar10_binary(paths);
}

}  // namespace cas
