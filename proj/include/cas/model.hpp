#pragma once

// Configurable plain CNN with Channel-wise Activation Suppressing (CAS) modules.
//
// A CAS module attached after layer l pools the activation f (N,K,H,W) to
// f_hat (N,K), classifies it with a bias-free matrix M (K,C), and scales each
// channel k of f by M[k, c*] before passing it on. c* is the label during
// training and the module's own prediction at test time.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "cas/error.hpp"
#include "cas/ops.hpp"
#include "cas/tape.hpp"
#include "cas/tensor.hpp"

namespace cas {

enum class LayerKind { conv, relu, maxpool, flatten, linear, gap, normalize };

struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  std::size_t out = 0;  // conv output channels or linear output features
  std::size_t kernel = 0;
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::vector<double> mean;    // normalize only
  std::vector<double> stddev;  // normalize only

  static LayerSpec with_kind(LayerKind k) {
    LayerSpec l;
    l.kind = k;
    return l;
  }
  static LayerSpec conv(std::size_t out_channels, std::size_t k, std::size_t stride = 1, std::size_t pad = 0) {
    return LayerSpec{LayerKind::conv, out_channels, k, stride, pad, {}, {}};
  }
  static LayerSpec relu() { return with_kind(LayerKind::relu); }
  static LayerSpec maxpool() { return with_kind(LayerKind::maxpool); }
  static LayerSpec flatten() { return with_kind(LayerKind::flatten); }
  static LayerSpec gap() { return with_kind(LayerKind::gap); }
  static LayerSpec linear(std::size_t out_features) {
    LayerSpec l = with_kind(LayerKind::linear);
    l.out = out_features;
    return l;
  }
  static LayerSpec normalize(std::vector<double> mean, std::vector<double> stddev) {
    return LayerSpec{LayerKind::normalize, 0, 0, 1, 0, std::move(mean), std::move(stddev)};
  }

  bool operator==(const LayerSpec&) const = default;
};

struct ModelConfig {
  std::vector<LayerSpec> layers;
  std::vector<std::size_t> cas_points;  // layer indices whose output is reweighted
  std::size_t num_classes = 10;
  std::array<std::size_t, 3> input_shape{1, 28, 28};  // C, H, W
  bool suppress = true;  // false keeps the auxiliary classifiers but skips the reweighting

  bool operator==(const ModelConfig&) const = default;

  bool has_cas() const noexcept { return !cas_points.empty(); }

  bool is_cas_point(std::size_t layer) const {
    return std::find(cas_points.begin(), cas_points.end(), layer) != cas_points.end();
  }

  /// Per-example output shape of every layer. Throws on any inconsistency.
  std::vector<Shape> output_shapes() const {
    require(!layers.empty(), ErrorCode::config, "model has no layers");
    require(num_classes >= 2, ErrorCode::config, "model needs at least two classes");
    Shape s{input_shape[0], input_shape[1], input_shape[2]};
    for (std::size_t d : s) require(d > 0, ErrorCode::config, "input shape must be positive");
    std::vector<Shape> shapes;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const LayerSpec& l = layers[i];
      const std::string where = "layer " + std::to_string(i) + ": ";
      switch (l.kind) {
        case LayerKind::conv: {
          require(s.size() == 3, ErrorCode::config, where + "conv needs a C x H x W input");
          require(l.out > 0 && l.kernel > 0 && l.stride > 0, ErrorCode::config, where + "conv parameters must be positive");
          ConvGeometry g{};
          try {
            g = conv_geometry(Shape{1, s[0], s[1], s[2]}, Shape{l.out, s[0], l.kernel, l.kernel}, l.stride, l.padding);
          } catch (const Error& e) {
            fail(ErrorCode::config, where + e.what());
          }
          s = Shape{l.out, g.out_h, g.out_w};
          break;
        }
        case LayerKind::relu:
          break;
        case LayerKind::maxpool:
          require(s.size() == 3 && s[1] >= 2 && s[2] >= 2, ErrorCode::config, where + "maxpool needs H, W >= 2");
          s = Shape{s[0], s[1] / 2, s[2] / 2};
          break;
        case LayerKind::flatten:
          s = Shape{numel(s)};
          break;
        case LayerKind::gap:
          require(s.size() == 3, ErrorCode::config, where + "gap needs a C x H x W input");
          s = Shape{s[0]};
          break;
        case LayerKind::linear:
          require(s.size() == 1, ErrorCode::config, where + "linear needs a flat input");
          require(l.out > 0, ErrorCode::config, where + "linear output size must be positive");
          s = Shape{l.out};
          break;
        case LayerKind::normalize:
          require(s.size() == 3 && l.mean.size() == s[0] && l.stddev.size() == s[0], ErrorCode::config,
                  where + "normalize needs one mean/stddev per input channel");
          for (double sd : l.stddev) require(sd > 0, ErrorCode::config, where + "normalize stddev must be positive");
          break;
      }
      shapes.push_back(s);
    }
    require(shapes.back() == Shape{num_classes}, ErrorCode::config,
            "final layer must produce " + std::to_string(num_classes) + " logits, got " + to_string(shapes.back()));
    for (std::size_t p : cas_points) {
      require(p < layers.size(), ErrorCode::config, "CAS point " + std::to_string(p) + " is not a layer index");
      require(shapes[p].size() == 3, ErrorCode::config,
              "CAS point " + std::to_string(p) + " must follow a layer with N x K x H x W output");
    }
    return shapes;
  }

  void validate() const { (void)output_shapes(); }

  std::size_t channels_at(std::size_t layer) const {
    auto shapes = output_shapes();
    require(layer < shapes.size() && shapes[layer].size() == 3, ErrorCode::invalid_argument,
            "layer " + std::to_string(layer) + " does not produce a 4-D activation");
    return shapes[layer][0];
  }

  /// The layer analysed by default: the last CAS point, otherwise the last
  /// activation (relu) producing a 4-D output.
  std::size_t penultimate_layer() const {
    if (!cas_points.empty()) return *std::max_element(cas_points.begin(), cas_points.end());
    auto shapes = output_shapes();
    for (std::size_t i = layers.size(); i-- > 0;)
      if (layers[i].kind == LayerKind::relu && shapes[i].size() == 3) return i;
    fail(ErrorCode::config, "model has no 4-D activation layer");
  }
};

/// conv(16)-relu-pool, conv(32)-relu-pool, conv(64)-relu-pool, conv(64)-relu,
/// [CAS], gap, linear(C). All convolutions are 3x3, stride 1, padding 1.
inline ModelConfig small_conv_net(std::array<std::size_t, 3> input_shape, std::size_t num_classes, bool with_cas) {
  ModelConfig cfg;
  cfg.input_shape = input_shape;
  cfg.num_classes = num_classes;
  cfg.layers = {LayerSpec::conv(16, 3, 1, 1), LayerSpec::relu(), LayerSpec::maxpool(),
                LayerSpec::conv(32, 3, 1, 1), LayerSpec::relu(), LayerSpec::maxpool(),
                LayerSpec::conv(64, 3, 1, 1), LayerSpec::relu(), LayerSpec::maxpool(),
                LayerSpec::conv(64, 3, 1, 1), LayerSpec::relu(), LayerSpec::gap(),
                LayerSpec::linear(num_classes)};
  if (with_cas) cfg.cas_points = {10};
  return cfg;
}

// ---------------------------------------------------------------------------
// Parameters

/// Named parameter store (network weights and CAS matrices). Ordered by name.
template <std::floating_point T>
using Parameters = std::map<std::string, Tensor<T>>;

inline std::string weight_name(std::size_t layer) { return "layer" + std::to_string(layer) + ".weight"; }
inline std::string bias_name(std::size_t layer) { return "layer" + std::to_string(layer) + ".bias"; }
inline std::string cas_name(std::size_t layer) { return "cas" + std::to_string(layer) + ".M"; }

/// Expected name -> shape map for a configuration.
inline std::map<std::string, Shape> parameter_shapes(const ModelConfig& config) {
  auto shapes = config.output_shapes();
  std::map<std::string, Shape> out;
  Shape in{config.input_shape[0], config.input_shape[1], config.input_shape[2]};
  for (std::size_t i = 0; i < config.layers.size(); ++i) {
    const LayerSpec& l = config.layers[i];
    if (l.kind == LayerKind::conv) {
      out[weight_name(i)] = Shape{l.out, in[0], l.kernel, l.kernel};
      out[bias_name(i)] = Shape{l.out};
    } else if (l.kind == LayerKind::linear) {
      out[weight_name(i)] = Shape{in[0], l.out};
      out[bias_name(i)] = Shape{l.out};
    }
    in = shapes[i];
  }
  for (std::size_t p : config.cas_points) out[cas_name(p)] = Shape{shapes[p][0], config.num_classes};
  return out;
}

/// He-normal weights (std = sqrt(2 / fan_in)), zero biases; CAS matrices use fan_in = K.
template <std::floating_point T>
Parameters<T> init_params(const ModelConfig& config, std::uint64_t seed) {
  auto shapes = parameter_shapes(config);
  std::mt19937_64 rng(seed);
  Parameters<T> params;
  auto normal = [&](const Shape& shape, std::size_t fan_in) {
    Tensor<T> t(shape);
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
    for (T& v : t.data) v = static_cast<T>(dist(rng));
    t.requires_grad = true;
    return t;
  };
  for (std::size_t i = 0; i < config.layers.size(); ++i) {
    const LayerSpec& l = config.layers[i];
    if (l.kind != LayerKind::conv && l.kind != LayerKind::linear) continue;
    const Shape& w = shapes.at(weight_name(i));
    const std::size_t fan_in = l.kind == LayerKind::conv ? w[1] * w[2] * w[3] : w[0];
    params[weight_name(i)] = normal(w, fan_in);
    Tensor<T> b(shapes.at(bias_name(i)));
    b.requires_grad = true;
    params[bias_name(i)] = std::move(b);
  }
  for (std::size_t p : config.cas_points) {
    const Shape& m = shapes.at(cas_name(p));
    params[cas_name(p)] = normal(m, m[0]);
  }
  return params;
}

/// Throws shape_mismatch unless `params` holds exactly the tensors `config` needs.
template <std::floating_point T>
void check_parameters(const Parameters<T>& params, const ModelConfig& config) {
  auto expected = parameter_shapes(config);
  require(params.size() == expected.size(), ErrorCode::shape_mismatch,
          "expected " + std::to_string(expected.size()) + " parameter tensors, found " + std::to_string(params.size()));
  for (const auto& [name, shape] : expected) {
    auto it = params.find(name);
    require(it != params.end(), ErrorCode::shape_mismatch, "missing parameter '" + name + "'");
    require(it->second.shape == shape, ErrorCode::shape_mismatch,
            "parameter '" + name + "' has shape " + to_string(it->second.shape) + ", expected " + to_string(shape));
  }
}

template <std::floating_point T>
void zero_grads(Parameters<T>& params) {
  for (auto& [_, t] : params) t.zero_grad();
}

template <std::floating_point U, std::floating_point T>
Parameters<U> cast_parameters(const Parameters<T>& params) {
  Parameters<U> out;
  for (const auto& [name, t] : params) out[name] = t.template cast<U>();
  return out;
}

// ---------------------------------------------------------------------------
// Forward pass

enum class Phase { train, test };

template <std::floating_point T>
struct CasOutput {
  Var<T> reweighted;
  Var<T> aux_logits;
  std::vector<int> selection;  // c* per example
};

/// Reweights raw[N,K,H,W] channel-wise by column c* of m[K,C]. The selection is
/// a constant for differentiation; gradients reach both raw and m.
template <std::floating_point T>
CasOutput<T> cas_forward(Var<T> raw, Var<T> m, Phase phase, std::span<const int> labels, bool suppress = true) {
  require(raw.shape().size() == 4, ErrorCode::shape, "cas_forward: expected N x K x H x W activation, got " + to_string(raw.shape()));
  require(m.shape().size() == 2 && m.dim(0) == raw.dim(1), ErrorCode::shape,
          "cas_forward: CAS matrix " + to_string(m.shape()) + " does not match " + std::to_string(raw.dim(1)) + " channels");
  const std::size_t n = raw.dim(0), c = m.dim(1);
  Var<T> aux = matmul(gap(raw), m);
  std::vector<int> selection(n);
  if (phase == Phase::train) {
    require(labels.size() == n, ErrorCode::invalid_argument, "cas_forward: training phase needs one label per example");
    for (std::size_t i = 0; i < n; ++i) {
      require(labels[i] >= 0 && static_cast<std::size_t>(labels[i]) < c, ErrorCode::invalid_argument,
              "cas_forward: label " + std::to_string(labels[i]) + " outside [0," + std::to_string(c) + ")");
      selection[i] = labels[i];
    }
  } else {
    auto z = aux.value();
    for (std::size_t i = 0; i < n; ++i) {
      const T* row = z.data() + i * c;
      selection[i] = static_cast<int>(std::max_element(row, row + c) - row);
    }
  }
  Var<T> out = suppress ? scale_channels(raw, select_columns(m, selection)) : raw;
  return CasOutput<T>{out, aux, std::move(selection)};
}

template <std::floating_point T>
struct ActivationRecord {
  std::size_t layer_index = 0;
  Var<T> raw;
  Var<T> pooled;
  std::optional<Var<T>> reweighted;
  std::optional<Var<T>> aux_logits;
};

template <std::floating_point T>
struct ForwardResult {
  Var<T> logits;
  std::vector<Var<T>> aux;  // one per CAS point, in layer order
  std::vector<ActivationRecord<T>> records;
};

struct ForwardOptions {
  Phase phase = Phase::test;
  std::span<const int> labels{};
  bool record = false;  // capture an ActivationRecord for every 4-D layer output
};

namespace detail {

template <typename T, typename Bind>
ForwardResult<T> forward_impl(Tape<T>& /*tape*/, Var<T> x, const ModelConfig& config, const ForwardOptions& opts,
                              Bind&& bind) {
  const auto& in = config.input_shape;
  require(x.shape().size() == 4 && x.dim(1) == in[0] && x.dim(2) == in[1] && x.dim(3) == in[2], ErrorCode::shape,
          "model input " + to_string(x.shape()) + " does not match configured input " +
              to_string(Shape{in[0], in[1], in[2]}));
  ForwardResult<T> result;
  Var<T> h = x;
  for (std::size_t i = 0; i < config.layers.size(); ++i) {
    const LayerSpec& l = config.layers[i];
    switch (l.kind) {
      case LayerKind::conv:
        h = conv2d(h, bind(weight_name(i)), bind(bias_name(i)), l.stride, l.padding);
        break;
      case LayerKind::relu:
        h = relu(h);
        break;
      case LayerKind::maxpool:
        h = maxpool2d(h);
        break;
      case LayerKind::flatten:
        h = flatten(h);
        break;
      case LayerKind::gap:
        h = gap(h);
        break;
      case LayerKind::linear:
        h = add_bias(matmul(h, bind(weight_name(i))), bind(bias_name(i)));
        break;
      case LayerKind::normalize: {
        std::vector<T> factor(l.mean.size()), shift(l.mean.size());
        for (std::size_t c = 0; c < factor.size(); ++c) {
          factor[c] = static_cast<T>(1.0 / l.stddev[c]);
          shift[c] = static_cast<T>(-l.mean[c] / l.stddev[c]);
        }
        h = channel_affine<T>(h, factor, shift);
        break;
      }
    }
    const bool spatial = h.shape().size() == 4;
    const bool cas_here = config.is_cas_point(i);
    if (!spatial || !(opts.record || cas_here)) continue;
    ActivationRecord<T> rec{i, h, h, std::nullopt, std::nullopt};
    if (cas_here) {
      CasOutput<T> out = cas_forward(h, bind(cas_name(i)), opts.phase, opts.labels, config.suppress);
      result.aux.push_back(out.aux_logits);
      rec.reweighted = out.reweighted;
      rec.aux_logits = out.aux_logits;
      h = out.reweighted;
    }
    if (opts.record) {
      rec.pooled = gap(rec.raw);
      result.records.push_back(rec);
    }
  }
  result.logits = h;
  return result;
}

}  // namespace detail

/// Forward pass with trainable parameters: tensors with requires_grad receive
/// gradients when the tape is swept.
template <std::floating_point T>
ForwardResult<T> model_forward(Tape<T>& tape, Var<T> x, Parameters<T>& params, const ModelConfig& config,
                               const ForwardOptions& opts = {}) {
  return detail::forward_impl(tape, x, config, opts, [&](const std::string& name) {
    auto it = params.find(name);
    require(it != params.end(), ErrorCode::shape_mismatch, "missing parameter '" + name + "'");
    return tape.leaf(it->second);
  });
}

/// Forward pass with read-only parameters (no parameter gradients).
template <std::floating_point T>
ForwardResult<T> model_forward(Tape<T>& tape, Var<T> x, const Parameters<T>& params, const ModelConfig& config,
                               const ForwardOptions& opts = {}) {
  return detail::forward_impl(tape, x, config, opts, [&](const std::string& name) {
    auto it = params.find(name);
    require(it != params.end(), ErrorCode::shape_mismatch, "missing parameter '" + name + "'");
    return tape.borrow(it->second);
  });
}

/// Argmax class per example, evaluated in test phase in chunks of `batch`.
template <std::floating_point T>
std::vector<int> predict(const ModelConfig& config, const Parameters<T>& params, const Tensor<T>& images,
                         std::size_t batch = 256) {
  const std::size_t n = images.dim(0), per = images.size() / n;
  std::vector<int> out(n);
  for (std::size_t start = 0; start < n; start += batch) {
    const std::size_t count = std::min(batch, n - start);
    Shape s = images.shape;
    s[0] = count;
    Tape<T> tape;
    Var<T> x = tape.constant(Tensor<T>(s, std::vector<T>(images.data.begin() + static_cast<std::ptrdiff_t>(start * per),
                                                         images.data.begin() + static_cast<std::ptrdiff_t>((start + count) * per))));
    auto res = model_forward(tape, x, params, config, {});
    auto z = res.logits.value();
    const std::size_t c = config.num_classes;
    for (std::size_t i = 0; i < count; ++i)
      out[start + i] = static_cast<int>(std::max_element(z.data() + i * c, z.data() + (i + 1) * c) - (z.data() + i * c));
  }
  return out;
}

}  // namespace cas
