#pragma once

// Channel-wise activation diagnostics on GAP-pooled activations: magnitude
// profiles, activation-frequency profiles with a per-example dynamic threshold,
// a normalised-entropy uniformity score, and feature export.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <locale>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "cas/error.hpp"
#include "cas/model.hpp"
#include "cas/tape.hpp"
#include "cas/tensor.hpp"

namespace cas {

inline constexpr int kAllClasses = -1;

/// Pooled activations [N,K] of one layer, with the label of every row.
struct PooledActivations {
  std::size_t layer_index = 0;
  std::size_t channels = 0;
  std::vector<double> values;  // row-major N x K
  std::vector<int> labels;

  std::size_t rows() const noexcept { return labels.size(); }
  std::span<const double> row(std::size_t n) const { return {values.data() + n * channels, channels}; }
};

struct ChannelProfile {
  std::size_t layer_index = 0;
  int class_id = kAllClasses;
  std::size_t n_examples = 0;
  std::vector<double> mean_magnitude;
  std::vector<std::size_t> activation_count;  // empty for magnitude-only profiles
  std::vector<double> frequency;              // activation_count / n_examples
  double threshold_frac = 0.0;
  std::vector<std::size_t> sort_order;        // channels, descending by the profile's key

  std::size_t channels() const noexcept { return mean_magnitude.size(); }
};

namespace detail {

inline std::vector<std::size_t> filtered_rows(const PooledActivations& pooled, int class_filter) {
  require(pooled.values.size() == pooled.rows() * pooled.channels, ErrorCode::shape,
          "pooled activations: value count does not match rows x channels");
  std::vector<std::size_t> rows;
  for (std::size_t n = 0; n < pooled.rows(); ++n)
    if (class_filter == kAllClasses || pooled.labels[n] == class_filter) rows.push_back(n);
  require(!rows.empty(), ErrorCode::invalid_argument,
          "no examples match class filter " + std::to_string(class_filter));
  return rows;
}

/// Channel indices sorted by key descending; equal keys keep channel order.
inline std::vector<std::size_t> descending_order(const std::vector<double>& key) {
  std::vector<std::size_t> order(key.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return key[a] > key[b]; });
  return order;
}

inline std::vector<double> mean_rows(const PooledActivations& pooled, const std::vector<std::size_t>& rows) {
  std::vector<double> mean(pooled.channels, 0.0);
  for (std::size_t n : rows) {
    auto r = pooled.row(n);
    for (std::size_t k = 0; k < pooled.channels; ++k) mean[k] += r[k];
  }
  for (double& m : mean) m /= static_cast<double>(rows.size());
  return mean;
}

}  // namespace detail

/// Mean pooled activation per channel over the examples of `class_filter`,
/// ordered by descending magnitude.
inline ChannelProfile magnitude_profile(const PooledActivations& pooled, int class_filter = kAllClasses) {
  auto rows = detail::filtered_rows(pooled, class_filter);
  ChannelProfile p;
  p.layer_index = pooled.layer_index;
  p.class_id = class_filter;
  p.n_examples = rows.size();
  p.mean_magnitude = detail::mean_rows(pooled, rows);
  p.sort_order = detail::descending_order(p.mean_magnitude);
  return p;
}

/// Channel k is active for example n iff pooled[n,k] > threshold_frac * max_j pooled[n,j].
/// Frequencies are ordered by descending activation frequency.
inline ChannelProfile frequency_profile(const PooledActivations& pooled, double threshold_frac,
                                        int class_filter = kAllClasses) {
  require(threshold_frac > 0.0 && threshold_frac < 1.0, ErrorCode::invalid_argument,
          "threshold fraction must lie in (0, 1)");
  auto rows = detail::filtered_rows(pooled, class_filter);
  ChannelProfile p;
  p.layer_index = pooled.layer_index;
  p.class_id = class_filter;
  p.n_examples = rows.size();
  p.threshold_frac = threshold_frac;
  p.mean_magnitude = detail::mean_rows(pooled, rows);
  p.activation_count.assign(pooled.channels, 0);
  for (std::size_t n : rows) {
    auto r = pooled.row(n);
    const double t = threshold_frac * *std::max_element(r.begin(), r.end());
    for (std::size_t k = 0; k < pooled.channels; ++k)
      if (r[k] > t) ++p.activation_count[k];
  }
  p.frequency.resize(pooled.channels);
  for (std::size_t k = 0; k < pooled.channels; ++k)
    p.frequency[k] = static_cast<double>(p.activation_count[k]) / static_cast<double>(p.n_examples);
  p.sort_order = detail::descending_order(p.frequency);
  return p;
}

/// Normalised Shannon entropy of the frequency vector rescaled to sum to one:
/// 1 for perfectly even activation, 0 when a single channel fires.
inline double uniformity(const ChannelProfile& profile) {
  const auto& f = profile.frequency;
  require(f.size() >= 2, ErrorCode::invalid_argument, "uniformity needs a frequency profile with at least two channels");
  const double total = std::accumulate(f.begin(), f.end(), 0.0);
  require(total > 0.0, ErrorCode::invalid_argument, "uniformity undefined: no channel is ever activated");
  double h = 0.0;
  for (double v : f)
    if (v > 0.0) {
      const double q = v / total;
      h -= q * std::log(q);
    }
  return h / std::log(static_cast<double>(f.size()));
}

struct ComparisonRow {
  std::size_t rank = 0;
  std::size_t channel = 0;
  double nat_freq = 0.0;
  double adv_freq = 0.0;
  double nat_mag = 0.0;
  double adv_mag = 0.0;
};

enum class SortKey { nat_frequency, nat_magnitude };

/// Pairs natural and adversarial profiles channel by channel, ordered by the
/// natural examples' frequency (or magnitude), descending.
inline std::vector<ComparisonRow> compare_profiles(const ChannelProfile& nat, const ChannelProfile& adv,
                                                   SortKey sort_by = SortKey::nat_frequency) {
  require(nat.channels() == adv.channels(), ErrorCode::shape,
          "compare_profiles: channel counts differ (" + std::to_string(nat.channels()) + " vs " +
              std::to_string(adv.channels()) + ")");
  require(nat.layer_index == adv.layer_index && nat.class_id == adv.class_id, ErrorCode::invalid_argument,
          "compare_profiles: profiles come from different layers or classes");
  const bool by_freq = sort_by == SortKey::nat_frequency;
  if (by_freq)
    require(nat.frequency.size() == nat.channels() && adv.frequency.size() == adv.channels(), ErrorCode::invalid_argument,
            "compare_profiles: frequency ordering requested for magnitude-only profiles");
  auto order = detail::descending_order(by_freq ? nat.frequency : nat.mean_magnitude);
  std::vector<ComparisonRow> rows;
  rows.reserve(order.size());
  for (std::size_t r = 0; r < order.size(); ++r) {
    const std::size_t k = order[r];
    ComparisonRow row{r, k, 0.0, 0.0, nat.mean_magnitude[k], adv.mean_magnitude[k]};
    if (!nat.frequency.empty()) row.nat_freq = nat.frequency[k];
    if (!adv.frequency.empty()) row.adv_freq = adv.frequency[k];
    rows.push_back(row);
  }
  return rows;
}

/// Sum of adversarial frequencies over the lower floor(K/2) ranks.
inline double bottom_half_adv_mass(std::span<const ComparisonRow> rows) {
  double mass = 0.0;
  for (std::size_t r = rows.size() - rows.size() / 2; r < rows.size(); ++r) mass += rows[r].adv_freq;
  return mass;
}

inline void write_comparison_csv(std::ostream& out, std::span<const ComparisonRow> rows) {
  std::ostringstream s;
  s.imbue(std::locale::classic());
  s.precision(10);
  s << "rank,channel,nat_freq,adv_freq,nat_mag,adv_mag\n";
  for (const auto& r : rows)
    s << r.rank << ',' << r.channel << ',' << r.nat_freq << ',' << r.adv_freq << ',' << r.nat_mag << ',' << r.adv_mag
      << '\n';
  out << s.str();
}

// ---------------------------------------------------------------------------
// Collecting activations from a model

enum class FeatureSource {
  raw,         // f: the layer output before any CAS reweighting
  reweighted,  // the activation passed downstream (f reweighted when a CAS module is attached)
};

/// GAP-pooled activation of `layer_index` for every example, evaluated in
/// test phase in chunks of `batch`.
template <std::floating_point T>
PooledActivations collect_pooled(const ModelConfig& config, const Parameters<T>& params, const Tensor<T>& images,
                                 std::span<const int> labels, std::size_t layer_index,
                                 FeatureSource source = FeatureSource::raw, std::size_t batch = 256) {
  const std::size_t channels = config.channels_at(layer_index);
  require(images.rank() == 4 && images.dim(0) == labels.size(), ErrorCode::shape,
          "collect_pooled: images and labels disagree on the example count");
  const std::size_t n = images.dim(0), per = images.size() / n;
  PooledActivations out;
  out.layer_index = layer_index;
  out.channels = channels;
  out.values.reserve(n * channels);
  out.labels.assign(labels.begin(), labels.end());
  for (std::size_t start = 0; start < n; start += batch) {
    const std::size_t count = std::min(batch, n - start);
    Shape s = images.shape;
    s[0] = count;
    Tape<T> tape;
    Var<T> x = tape.constant(Tensor<T>(s, std::vector<T>(images.data.begin() + static_cast<std::ptrdiff_t>(start * per),
                                                         images.data.begin() + static_cast<std::ptrdiff_t>((start + count) * per))));
    ForwardOptions opts{Phase::test, {}, true};
    auto fwd = model_forward(tape, x, params, config, opts);
    auto it = std::find_if(fwd.records.begin(), fwd.records.end(),
                           [&](const ActivationRecord<T>& r) { return r.layer_index == layer_index; });
    require(it != fwd.records.end(), ErrorCode::invalid_argument,
            "layer " + std::to_string(layer_index) + " produced no activation record");
    Var<T> pooled = it->pooled;
    if (source == FeatureSource::reweighted && it->reweighted) pooled = gap(*it->reweighted);
    for (T v : pooled.value()) out.values.push_back(static_cast<double>(v));
  }
  return out;
}

/// Per-example rows of (label, K pooled values) for external embedding tools.
struct FeatureTable {
  std::size_t layer_index = 0;
  PooledActivations pooled;
};

template <std::floating_point T>
FeatureTable export_features(const ModelConfig& config, const Parameters<T>& params, const Tensor<T>& images,
                             std::span<const int> labels, std::size_t layer_index,
                             FeatureSource source = FeatureSource::raw) {
  return FeatureTable{layer_index, collect_pooled(config, params, images, labels, layer_index, source)};
}

inline void write_features_csv(std::ostream& out, const FeatureTable& table) {
  std::ostringstream s;
  s.imbue(std::locale::classic());
  s.precision(9);
  s << "label";
  for (std::size_t k = 0; k < table.pooled.channels; ++k) s << ",f" << k;
  s << '\n';
  for (std::size_t n = 0; n < table.pooled.rows(); ++n) {
    s << table.pooled.labels[n];
    for (double v : table.pooled.row(n)) s << ',' << v;
    s << '\n';
  }
  out << s.str();
}

}  // namespace cas
