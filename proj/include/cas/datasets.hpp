#pragma once

// CIFAR-10 binary and MNIST IDX readers/writers, class-balanced subsets and
// seeded mini-batch iteration. Images are float in [0, 1], laid out N x C x H x W.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "cas/error.hpp"
#include "cas/tensor.hpp"

namespace cas {

struct Dataset {
  Tensor<float> images;  // N x C x H x W
  std::vector<int> labels;
  std::size_t num_classes = 10;

  std::size_t size() const noexcept { return labels.size(); }
  std::array<std::size_t, 3> example_shape() const { return {images.dim(1), images.dim(2), images.dim(3)}; }
};

namespace detail {

inline std::vector<unsigned char> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorCode::io, "cannot open '" + path.string() + "'");
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  require(!in.bad(), ErrorCode::io, "read error on '" + path.string() + "'");
  return bytes;
}

inline void write_bytes(const std::filesystem::path& path, std::span<const unsigned char> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(out), ErrorCode::io, "cannot create '" + path.string() + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  require(static_cast<bool>(out), ErrorCode::io, "write error on '" + path.string() + "'");
}

inline std::uint32_t read_be32(std::span<const unsigned char> b, std::size_t at) {
  return (std::uint32_t{b[at]} << 24) | (std::uint32_t{b[at + 1]} << 16) | (std::uint32_t{b[at + 2]} << 8) |
         std::uint32_t{b[at + 3]};
}

inline void put_be32(std::vector<unsigned char>& b, std::uint32_t v) {
  for (int shift = 24; shift >= 0; shift -= 8) b.push_back(static_cast<unsigned char>(v >> shift));
}

inline unsigned char to_byte(float v) {
  require(v >= 0.0f && v <= 1.0f, ErrorCode::invalid_argument, "pixel value outside [0, 1] cannot be stored as a byte");
  return static_cast<unsigned char>(std::lround(v * 255.0f));
}

}  // namespace detail

inline constexpr std::size_t kCifarRecord = 1 + 3 * 32 * 32;

/// Concatenates CIFAR-10 binary batch files: each record is one label byte
/// followed by 3072 channel-major pixel bytes.
inline Dataset load_cifar10_binary(std::span<const std::filesystem::path> files) {
  require(!files.empty(), ErrorCode::invalid_argument, "no CIFAR-10 files given");
  std::vector<std::vector<unsigned char>> blobs;
  std::size_t total = 0;
  for (const auto& f : files) {
    auto bytes = detail::read_bytes(f);
    require(bytes.size() % kCifarRecord == 0, ErrorCode::format,
            "'" + f.string() + "': size " + std::to_string(bytes.size()) + " is not a multiple of " +
                std::to_string(kCifarRecord));
    total += bytes.size() / kCifarRecord;
    blobs.push_back(std::move(bytes));
  }
  require(total > 0, ErrorCode::format, "CIFAR-10 files contain no records");
  Dataset ds;
  ds.images = Tensor<float>(Shape{total, 3, 32, 32});
  ds.labels.reserve(total);
  std::size_t n = 0;
  for (std::size_t b = 0; b < blobs.size(); ++b) {
    const auto& bytes = blobs[b];
    for (std::size_t r = 0; r < bytes.size() / kCifarRecord; ++r, ++n) {
      const unsigned char* rec = bytes.data() + r * kCifarRecord;
      require(rec[0] <= 9, ErrorCode::format,
              "'" + files[b].string() + "' record " + std::to_string(r) + ": label " + std::to_string(rec[0]) + " > 9");
      ds.labels.push_back(rec[0]);
      float* dst = ds.images.data.data() + n * (kCifarRecord - 1);
      for (std::size_t i = 0; i + 1 < kCifarRecord; ++i) dst[i] = static_cast<float>(rec[1 + i]) / 255.0f;
    }
  }
  return ds;
}

inline void write_cifar10_binary(const std::filesystem::path& file, const Dataset& ds) {
  require(ds.images.rank() == 4 && ds.example_shape() == std::array<std::size_t, 3>{3, 32, 32}, ErrorCode::shape,
          "CIFAR-10 records need 3 x 32 x 32 images");
  std::vector<unsigned char> bytes;
  bytes.reserve(ds.size() * kCifarRecord);
  for (std::size_t n = 0; n < ds.size(); ++n) {
    require(ds.labels[n] >= 0 && ds.labels[n] <= 9, ErrorCode::invalid_argument, "CIFAR-10 label out of range");
    bytes.push_back(static_cast<unsigned char>(ds.labels[n]));
    for (std::size_t i = 0; i + 1 < kCifarRecord; ++i) bytes.push_back(detail::to_byte(ds.images[n * (kCifarRecord - 1) + i]));
  }
  detail::write_bytes(file, bytes);
}

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

/// MNIST IDX pair: big-endian headers, unsigned byte pixels.
inline Dataset load_mnist_idx(const std::filesystem::path& images_file, const std::filesystem::path& labels_file) {
  auto img = detail::read_bytes(images_file);
  auto lab = detail::read_bytes(labels_file);
  require(img.size() >= 16, ErrorCode::format, "'" + images_file.string() + "': truncated IDX header");
  require(lab.size() >= 8, ErrorCode::format, "'" + labels_file.string() + "': truncated IDX header");
  require(detail::read_be32(img, 0) == kIdxImagesMagic, ErrorCode::format,
          "'" + images_file.string() + "': bad IDX image magic");
  require(detail::read_be32(lab, 0) == kIdxLabelsMagic, ErrorCode::format,
          "'" + labels_file.string() + "': bad IDX label magic");
  const std::size_t n = detail::read_be32(img, 4), rows = detail::read_be32(img, 8), cols = detail::read_be32(img, 12);
  const std::size_t n_labels = detail::read_be32(lab, 4);
  require(n == n_labels, ErrorCode::format,
          "IDX counts disagree: " + std::to_string(n) + " images vs " + std::to_string(n_labels) + " labels");
  require(n > 0 && rows > 0 && cols > 0, ErrorCode::format, "IDX file has an empty dimension");
  require(img.size() == 16 + n * rows * cols, ErrorCode::format, "'" + images_file.string() + "': payload size mismatch");
  require(lab.size() == 8 + n, ErrorCode::format, "'" + labels_file.string() + "': payload size mismatch");
  Dataset ds;
  ds.images = Tensor<float>(Shape{n, 1, rows, cols});
  for (std::size_t i = 0; i < n * rows * cols; ++i) ds.images[i] = static_cast<float>(img[16 + i]) / 255.0f;
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    require(lab[8 + i] <= 9, ErrorCode::format, "IDX label " + std::to_string(lab[8 + i]) + " > 9 at index " + std::to_string(i));
    ds.labels[i] = lab[8 + i];
  }
  return ds;
}

inline void write_mnist_idx(const std::filesystem::path& images_file, const std::filesystem::path& labels_file,
                            const Dataset& ds) {
  require(ds.images.rank() == 4 && ds.images.dim(1) == 1, ErrorCode::shape, "IDX images need a single channel");
  const std::size_t rows = ds.images.dim(2), cols = ds.images.dim(3);
  std::vector<unsigned char> img, lab;
  detail::put_be32(img, kIdxImagesMagic);
  detail::put_be32(img, static_cast<std::uint32_t>(ds.size()));
  detail::put_be32(img, static_cast<std::uint32_t>(rows));
  detail::put_be32(img, static_cast<std::uint32_t>(cols));
  for (float v : ds.images.data) img.push_back(detail::to_byte(v));
  detail::put_be32(lab, kIdxLabelsMagic);
  detail::put_be32(lab, static_cast<std::uint32_t>(ds.size()));
  for (int y : ds.labels) {
    require(y >= 0 && y <= 255, ErrorCode::invalid_argument, "IDX label out of byte range");
    lab.push_back(static_cast<unsigned char>(y));
  }
  detail::write_bytes(images_file, img);
  detail::write_bytes(labels_file, lab);
}

/// Copies the examples at `indices`, in that order.
inline Dataset take(const Dataset& ds, std::span<const std::size_t> indices) {
  require(!indices.empty(), ErrorCode::invalid_argument, "cannot take an empty subset");
  Shape s = ds.images.shape;
  s[0] = indices.size();
  const std::size_t per = ds.images.size() / ds.size();
  Dataset out;
  out.num_classes = ds.num_classes;
  out.images = Tensor<float>(s);
  out.labels.reserve(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    require(indices[i] < ds.size(), ErrorCode::invalid_argument, "subset index " + std::to_string(indices[i]) + " out of range");
    std::copy_n(ds.images.data.begin() + static_cast<std::ptrdiff_t>(indices[i] * per), per,
                out.images.data.begin() + static_cast<std::ptrdiff_t>(i * per));
    out.labels.push_back(ds.labels[indices[i]]);
  }
  return out;
}

/// The first `per_class` examples of every class, in file order.
inline std::vector<std::size_t> per_class_indices(const Dataset& ds, std::size_t per_class) {
  require(per_class > 0, ErrorCode::invalid_argument, "per-class subset count must be positive");
  std::vector<std::size_t> taken(ds.num_classes, 0), out;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto c = static_cast<std::size_t>(ds.labels[i]);
    if (c < ds.num_classes && taken[c] < per_class) {
      ++taken[c];
      out.push_back(i);
    }
  }
  for (std::size_t c = 0; c < ds.num_classes; ++c)
    require(taken[c] == per_class, ErrorCode::invalid_argument,
            "class " + std::to_string(c) + " has only " + std::to_string(taken[c]) + " examples, " +
                std::to_string(per_class) + " requested");
  return out;
}

struct BatchPlan {
  std::size_t batch_size = 128;
  std::uint64_t shuffle_seed = 0;
  bool shuffle = true;
  std::optional<std::size_t> per_class;  // class-balanced subset
  std::vector<std::size_t> indices;      // explicit subset; used when per_class is unset and non-empty
};

/// Example indices the plan draws from, before shuffling.
inline std::vector<std::size_t> plan_indices(const Dataset& ds, const BatchPlan& plan) {
  if (plan.per_class) return per_class_indices(ds, *plan.per_class);
  if (!plan.indices.empty()) {
    for (std::size_t i : plan.indices)
      require(i < ds.size(), ErrorCode::invalid_argument, "subset index " + std::to_string(i) + " out of range");
    std::vector<std::size_t> sorted = plan.indices;
    std::sort(sorted.begin(), sorted.end());
    require(std::adjacent_find(sorted.begin(), sorted.end()) == sorted.end(), ErrorCode::invalid_argument,
            "subset indices must be unique");
    return plan.indices;
  }
  require(ds.size() > 0, ErrorCode::invalid_argument, "dataset is empty");
  std::vector<std::size_t> all(ds.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return all;
}

/// Fisher-Yates with a fixed draw rule so the order is the same on every platform.
inline void seeded_shuffle(std::vector<std::size_t>& v, std::uint64_t seed, std::uint64_t epoch) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(epoch >> 32)};
  std::mt19937_64 rng(seq);
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng() % i]);
}

struct Batch {
  Tensor<float> images;
  std::vector<int> labels;
  std::vector<std::size_t> indices;
};

/// Index groups of one epoch; the final short batch is kept.
inline std::vector<std::vector<std::size_t>> epoch_batches(const Dataset& ds, const BatchPlan& plan, std::uint64_t epoch) {
  require(plan.batch_size > 0, ErrorCode::invalid_argument, "batch size must be positive");
  auto order = plan_indices(ds, plan);
  require(!order.empty(), ErrorCode::invalid_argument, "subset is empty");
  if (plan.shuffle) seeded_shuffle(order, plan.shuffle_seed, epoch);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start < order.size(); start += plan.batch_size) {
    const std::size_t end = std::min(order.size(), start + plan.batch_size);
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start), order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

inline Batch gather(const Dataset& ds, std::span<const std::size_t> indices) {
  Dataset sub = take(ds, indices);
  return Batch{std::move(sub.images), std::move(sub.labels), {indices.begin(), indices.end()}};
}

/// Contiguous rows [start, start + count) of an N x ... tensor.
template <std::floating_point T>
Tensor<T> slice_rows(const Tensor<T>& t, std::size_t start, std::size_t count) {
  require(t.rank() >= 1 && start + count <= t.dim(0) && count > 0, ErrorCode::invalid_argument, "slice_rows: range out of bounds");
  const std::size_t per = t.size() / t.dim(0);
  Shape s = t.shape;
  s[0] = count;
  return Tensor<T>(s, std::vector<T>(t.data.begin() + static_cast<std::ptrdiff_t>(start * per),
                                     t.data.begin() + static_cast<std::ptrdiff_t>((start + count) * per)));
}

}  // namespace cas
