#pragma once

// Binary checkpoint, all integers and floats little-endian:
//
//   "CASCKPT1"                  8 bytes
//   version                     u32
//   config length, config text  u64, bytes
//   epoch                       u32
//   parameter count             u32
//   per parameter: name length u32, name bytes, rank u32, dims u32 x rank,
//                  values f32 x prod(dims)
//
// Parameters are written in name order, so save(load(f)) reproduces f.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "cas/config.hpp"
#include "cas/datasets.hpp"
#include "cas/error.hpp"
#include "cas/model.hpp"

namespace cas {

inline constexpr char kCheckpointMagic[8] = {'C', 'A', 'S', 'C', 'K', 'P', 'T', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::string config_text;
  std::uint32_t epoch = 0;
  Parameters<float> params;
};

namespace detail {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <typename U>
void put_le(std::vector<unsigned char>& out, U v) {
  unsigned char b[sizeof(U)];
  std::memcpy(b, &v, sizeof(U));
  out.insert(out.end(), b, b + sizeof(U));
}

class Reader {
 public:
  explicit Reader(std::span<const unsigned char> bytes) : bytes_(bytes) {}

  template <typename U>
  U get(const char* what) {
    U v;
    std::memcpy(&v, take(sizeof(U), what), sizeof(U));
    return v;
  }

  const unsigned char* take(std::size_t n, const char* what) {
    require(n <= bytes_.size() - pos_, ErrorCode::truncated, std::string("checkpoint truncated while reading ") + what);
    const unsigned char* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }

  bool done() const noexcept { return pos_ == bytes_.size(); }

 private:
  std::span<const unsigned char> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<unsigned char> serialize_checkpoint(const Checkpoint& ckpt) {
  std::vector<unsigned char> out(std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
  detail::put_le<std::uint32_t>(out, kCheckpointVersion);
  detail::put_le<std::uint64_t>(out, ckpt.config_text.size());
  out.insert(out.end(), ckpt.config_text.begin(), ckpt.config_text.end());
  detail::put_le<std::uint32_t>(out, ckpt.epoch);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.params.size()));
  for (const auto& [name, t] : ckpt.params) {
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape) detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    for (float v : t.data) detail::put_le<float>(out, v);
  }
  return out;
}

/// Parses the byte layout only: magic, then version, then payload.
inline Checkpoint deserialize_checkpoint(std::span<const unsigned char> bytes) {
  require(bytes.size() >= sizeof(kCheckpointMagic) &&
              std::memcmp(bytes.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) == 0,
          ErrorCode::bad_magic, "not a checkpoint file (bad magic)");
  detail::Reader r(bytes.subspan(sizeof(kCheckpointMagic)));
  const auto version = r.get<std::uint32_t>("version");
  require(version == kCheckpointVersion, ErrorCode::bad_version,
          "unsupported checkpoint version " + std::to_string(version) + " (expected " +
              std::to_string(kCheckpointVersion) + ")");
  Checkpoint ckpt;
  const auto config_len = r.get<std::uint64_t>("config length");
  const unsigned char* text = r.take(config_len, "config text");
  ckpt.config_text.assign(reinterpret_cast<const char*>(text), config_len);
  ckpt.epoch = r.get<std::uint32_t>("epoch");
  const auto count = r.get<std::uint32_t>("parameter count");
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = r.get<std::uint32_t>("parameter name length");
    const unsigned char* name = r.take(name_len, "parameter name");
    std::string key(reinterpret_cast<const char*>(name), name_len);
    const auto rank = r.get<std::uint32_t>("rank");
    require(rank >= 1 && rank <= 8, ErrorCode::format, "parameter '" + key + "' has implausible rank " + std::to_string(rank));
    Shape shape(rank);
    for (auto& d : shape) {
      d = r.get<std::uint32_t>("dims");
      require(d > 0, ErrorCode::format, "parameter '" + key + "' has a zero dimension");
    }
    std::vector<float> values(numel(shape));
    const unsigned char* raw = r.take(values.size() * sizeof(float), "parameter values");
    std::memcpy(values.data(), raw, values.size() * sizeof(float));
    Tensor<float> t(shape, std::move(values));
    t.requires_grad = true;
    require(ckpt.params.emplace(std::move(key), std::move(t)).second, ErrorCode::format, "duplicate parameter name");
  }
  require(r.done(), ErrorCode::format, "trailing bytes after checkpoint payload");
  return ckpt;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  detail::write_bytes(path, serialize_checkpoint(ckpt));
}

/// Reads a checkpoint and checks its parameters against the embedded config.
inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  auto bytes = detail::read_bytes(path);
  Checkpoint ckpt = deserialize_checkpoint(bytes);
  ExperimentConfig cfg = config_from_text(ckpt.config_text);
  check_parameters(ckpt.params, cfg.model);
  return ckpt;
}

inline Checkpoint make_checkpoint(const ExperimentConfig& cfg, std::uint32_t epoch, const Parameters<float>& params) {
  Checkpoint c{config_to_text(cfg), epoch, {}};
  for (const auto& [name, t] : params) {
    Tensor<float> copy(t.shape, t.data);
    copy.requires_grad = true;
    c.params.emplace(name, std::move(copy));
  }
  return c;
}

}  // namespace cas
