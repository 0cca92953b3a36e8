#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace cas {

/// Machine-readable error categories. The CLI maps each one to a distinct exit code.
enum class ErrorCode {
  shape,             // dimension mismatch between operands
  invalid_argument,  // argument outside its documented domain
  format,            // malformed dataset file
  io,                // file could not be opened / read / written
  config,            // invalid experiment or model configuration
  bad_magic,         // checkpoint magic bytes wrong
  bad_version,       // checkpoint version unsupported
  truncated,         // checkpoint payload ended early
  shape_mismatch,    // checkpoint parameters disagree with its config
  unknown_attack,    // attack name not recognised
};

constexpr std::string_view to_string(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::shape: return "shape";
    case ErrorCode::invalid_argument: return "invalid_argument";
    case ErrorCode::format: return "format";
    case ErrorCode::io: return "io";
    case ErrorCode::config: return "config";
    case ErrorCode::bad_magic: return "bad_magic";
    case ErrorCode::bad_version: return "bad_version";
    case ErrorCode::truncated: return "truncated";
    case ErrorCode::shape_mismatch: return "shape_mismatch";
    case ErrorCode::unknown_attack: return "unknown_attack";
  }
  return "unknown";
}

constexpr int exit_code(ErrorCode code) noexcept {
  return 10 + static_cast<int>(code);
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) {
  throw Error(code, what);
}

inline void require(bool condition, ErrorCode code, const std::string& what) {
  if (!condition) fail(code, what);
}

}  // namespace cas
