#pragma once

// Shared error types and small utilities used across the library.

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace hypofuse {

inline constexpr std::string_view kVersion = "0.1.0";

// Error hierarchy. Every failure mode carries a message naming the offending
// values; stage-level code catches these and maps them to exit codes.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct DimensionError : Error {
  using Error::Error;
};
struct ValueError : Error {
  using Error::Error;
};
struct ConfigError : Error {
  using Error::Error;
};
struct LengthError : Error {
  using Error::Error;
};
struct DataError : Error {
  using Error::Error;
};
struct TrainingError : Error {
  using Error::Error;
};
// A pipeline stage was invoked before the stage that produces its input.
struct StageError : Error {
  using Error::Error;
};

// FNV-1a 64-bit. Used for config hashes and parameter fingerprints; these are
// traceability ids, not security hashes.
inline std::uint64_t fnv1a64(std::string_view bytes,
                             std::uint64_t seed = 0xcbf29ce484222325ull) {
  std::uint64_t h = seed;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::string to_hex(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<size_t>(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return out;
}

}  // namespace hypofuse
