#pragma once

#include <cstdint>
#include <string>
#include <string_view>

namespace carkit {

/// 64-bit FNV-1a. Used wherever the toolkit needs a stable, platform-independent
/// hash of a byte string (mock scoring formulas, seeds).
constexpr std::uint64_t hash64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Lower-case hex SHA-256 digest; content addressing for the score cache and
/// the report config hash.
std::string sha256_hex(std::string_view bytes);

}  // namespace carkit
