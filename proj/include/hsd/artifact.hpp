#pragma once

#include <cstdint>
#include <cstdio>
#include <sstream>
#include <string>
#include <string_view>

namespace hsd {

inline constexpr std::string_view kToolVersion = "hsd/0.1.0";

/// 64-bit FNV-1a, rendered as 16 hex digits.
inline std::string digest_hex(std::string_view text) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : text) h = (h ^ c) * 1099511628211ULL;
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

/// First line of every text artifact written by the tools.
inline std::string artifact_header(std::string_view kind, std::string_view config_digest, std::uint64_t seed) {
  std::ostringstream os;
  os << "#hsd tool=" << kToolVersion << " kind=" << kind << " config=" << config_digest << " seed=" << seed;
  return os.str();
}

inline bool is_artifact_header(std::string_view line) { return line.rfind("#hsd ", 0) == 0; }

}  // namespace hsd
