#pragma once

// Little helpers for the flat binary formats (datasets, checkpoints).
// Values are written in host byte order; every supported target is
// little-endian.

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "dar/error.hpp"

namespace dar::detail {

template <typename V>
void write_pod(std::ostream& out, const V& value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(V));
}

template <typename V>
V read_pod(std::istream& in, const std::string& what) {
  V value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(V));
  if (!in) throw FormatError("truncated file while reading " + what);
  return value;
}

template <typename V>
void write_array(std::ostream& out, const std::vector<V>& values) {
  out.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(V)));
}

template <typename V>
void read_array(std::istream& in, std::vector<V>& values, std::size_t count, const std::string& what) {
  values.resize(count);
  in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(count * sizeof(V)));
  if (!in) throw FormatError("truncated file while reading " + what);
}

inline void write_string(std::ostream& out, const std::string& text) {
  write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(text.size()));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
}

inline std::string read_string(std::istream& in, const std::string& what) {
  const auto length = read_pod<std::uint32_t>(in, what);
  if (length > (1u << 24)) throw FormatError("implausible string length in " + what);
  std::string text(length, '\0');
  in.read(text.data(), length);
  if (!in) throw FormatError("truncated file while reading " + what);
  return text;
}

inline void expect_magic(std::istream& in, const char (&magic)[9], const std::string& what) {
  char buffer[8];
  in.read(buffer, 8);
  if (!in || std::string(buffer, 8) != std::string(magic, 8)) throw FormatError(what + ": bad magic");
}

/// Parses "key=value" lines into an ordered map; blank lines ignored.
inline std::map<std::string, std::string> parse_echo(const std::string& text) {
  std::map<std::string, std::string> out;
  std::istringstream lines(text);
  std::string line;
  while (std::getline(lines, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("malformed config echo line: " + line);
    out[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return out;
}

}  // namespace dar::detail
