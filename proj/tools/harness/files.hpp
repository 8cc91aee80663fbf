#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "dar/error.hpp"

namespace dar::harness {

/// A required input file does not exist (CLI exit code 4).
class MissingFileError : public Error {
 public:
  explicit MissingFileError(const std::filesystem::path& path)
      : Error("missing file: " + path.string()), path_(path) {}
  const std::filesystem::path& path() const noexcept { return path_; }

 private:
  std::filesystem::path path_;
};

void require_file(const std::filesystem::path& path);
std::string read_text_file(const std::filesystem::path& path);
/// Writes via a temporary sibling and rename, creating parent directories.
void write_text_file(const std::filesystem::path& path, const std::string& text);

/// 64-bit FNV-1a, rendered as 16 hex digits.
std::string fnv1a_hex(const std::string& text);

}  // namespace dar::harness
