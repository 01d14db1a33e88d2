#pragma once

#include <filesystem>
#include <string>
#include <string_view>

namespace halluc {

std::string read_file(const std::filesystem::path& path);

/// Writes `path` + ".tmp", then renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);

/// Hex FNV-1a digest of the file contents.
std::string file_digest(const std::filesystem::path& path);
std::string hex64(std::uint64_t value);

}  // namespace halluc
