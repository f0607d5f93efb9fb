#pragma once

#include <filesystem>
#include <string>
#include <string_view>

namespace ffkv {

/// Shortest decimal that round-trips the value; "nan" for undefined values.
std::string csv_number(double v);

/// Writes through a sibling temporary file and renames it into place.
void write_file_atomic(const std::filesystem::path& path, std::string_view content);
std::string read_file(const std::filesystem::path& path);

/// Lowercase hex SHA-256.
std::string sha256_hex(std::string_view data);
std::string sha256_file(const std::filesystem::path& path);

}  // namespace ffkv
