#pragma once

#include <cstdint>
#include <string>

namespace cotlab {

/// Shortest decimal string that parses back to exactly `x`. All numeric file
/// output goes through this so exports are byte-stable and lossless.
std::string fmt_double(double x);

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& content);

std::uint64_t file_fnv64(const std::string& path);
std::string hex64(std::uint64_t x);

}  // namespace cotlab
