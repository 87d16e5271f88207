#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>

namespace driftlab {

/// Shortest decimal form that parses back to the same double.
std::string format_double(double v);

/// Full-string parse; nullopt on any trailing garbage or non-numeric text.
std::optional<double> parse_double(std::string_view text);
std::optional<long long> parse_int(std::string_view text);

std::string read_file(const std::filesystem::path& path);

/// Writes to a sibling temp file and renames it into place, so readers never
/// observe a partial file.
void write_file_atomic(const std::filesystem::path& path, std::string_view content);

}  // namespace driftlab
