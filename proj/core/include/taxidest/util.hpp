#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace taxidest {

/// Shortest decimal form of d that parses back to exactly the same bits.
/// Every float written to a report or artifact file goes through this,
/// which is what makes text outputs byte-reproducible.
std::string format_double(double d);

/// Strict double parse of the full string. Throws on trailing garbage.
double parse_double(std::string_view s);
std::int64_t parse_i64(std::string_view s);
std::uint64_t parse_u64(std::string_view s);

std::string trim(std::string_view s);
std::vector<std::string> split(std::string_view s, char sep);
std::string to_lower(std::string_view s);

/// FNV-1a 64-bit over raw bytes; digests for artifact files and
/// reproducibility checks.
std::uint64_t fnv1a64(std::span<const std::byte> bytes);
std::uint64_t fnv1a64_file(const std::string& path);
std::string hex64(std::uint64_t v);

/// `key = value` config file: UTF-8, '#' comments, blank lines ignored.
/// Later keys override earlier ones.
std::map<std::string, std::string> read_config_file(const std::string& path);
std::map<std::string, std::string> parse_config_text(std::string_view text);

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, std::string_view content);

}  // namespace taxidest
