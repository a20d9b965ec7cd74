#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace dnet::text {

/// Parses flat `key=value` lines. Blank lines and lines starting with '#'
/// are skipped; whitespace around keys and values is trimmed. Throws
/// ConfigError on a line without '=' or on a repeated key.
std::vector<std::pair<std::string, std::string>> parse_pairs(std::string_view text);

std::size_t parse_size(std::string_view key, std::string_view value);
std::uint64_t parse_u64(std::string_view key, std::string_view value);
double parse_double(std::string_view key, std::string_view value);
bool parse_bool(std::string_view key, std::string_view value);
/// Comma-separated non-negative integers, e.g. "6,12,32,32".
std::vector<std::size_t> parse_size_list(std::string_view key, std::string_view value);

std::string read_file(const std::string& path);

}  // namespace dnet::text
