#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace jlml {

// Ordered key=value pairs, the provenance format embedded in artifacts.
using KeyValues = std::vector<std::pair<std::string, std::string>>;

std::size_t parse_size(std::string_view key, std::string_view text);
std::uint64_t parse_u64(std::string_view key, std::string_view text);
double parse_double(std::string_view key, std::string_view text);
bool parse_bool(std::string_view key, std::string_view text);

// Shortest decimal text that parses back to the same double.
std::string format_double(double value);
inline std::string format_bool(bool value) { return value ? "true" : "false"; }

std::string to_text(const KeyValues& kv);
// Parses "key=value" lines; blank lines and '#' comments are skipped.
KeyValues parse_key_values(std::string_view text);

}  // namespace jlml
