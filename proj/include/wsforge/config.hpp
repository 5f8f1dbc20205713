#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>

namespace wsforge {

/// Flat key=value configuration. Blank lines and '#' comments are ignored.
using KeyValues = std::map<std::string, std::string>;

KeyValues parse_key_values(std::string_view text);

KeyValues load_key_values(const std::filesystem::path &path);

/// "[name]" headed groups of key=value lines.
std::map<std::string, KeyValues> parse_sections(std::string_view text);

/// Applies "k=v" overrides on top of `base`; later entries win.
void apply_override(KeyValues &base, std::string_view assignment);

std::string format_key_values(const KeyValues &kv);

// Typed accessors; throw BadConfig on malformed values.
std::int64_t kv_int(const KeyValues &kv, const std::string &key, std::int64_t fallback);
double kv_double(const KeyValues &kv, const std::string &key, double fallback);
bool kv_bool(const KeyValues &kv, const std::string &key, bool fallback);
std::string kv_string(const KeyValues &kv, const std::string &key, std::string fallback);

}  // namespace wsforge
