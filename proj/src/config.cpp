#include "wsforge/config.hpp"

#include <cctype>
#include <charconv>
#include <fstream>
#include <sstream>

#include "wsforge/error.hpp"

namespace wsforge {
namespace {

std::string_view trim(std::string_view s) noexcept {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

template <typename Fn>
void for_each_line(std::string_view text, Fn &&fn) {
  std::size_t lineno = 0;
  while (!text.empty()) {
    ++lineno;
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text.remove_prefix(nl == std::string_view::npos ? text.size() : nl + 1);
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (!line.empty()) fn(line, lineno);
  }
}

void parse_assignment(KeyValues &out, std::string_view line, std::size_t lineno) {
  const auto eq = line.find('=');
  if (eq == std::string_view::npos || trim(line.substr(0, eq)).empty()) {
    throw Error(ErrorCode::BadConfig, "line " + std::to_string(lineno) + ": expected key=value");
  }
  out[std::string(trim(line.substr(0, eq)))] = std::string(trim(line.substr(eq + 1)));
}

}  // namespace

KeyValues parse_key_values(std::string_view text) {
  KeyValues out;
  for_each_line(text, [&](std::string_view line, std::size_t n) { parse_assignment(out, line, n); });
  return out;
}

KeyValues load_key_values(const std::filesystem::path &path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::BadConfig, "cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_key_values(ss.str());
}

std::map<std::string, KeyValues> parse_sections(std::string_view text) {
  std::map<std::string, KeyValues> out;
  KeyValues *current = nullptr;
  for_each_line(text, [&](std::string_view line, std::size_t n) {
    if (line.front() == '[') {
      if (line.back() != ']') throw Error(ErrorCode::BadConfig, "line " + std::to_string(n) + ": bad section");
      current = &out[std::string(trim(line.substr(1, line.size() - 2)))];
      return;
    }
    if (!current) throw Error(ErrorCode::BadConfig, "line " + std::to_string(n) + ": key outside a section");
    parse_assignment(*current, line, n);
  });
  return out;
}

void apply_override(KeyValues &base, std::string_view assignment) { parse_assignment(base, assignment, 0); }

std::string format_key_values(const KeyValues &kv) {
  std::string out;
  for (const auto &[k, v] : kv) out += k + "=" + v + "\n";
  return out;
}

std::int64_t kv_int(const KeyValues &kv, const std::string &key, std::int64_t fallback) {
  const auto it = kv.find(key);
  if (it == kv.end()) return fallback;
  std::int64_t v = 0;
  const auto &s = it->second;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) throw Error(ErrorCode::BadConfig, key + "=" + s + " is not an integer");
  return v;
}

double kv_double(const KeyValues &kv, const std::string &key, double fallback) {
  const auto it = kv.find(key);
  if (it == kv.end()) return fallback;
  try {
    std::size_t used = 0;
    const double v = std::stod(it->second, &used);
    if (used != it->second.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception &) {
    throw Error(ErrorCode::BadConfig, key + "=" + it->second + " is not a number");
  }
}

bool kv_bool(const KeyValues &kv, const std::string &key, bool fallback) {
  const auto it = kv.find(key);
  if (it == kv.end()) return fallback;
  const auto &v = it->second;
  if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
  if (v == "0" || v == "false" || v == "no" || v == "off") return false;
  throw Error(ErrorCode::BadConfig, key + "=" + v + " is not a boolean");
}

std::string kv_string(const KeyValues &kv, const std::string &key, std::string fallback) {
  const auto it = kv.find(key);
  return it == kv.end() ? fallback : it->second;
}

}  // namespace wsforge
