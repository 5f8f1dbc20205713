#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace wsforge {

inline constexpr std::size_t kMaxRequestLine = 8 * 1024;
inline constexpr std::size_t kMaxHeaderBlock = 64 * 1024;

bool iequals(std::string_view a, std::string_view b) noexcept;

/// Ordered multimap with case-insensitive name lookup. Insertion order is
/// preserved so emitted header blocks are byte-stable.
class HeaderList {
 public:
  using Entry = std::pair<std::string, std::string>;

  void add(std::string name, std::string value) { entries_.emplace_back(std::move(name), std::move(value)); }

  /// First value for `name`.
  [[nodiscard]] std::optional<std::string_view> get(std::string_view name) const;

  /// True if any header named `name` lists `token` in its comma-separated value.
  [[nodiscard]] bool has_token(std::string_view name, std::string_view token) const;

  [[nodiscard]] const std::vector<Entry> &entries() const noexcept { return entries_; }
  [[nodiscard]] std::size_t size() const noexcept { return entries_.size(); }

 private:
  std::vector<Entry> entries_;
};

struct HttpRequest {
  std::string method;
  std::string target;
  std::string version;
  HeaderList headers;
};

struct HttpResponse {
  std::string version;
  int status = 0;
  std::string reason;
  HeaderList headers;
};

template <typename T>
struct Parsed {
  T value;
  std::size_t consumed = 0;
};

/// Parses a request head through its terminating CRLFCRLF. nullopt means
/// the input is a strict prefix (NeedMoreData). Throws MalformedHttp.
std::optional<Parsed<HttpRequest>> parse_http_request(std::string_view input);

std::optional<Parsed<HttpResponse>> parse_http_response(std::string_view input);

/// Splits "/path?a=1&b=2" and returns the value of `key`, if present.
std::optional<std::string> query_param(std::string_view target, std::string_view key);

std::string_view target_path(std::string_view target) noexcept;

/// Serialises a complete response with Content-Length framing.
std::string format_response(int status, std::string_view reason, const HeaderList &headers, std::string_view body);

}  // namespace wsforge
