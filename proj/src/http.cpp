#include "wsforge/http.hpp"

#include <algorithm>
#include <cctype>

#include "wsforge/error.hpp"

namespace wsforge {
namespace {

std::string_view trim(std::string_view s) noexcept {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t')) s.remove_suffix(1);
  return s;
}

bool is_token_char(char c) noexcept {
  if (std::isalnum(static_cast<unsigned char>(c))) return true;
  return std::string_view("!#$%&'*+-.^_`|~").find(c) != std::string_view::npos;
}

/// Locates the end of the head. nullopt while incomplete and within limits.
std::optional<std::size_t> find_head_end(std::string_view input) {
  const auto first_crlf = input.find("\r\n");
  if (first_crlf == std::string_view::npos && input.size() > kMaxRequestLine) {
    throw Error(ErrorCode::MalformedHttp, "start line exceeds 8 KiB");
  }
  if (first_crlf != std::string_view::npos && first_crlf > kMaxRequestLine) {
    throw Error(ErrorCode::MalformedHttp, "start line exceeds 8 KiB");
  }
  const auto end = input.find("\r\n\r\n");
  if (end == std::string_view::npos) {
    if (input.size() > kMaxHeaderBlock) throw Error(ErrorCode::MalformedHttp, "header block exceeds 64 KiB");
    return std::nullopt;
  }
  if (end + 4 > kMaxHeaderBlock) throw Error(ErrorCode::MalformedHttp, "header block exceeds 64 KiB");
  return end + 4;
}

HeaderList parse_header_lines(std::string_view block) {
  HeaderList headers;
  while (!block.empty()) {
    const auto eol = block.find("\r\n");
    const std::string_view line = block.substr(0, eol);
    block.remove_prefix(eol == std::string_view::npos ? block.size() : eol + 2);
    if (line.empty()) break;
    const auto colon = line.find(':');
    if (colon == std::string_view::npos || colon == 0) throw Error(ErrorCode::MalformedHttp, "header line without name");
    const std::string_view name = line.substr(0, colon);
    if (!std::all_of(name.begin(), name.end(), is_token_char)) {
      throw Error(ErrorCode::MalformedHttp, "invalid header name");
    }
    headers.add(std::string(name), std::string(trim(line.substr(colon + 1))));
  }
  return headers;
}

}  // namespace

bool iequals(std::string_view a, std::string_view b) noexcept {
  return a.size() == b.size() && std::equal(a.begin(), a.end(), b.begin(), [](char x, char y) {
           return std::tolower(static_cast<unsigned char>(x)) == std::tolower(static_cast<unsigned char>(y));
         });
}

std::optional<std::string_view> HeaderList::get(std::string_view name) const {
  for (const auto &[n, v] : entries_) {
    if (iequals(n, name)) return std::string_view(v);
  }
  return std::nullopt;
}

bool HeaderList::has_token(std::string_view name, std::string_view token) const {
  for (const auto &[n, v] : entries_) {
    if (!iequals(n, name)) continue;
    std::string_view rest = v;
    while (!rest.empty()) {
      const auto comma = rest.find(',');
      if (iequals(trim(rest.substr(0, comma)), token)) return true;
      if (comma == std::string_view::npos) break;
      rest.remove_prefix(comma + 1);
    }
  }
  return false;
}

std::optional<Parsed<HttpRequest>> parse_http_request(std::string_view input) {
  const auto end = find_head_end(input);
  if (!end) return std::nullopt;
  const std::string_view head = input.substr(0, *end);

  const auto eol = head.find("\r\n");
  const std::string_view line = head.substr(0, eol);
  const auto sp1 = line.find(' ');
  const auto sp2 = sp1 == std::string_view::npos ? sp1 : line.find(' ', sp1 + 1);
  if (sp2 == std::string_view::npos || line.find(' ', sp2 + 1) != std::string_view::npos) {
    throw Error(ErrorCode::MalformedHttp, "request line must have three parts");
  }
  HttpRequest req;
  req.method = std::string(line.substr(0, sp1));
  req.target = std::string(line.substr(sp1 + 1, sp2 - sp1 - 1));
  req.version = std::string(line.substr(sp2 + 1));
  if (req.method.empty() || req.target.empty() || !req.version.starts_with("HTTP/1.")) {
    throw Error(ErrorCode::MalformedHttp, "bad request line");
  }
  if (!std::all_of(req.method.begin(), req.method.end(), is_token_char)) {
    throw Error(ErrorCode::MalformedHttp, "bad method");
  }
  req.headers = parse_header_lines(head.substr(eol + 2));
  return Parsed<HttpRequest>{std::move(req), *end};
}

std::optional<Parsed<HttpResponse>> parse_http_response(std::string_view input) {
  const auto end = find_head_end(input);
  if (!end) return std::nullopt;
  const std::string_view head = input.substr(0, *end);

  const auto eol = head.find("\r\n");
  const std::string_view line = head.substr(0, eol);
  const auto sp1 = line.find(' ');
  if (sp1 == std::string_view::npos || !line.starts_with("HTTP/1.")) {
    throw Error(ErrorCode::MalformedHttp, "bad status line");
  }
  const std::string_view rest = line.substr(sp1 + 1);
  const auto sp2 = std::find(rest.begin(), rest.end(), ' ');
  const std::string_view code = rest.substr(0, static_cast<std::size_t>(sp2 - rest.begin()));
  if (code.size() != 3 || !std::all_of(code.begin(), code.end(), [](char c) { return c >= '0' && c <= '9'; })) {
    throw Error(ErrorCode::MalformedHttp, "bad status code");
  }
  HttpResponse resp;
  resp.version = std::string(line.substr(0, sp1));
  resp.status = (code[0] - '0') * 100 + (code[1] - '0') * 10 + (code[2] - '0');
  resp.reason = code.size() < rest.size() ? std::string(rest.substr(4)) : std::string();
  if (eol != std::string_view::npos) resp.headers = parse_header_lines(head.substr(eol + 2));
  return Parsed<HttpResponse>{std::move(resp), *end};
}

std::optional<std::string> query_param(std::string_view target, std::string_view key) {
  const auto q = target.find('?');
  if (q == std::string_view::npos) return std::nullopt;
  std::string_view rest = target.substr(q + 1);
  while (!rest.empty()) {
    const auto amp = rest.find('&');
    const std::string_view pair = rest.substr(0, amp);
    const auto eq = pair.find('=');
    if (pair.substr(0, eq) == key) {
      return eq == std::string_view::npos ? std::string() : std::string(pair.substr(eq + 1));
    }
    if (amp == std::string_view::npos) break;
    rest.remove_prefix(amp + 1);
  }
  return std::nullopt;
}

std::string_view target_path(std::string_view target) noexcept { return target.substr(0, target.find('?')); }

std::string format_response(int status, std::string_view reason, const HeaderList &headers, std::string_view body) {
  std::string out = "HTTP/1.1 " + std::to_string(status) + " " + std::string(reason) + "\r\n";
  for (const auto &[n, v] : headers.entries()) out += n + ": " + v + "\r\n";
  out += "Content-Length: " + std::to_string(body.size()) + "\r\n\r\n";
  out += body;
  return out;
}

}  // namespace wsforge
