#include "wsforge/handshake.hpp"

#include "wsforge/codec.hpp"
#include "wsforge/error.hpp"

namespace wsforge {

bool is_upgrade(const HttpRequest &req) noexcept {
  return req.headers.has_token("Upgrade", "websocket") && req.headers.has_token("Connection", "Upgrade");
}

HandshakeRequest to_upgrade_request(const HttpRequest &req) {
  if (!is_upgrade(req)) throw Error(ErrorCode::NotAnUpgrade, req.method + " " + req.target);
  if (req.method != "GET") throw Error(ErrorCode::MalformedHttp, "upgrade requires GET");
  const auto key = req.headers.get("Sec-WebSocket-Key");
  if (!key) throw Error(ErrorCode::MalformedHttp, "missing Sec-WebSocket-Key");
  const auto decoded = base64_decode(*key);
  if (!decoded || decoded->size() != 16) throw Error(ErrorCode::MalformedHttp, "Sec-WebSocket-Key is not 16 bytes");

  HandshakeRequest out;
  out.method = req.method;
  out.target = req.target;
  out.headers = req.headers;
  if (auto origin = req.headers.get("Origin")) out.origin = std::string(*origin);
  out.key = std::string(*key);
  return out;
}

std::optional<Parsed<HandshakeRequest>> parse_upgrade_request(std::string_view input) {
  auto parsed = parse_http_request(input);
  if (!parsed) return std::nullopt;
  return Parsed<HandshakeRequest>{to_upgrade_request(parsed->value), parsed->consumed};
}

std::string compute_accept_key(std::string_view key) {
  const auto decoded = base64_decode(key);
  if (!decoded || decoded->size() != 16) throw Error(ErrorCode::InvalidKey, std::string(key));
  std::string material(key);
  material += kWebSocketGuid;
  const auto digest = sha1(as_bytes(material));
  return base64_encode(digest);
}

std::string build_response(const HandshakeRequest &req) {
  std::string out = "HTTP/1.1 101 Switching Protocols\r\n";
  out += "Upgrade: websocket\r\n";
  out += "Connection: Upgrade\r\n";
  out += "Sec-WebSocket-Accept: " + compute_accept_key(req.key) + "\r\n";
  out += "\r\n";
  return out;
}

std::optional<Parsed<HandshakeResponse>> validate_response(std::string_view input, std::string_view expected_key) {
  auto parsed = parse_http_response(input);
  if (!parsed) return std::nullopt;
  const HttpResponse &resp = parsed->value;
  if (resp.status != 101) throw Error(ErrorCode::BadStatus, "status " + std::to_string(resp.status));
  if (!resp.headers.has_token("Upgrade", "websocket") || !resp.headers.has_token("Connection", "Upgrade")) {
    throw Error(ErrorCode::MalformedHttp, "response lacks upgrade headers");
  }
  const auto accept = resp.headers.get("Sec-WebSocket-Accept");
  if (!accept || *accept != compute_accept_key(expected_key)) {
    throw Error(ErrorCode::BadAccept, accept ? std::string(*accept) : std::string("<missing>"));
  }
  HandshakeResponse out;
  out.status = resp.status;
  out.headers = resp.headers;
  out.accept = std::string(*accept);
  return Parsed<HandshakeResponse>{std::move(out), parsed->consumed};
}

std::string generate_key(std::mt19937_64 &rng) {
  Bytes nonce(16);
  for (std::size_t i = 0; i < nonce.size(); i += 8) {
    const auto v = rng();
    for (std::size_t k = 0; k < 8; ++k) nonce[i + k] = static_cast<std::uint8_t>(v >> (8 * k));
  }
  return base64_encode(nonce);
}

std::string build_upgrade_request(std::string_view host, std::string_view target, std::string_view key,
                                  std::optional<std::string_view> origin) {
  std::string out = "GET " + std::string(target) + " HTTP/1.1\r\n";
  out += "Host: " + std::string(host) + "\r\n";
  out += "Upgrade: websocket\r\n";
  out += "Connection: Upgrade\r\n";
  out += "Sec-WebSocket-Key: " + std::string(key) + "\r\n";
  out += "Sec-WebSocket-Version: 13\r\n";
  if (origin) out += "Origin: " + std::string(*origin) + "\r\n";
  out += "\r\n";
  return out;
}

}  // namespace wsforge
