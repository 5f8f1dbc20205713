#pragma once

#include <optional>
#include <random>
#include <string>
#include <string_view>

#include "wsforge/http.hpp"

namespace wsforge {

inline constexpr std::string_view kWebSocketGuid = "258EAFA5-E914-47DA-95CA-C5AB0DC85B11";

struct HandshakeRequest {
  std::string method;
  std::string target;
  HeaderList headers;
  std::optional<std::string> origin;
  std::string key;
};

struct HandshakeResponse {
  int status = 0;
  HeaderList headers;
  std::string accept;
};

/// Checks the upgrade tokens and key on an already parsed request.
/// Throws NotAnUpgrade when the request is plain HTTP, MalformedHttp when it
/// claims an upgrade but is unusable.
HandshakeRequest to_upgrade_request(const HttpRequest &req);

bool is_upgrade(const HttpRequest &req) noexcept;

std::optional<Parsed<HandshakeRequest>> parse_upgrade_request(std::string_view input);

/// base64(SHA-1(key + GUID)). Throws InvalidKey unless `key` is base64 of 16 bytes.
std::string compute_accept_key(std::string_view key);

/// 101 response. Header order is fixed: Upgrade, Connection, Sec-WebSocket-Accept.
std::string build_response(const HandshakeRequest &req);

/// Client side. nullopt while the head is incomplete; throws BadStatus,
/// BadAccept or MalformedHttp. `consumed` marks where frames begin.
std::optional<Parsed<HandshakeResponse>> validate_response(std::string_view input, std::string_view expected_key);

/// Fresh base64 nonce of 16 random bytes.
std::string generate_key(std::mt19937_64 &rng);

std::string build_upgrade_request(std::string_view host, std::string_view target, std::string_view key,
                                  std::optional<std::string_view> origin = std::nullopt);

}  // namespace wsforge
