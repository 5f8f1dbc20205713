#pragma once

#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <chrono>
#include <cstdint>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

#include "wsforge/bytes.hpp"
#include "wsforge/error.hpp"
#include "wsforge/frame.hpp"
#include "wsforge/handshake.hpp"
#include "wsforge/net.hpp"

namespace wsforge::testing {

/// First port of `n` consecutive free loopback ports, from a per-process
/// random starting point so concurrent test binaries rarely collide.
inline std::uint16_t free_port_block(std::size_t n) {
  static std::mt19937 rng(static_cast<unsigned>(::getpid()) * 7919u);
  for (int attempt = 0; attempt < 200; ++attempt) {
    const auto base = static_cast<std::uint16_t>(20000 + rng() % 30000);
    bool ok = true;
    for (std::size_t i = 0; i < n && ok; ++i) ok = !port_in_use(static_cast<std::uint16_t>(base + i));
    if (ok) return base;
  }
  throw std::runtime_error("no free port block");
}

/// Code of the wsforge::Error thrown by `f`, or nullopt if none was thrown.
template <class F>
std::optional<ErrorCode> error_of(F &&f) {
  try {
    f();
  } catch (const Error &e) {
    return e.code();
  }
  return std::nullopt;
}

/// Waits for readability; false on timeout.
inline bool wait_readable(int fd, std::chrono::milliseconds timeout) {
  pollfd p{fd, POLLIN, 0};
  return ::poll(&p, 1, static_cast<int>(timeout.count())) > 0;
}

inline bool send_all(int fd, ByteView data) {
  while (!data.empty()) {
    const auto n = ::send(fd, data.data(), data.size(), MSG_NOSIGNAL);
    if (n <= 0) return false;
    data = data.subspan(static_cast<std::size_t>(n));
  }
  return true;
}

/// Sends `request` and reads until the server closes the connection.
inline std::string http_exchange(std::uint16_t port, std::string_view request,
                                 std::chrono::milliseconds timeout = std::chrono::milliseconds(5000)) {
  Fd fd = connect_tcp_blocking("127.0.0.1", port, timeout);
  if (!fd) throw std::runtime_error("connect failed");
  send_all(fd.get(), as_bytes(request));
  std::string out;
  char buf[4096];
  while (wait_readable(fd.get(), timeout)) {
    const auto n = ::recv(fd.get(), buf, sizeof buf, 0);
    if (n <= 0) break;
    out.append(buf, static_cast<std::size_t>(n));
  }
  return out;
}

/// Blocking client side of a WebSocket connection for tests.
class WsTestClient {
 public:
  explicit WsTestClient(std::uint16_t port, std::uint64_t seed = 1) : masks_(seed) {
    fd_ = connect_tcp_blocking("127.0.0.1", port, std::chrono::milliseconds(3000));
    if (!fd_) throw std::runtime_error("connect failed");
    std::mt19937_64 rng(seed);
    const std::string key = generate_key(rng);
    send_all(fd_.get(), as_bytes(build_upgrade_request("127.0.0.1:" + std::to_string(port), "/", key)));
    while (true) {
      if (!fill(std::chrono::milliseconds(3000))) throw std::runtime_error("handshake timed out");
      auto resp = validate_response(as_chars(in_), key);
      if (resp) {
        in_.erase(in_.begin(), in_.begin() + static_cast<std::ptrdiff_t>(resp->consumed));
        break;
      }
    }
  }

  void send(Opcode op, std::string_view payload, bool fin = true) {
    Frame f;
    f.fin = fin;
    f.opcode = op;
    f.mask_key = masks_.next();
    f.payload.assign(payload.begin(), payload.end());
    send_all(fd_.get(), encode_frame(f));
  }
  void send_text(std::string_view text) { send(Opcode::Text, text); }

  /// Next complete frame, or nullopt on timeout or close.
  std::optional<Frame> read_frame(std::chrono::milliseconds timeout = std::chrono::milliseconds(3000)) {
    while (true) {
      if (auto d = decode_frame(in_)) {
        in_.erase(in_.begin(), in_.begin() + static_cast<std::ptrdiff_t>(d->consumed));
        return d->frame;
      }
      if (!fill(timeout)) return std::nullopt;
    }
  }

  /// True once the peer has closed the TCP connection.
  bool wait_closed(std::chrono::milliseconds timeout = std::chrono::milliseconds(3000)) {
    const auto deadline = std::chrono::steady_clock::now() + timeout;
    char buf[4096];
    while (std::chrono::steady_clock::now() < deadline) {
      if (!wait_readable(fd_.get(), std::chrono::milliseconds(50))) continue;
      const auto n = ::recv(fd_.get(), buf, sizeof buf, 0);
      if (n <= 0) return true;
    }
    return false;
  }

  [[nodiscard]] int fd() const noexcept { return fd_.get(); }

 private:
  bool fill(std::chrono::milliseconds timeout) {
    if (!wait_readable(fd_.get(), timeout)) return false;
    char buf[65536];
    const auto n = ::recv(fd_.get(), buf, sizeof buf, 0);
    if (n <= 0) return false;
    in_.insert(in_.end(), buf, buf + n);
    return true;
  }

  Fd fd_;
  Bytes in_;
  MaskGenerator masks_;
};

}  // namespace wsforge::testing
