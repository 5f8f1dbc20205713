#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>

#include "wsforge/frame.hpp"

namespace wsforge {

struct WorkerOptions {
  int index = 0;
  std::uint16_t port = 0;
  std::string control_name;
  std::optional<std::uint16_t> store_port;
  std::size_t max_conns = 10000;
  /// Queued outbound messages per connection before it is dropped.
  std::size_t send_queue_cap = 1024;
  std::size_t max_payload = kDefaultMaxPayload;
  std::size_t max_event_bytes = 64 * 1024;
  std::filesystem::path files_dir;
};

/// Serves WebSocket connections (handshake, framing, application events)
/// until SHUTDOWN or SIGTERM.
int run_worker(const WorkerOptions &options);

/// Static page served on a plain GET "/": opens a socket back to the
/// server, emits pings and shows the pong counter.
std::string_view index_page() noexcept;

}  // namespace wsforge
