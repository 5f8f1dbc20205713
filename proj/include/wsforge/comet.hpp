#pragma once

#include <sys/types.h>

#include <chrono>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>

#include "wsforge/bytes.hpp"

namespace wsforge {

enum class Transport { WebSocket, Poll, LongPoll };

std::string_view to_string(Transport t) noexcept;
Transport parse_transport(std::string_view text);

/// HTTP header cost of one request/response exchange.
struct HeaderProfile {
  std::string name;
  std::size_t request_header_bytes = 0;
  std::size_t response_header_bytes = 0;

  [[nodiscard]] std::size_t total() const noexcept { return request_header_bytes + response_header_bytes; }
};

/// Smallest legal "HTTP/1.1 200 OK\r\n\r\n"-style framing, used as a floor.
inline constexpr std::size_t kMinimalHttpFraming = 26;

/// Header bytes of this project's own long-poll request and response.
HeaderProfile minimal_header_profile();

/// 871 header bytes per exchange, the size of a typical browser exchange
/// with cookies and user agent.
HeaderProfile browser_realistic_header_profile();

/// Wire bytes to deliver one `payload`-byte message. WebSocket pays frame
/// overhead only; poll and long-poll pay one full HTTP exchange.
std::size_t measure_per_message_bytes(Transport transport, std::size_t payload, const HeaderProfile &profile,
                                      bool masked = false);

// Client-side request heads; shared with the profile measurement.
std::string format_poll_request(std::string_view path, std::string_view sid, std::string_view host);
std::string format_post_request(std::string_view path, std::string_view sid, std::string_view host,
                                std::string_view body);
/// Server response carrying `body` (possibly empty) and closing the connection.
std::string format_poll_response(std::string_view body);

enum class PollOutcome { Data, Empty, Timeout, Superseded };

struct PollReply {
  PollOutcome outcome = PollOutcome::Empty;
  Bytes body;
};

/// Per-session message queues and parked long-poll requests. Safe to call
/// from several threads; callbacks run outside the lock.
class SessionTable {
 public:
  using Clock = std::chrono::steady_clock;
  using ParkCallback = std::function<void(PollReply)>;
  using ParkId = std::uint64_t;

  /// Immediate answer: the oldest pending message, or an empty body.
  PollReply serve_poll(const std::string &sid);

  /// Answers at once when data is pending, otherwise parks `reply` until
  /// publish() or `deadline`. A previously parked request for the same
  /// session is released with Superseded.
  ParkId serve_long_poll(const std::string &sid, ParkCallback reply, Clock::time_point deadline);

  /// Withdraws a parked request whose connection went away.
  void cancel(const std::string &sid, ParkId id);

  void publish(const std::string &sid, Bytes message);

  /// Releases parked requests whose deadline passed. Returns how many.
  std::size_t expire(Clock::time_point now);

  [[nodiscard]] std::optional<Clock::time_point> next_deadline() const;
  [[nodiscard]] std::size_t pending(const std::string &sid) const;
  [[nodiscard]] bool parked(const std::string &sid) const;
  [[nodiscard]] std::size_t session_count() const;

 private:
  struct Parked {
    ParkId id;
    ParkCallback reply;
    Clock::time_point deadline;
  };
  struct Session {
    std::deque<Bytes> pending;
    std::optional<Parked> parked;
  };

  mutable std::mutex mu_;
  std::map<std::string, Session> sessions_;
  ParkId next_id_ = 1;
};

struct CometOptions {
  std::uint16_t port = 8001;
  std::string control_name;
  std::chrono::milliseconds hold_timeout{25000};
};

/// HTTP server exposing GET /poll?sid=, GET /lpoll?sid=, POST /publish?sid=
/// (raw publish hook) and POST /emit?sid= (application event whose replies
/// are published to the session). Every response closes its connection.
int run_comet_server(const CometOptions &options);

/// Forked comet server with health check; killed on destruction.
class CometServerProcess {
 public:
  explicit CometServerProcess(CometOptions options);
  CometServerProcess(const CometServerProcess &) = delete;
  CometServerProcess &operator=(const CometServerProcess &) = delete;
  ~CometServerProcess();

  [[nodiscard]] pid_t pid() const noexcept { return pid_; }
  [[nodiscard]] const CometOptions &options() const noexcept { return options_; }
  [[nodiscard]] std::optional<std::string> stats() const;
  /// Final STATS line.
  std::optional<std::string> shutdown();

 private:
  CometOptions options_;
  pid_t pid_ = -1;
};

}  // namespace wsforge
