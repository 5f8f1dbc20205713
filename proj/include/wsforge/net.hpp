#pragma once

#include <sys/types.h>

#include <chrono>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <queue>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "wsforge/bytes.hpp"

namespace wsforge {

/// Owning file descriptor.
class Fd {
 public:
  Fd() = default;
  explicit Fd(int fd) noexcept : fd_(fd) {}
  Fd(Fd &&other) noexcept : fd_(other.release()) {}
  Fd &operator=(Fd &&other) noexcept {
    if (this != &other) reset(other.release());
    return *this;
  }
  Fd(const Fd &) = delete;
  Fd &operator=(const Fd &) = delete;
  ~Fd() { reset(); }

  [[nodiscard]] int get() const noexcept { return fd_; }
  [[nodiscard]] bool valid() const noexcept { return fd_ >= 0; }
  explicit operator bool() const noexcept { return valid(); }
  int release() noexcept {
    int fd = fd_;
    fd_ = -1;
    return fd;
  }
  void reset(int fd = -1) noexcept;

 private:
  int fd_ = -1;
};

void set_nonblocking(int fd);
void set_nodelay(int fd);

/// Loopback/any TCP listener. Throws PortInUse on EADDRINUSE.
Fd listen_tcp(std::uint16_t port, bool reuse_port = false, int backlog = 4096);

/// True if something already owns `port` on loopback.
bool port_in_use(std::uint16_t port);

/// Starts a non-blocking connect; completion is signalled by EPOLLOUT.
Fd connect_tcp(std::string_view host, std::uint16_t port);

/// Blocking connect with timeout; invalid Fd on failure.
Fd connect_tcp_blocking(std::string_view host, std::uint16_t port, std::chrono::milliseconds timeout);

/// Abstract-namespace unix socket listener (no filesystem entry).
Fd listen_unix(std::string_view name);

/// One request line to a unix control socket, one reply line back.
std::optional<std::string> control_request(std::string_view name, std::string_view line,
                                           std::chrono::milliseconds timeout = std::chrono::milliseconds(2000));

/// Same line-oriented exchange over TCP.
std::optional<std::string> tcp_line_request(std::uint16_t port, std::string_view line,
                                            std::chrono::milliseconds timeout = std::chrono::milliseconds(2000));

enum class IoStatus { Ok, WouldBlock, Closed, Error };

/// Appends available bytes to `buf` (at most `limit`). Ok means data arrived.
IoStatus read_available(int fd, Bytes &buf, std::size_t limit = 256 * 1024);

/// Outbound byte queue with partial-write bookkeeping.
class OutBuffer {
 public:
  void append(ByteView data) { data_.insert(data_.end(), data.begin(), data.end()); }
  void append(std::string_view s) { append(as_bytes(s)); }
  /// Writes as much as the socket accepts.
  IoStatus flush(int fd);
  [[nodiscard]] std::size_t pending() const noexcept { return data_.size() - offset_; }
  [[nodiscard]] bool empty() const noexcept { return pending() == 0; }

 private:
  Bytes data_;
  std::size_t offset_ = 0;
};

/// epoll reactor with a timer heap and optional signalfd integration.
class EventLoop {
 public:
  using Clock = std::chrono::steady_clock;
  using Handler = std::function<void(std::uint32_t events)>;
  using TimerId = std::uint64_t;

  EventLoop();
  EventLoop(const EventLoop &) = delete;
  EventLoop &operator=(const EventLoop &) = delete;

  void add(int fd, std::uint32_t events, Handler handler);
  void modify(int fd, std::uint32_t events);
  void remove(int fd);

  TimerId add_timer(Clock::time_point when, std::function<void()> fn);
  TimerId add_timer(std::chrono::nanoseconds delay, std::function<void()> fn) {
    return add_timer(Clock::now() + delay, std::move(fn));
  }
  void cancel_timer(TimerId id);

  /// Blocks `signals` for the process and routes them to `fn` on the loop.
  void on_signals(std::vector<int> signals, std::function<void(int)> fn);

  void run();
  /// One epoll wait plus due timers.
  void run_once(std::chrono::milliseconds max_wait);
  void stop() noexcept { stopped_ = true; }
  [[nodiscard]] bool stopped() const noexcept { return stopped_; }

 private:
  void fire_timers();

  Fd epoll_;
  Fd signal_fd_;
  bool stopped_ = false;
  std::unordered_map<int, std::shared_ptr<Handler>> handlers_;
  struct TimerEntry {
    Clock::time_point when;
    TimerId id;
    bool operator>(const TimerEntry &o) const noexcept { return when > o.when || (when == o.when && id > o.id); }
  };
  std::priority_queue<TimerEntry, std::vector<TimerEntry>, std::greater<>> timer_heap_;
  std::unordered_map<TimerId, std::function<void()>> timers_;
  TimerId next_timer_ = 1;
};

/// Line-oriented admin endpoint every cluster process exposes:
/// "PING" -> "PONG", "STATS" -> key=value pairs, "SHUTDOWN <grace_ms>".
class ControlServer {
 public:
  using StatsFn = std::function<std::string()>;
  /// Called with the grace period and a completion callback that sends the
  /// final reply and lets the process exit.
  using ShutdownFn = std::function<void(std::chrono::milliseconds, std::function<void(std::string)>)>;

  ControlServer(EventLoop &loop, std::string_view name, StatsFn stats, ShutdownFn shutdown);
  ~ControlServer();

 private:
  struct Client;
  void accept_clients();
  void handle_line(int fd, std::string line);
  void close_client(int fd);

  EventLoop &loop_;
  Fd listener_;
  StatsFn stats_;
  ShutdownFn shutdown_;
  std::map<int, std::unique_ptr<Client>> clients_;
};

/// Runs `body` in a forked child and returns its pid. The child exits with
/// body's return value and never returns to the caller.
pid_t fork_process(const std::function<int()> &body);

/// Waits up to `timeout` for `pid`; true if it exited (and was reaped).
bool wait_for_exit(pid_t pid, std::chrono::milliseconds timeout, int *status = nullptr);

void kill_and_reap(pid_t pid);

/// Parses "a=1 b=2" into a map.
std::map<std::string, std::string> parse_kv_line(std::string_view line);

}  // namespace wsforge
