#include "wsforge/worker.hpp"

#include <signal.h>
#include <sys/epoll.h>
#include <sys/socket.h>

#include <deque>
#include <iostream>
#include <map>
#include <memory>
#include <thread>

#include "wsforge/embedded.hpp"
#include "wsforge/error.hpp"
#include "wsforge/event.hpp"
#include "wsforge/handshake.hpp"
#include "wsforge/net.hpp"

namespace wsforge {

std::string_view index_page() noexcept { return embedded::kIndexHtml; }

namespace {

using Clock = std::chrono::steady_clock;

enum class Phase { Http, Open, Closing, Draining };

struct Connection {
  Fd fd;
  Phase phase = Phase::Http;
  Bytes in;
  /// Bytes of handshake / HTTP reply written before any frame.
  OutBuffer raw;
  std::deque<Bytes> queue;
  std::size_t front_offset = 0;
  Reassembler reassembler;
  bool counted = false;
  EventLoop::TimerId close_timer = 0;
};

/// Pipelined INCR client towards the store.
class StoreLink {
 public:
  void connect(std::uint16_t port) {
    for (int attempt = 0; attempt < 100 && !fd_; ++attempt) {
      fd_ = connect_tcp_blocking("127.0.0.1", port, std::chrono::milliseconds(200));
      if (!fd_) std::this_thread::sleep_for(std::chrono::milliseconds(30));
    }
    if (!fd_) throw Error(ErrorCode::SpawnFailure, "store unreachable on port " + std::to_string(port));
    set_nonblocking(fd_.get());
  }

  [[nodiscard]] bool connected() const noexcept { return fd_.valid(); }
  [[nodiscard]] int fd() const noexcept { return fd_.get(); }
  [[nodiscard]] std::uint64_t outstanding() const noexcept { return outstanding_; }
  [[nodiscard]] bool wants_write() const noexcept { return !out_.empty(); }

  void incr(std::string_view key) {
    out_.append("INCR ");
    out_.append(key);
    out_.append("\n");
    ++outstanding_;
  }

  /// Returns false once the link is unusable.
  bool on_events(std::uint32_t events) {
    if (events & (EPOLLIN | EPOLLHUP | EPOLLERR)) {
      Bytes buf;
      const auto st = read_available(fd_.get(), buf);
      for (auto b : buf) {
        if (b == '\n' && outstanding_ > 0) --outstanding_;
      }
      if (st == IoStatus::Closed || st == IoStatus::Error) {
        fd_.reset();
        return false;
      }
    }
    return flush();
  }

  bool flush() {
    if (!fd_) return false;
    if (out_.flush(fd_.get()) == IoStatus::Error) {
      fd_.reset();
      return false;
    }
    return true;
  }

 private:
  Fd fd_;
  OutBuffer out_;
  std::uint64_t outstanding_ = 0;
};

class Worker {
 public:
  explicit Worker(const WorkerOptions &options) : options_(options), listener_(listen_tcp(options.port)) {
    state_.index = options.index;
    state_.max_event_bytes = options.max_event_bytes;
    state_.files.load_directory(options.files_dir.empty() ? default_files_dir() : options.files_dir);
    if (options.store_port) {
      store_.connect(*options.store_port);
      loop_.add(store_.fd(), EPOLLIN, [this](std::uint32_t ev) { on_store(ev); });
    }
    loop_.add(listener_.get(), EPOLLIN, [this](std::uint32_t) { accept_all(); });
    control_ = std::make_unique<ControlServer>(
        loop_, options.control_name, [this] { return state_.counters.snapshot(state_.index).to_line(); },
        [this](std::chrono::milliseconds grace, std::function<void(std::string)> done) {
          begin_shutdown(grace, std::move(done));
        });
    loop_.on_signals({SIGTERM, SIGINT}, [this](int) { begin_shutdown(std::chrono::milliseconds(2000), {}); });
  }

  int run() {
    loop_.run();
    return 0;
  }

 private:
  void on_store(std::uint32_t ev) {
    if (!store_.on_events(ev)) {
      loop_.remove(store_.fd());
      return;
    }
    loop_.modify(store_.fd(), store_.wants_write() ? EPOLLIN | EPOLLOUT : EPOLLIN);
  }

  void accept_all() {
    while (true) {
      const int fd = ::accept4(listener_.get(), nullptr, nullptr, SOCK_NONBLOCK | SOCK_CLOEXEC);
      if (fd < 0) return;
      set_nodelay(fd);
      auto conn = std::make_unique<Connection>();
      conn->fd.reset(fd);
      conn->reassembler = Reassembler(options_.max_payload);
      conns_.emplace(fd, std::move(conn));
      loop_.add(fd, EPOLLIN | EPOLLRDHUP, [this, fd](std::uint32_t ev) { on_conn(fd, ev); });
    }
  }

  void on_conn(int fd, std::uint32_t ev) {
    auto it = conns_.find(fd);
    if (it == conns_.end()) return;
    Connection &c = *it->second;
    if (ev & EPOLLOUT) {
      if (!flush(c)) return drop(fd, false);
    }
    if (ev & (EPOLLIN | EPOLLHUP | EPOLLERR | EPOLLRDHUP)) {
      const auto st = read_available(fd, c.in);
      try {
        if (c.phase == Phase::Http) on_http(c);
        if (conns_.contains(fd) && (c.phase == Phase::Open || c.phase == Phase::Closing)) on_frames(c);
      } catch (const Error &e) {
        if (!conns_.contains(fd)) return;
        if (c.phase == Phase::Open) {
          start_close(c, e.code() == ErrorCode::InvalidUtf8     ? close_code::kInvalidPayload
                         : e.code() == ErrorCode::MessageTooBig ? close_code::kMessageTooBig
                                                                : close_code::kProtocolError);
          c.in.clear();
        } else if (c.phase == Phase::Http) {
          c.raw.append(format_response(400, "Bad Request", {}, ""));
          c.phase = Phase::Draining;
        } else {
          return drop(fd, false);
        }
      }
      if (!conns_.contains(fd)) return;
      if (st == IoStatus::Closed || st == IoStatus::Error) return close_conn(fd);
    }
    update_interest(c);
  }

  void on_http(Connection &c) {
    auto parsed = parse_http_request(as_chars(c.in));
    if (!parsed) return;
    const HttpRequest &req = parsed->value;
    if (!is_upgrade(req)) {
      if (req.method == "GET" && target_path(req.target) == "/") {
        HeaderList h;
        h.add("Content-Type", "text/html; charset=utf-8");
        h.add("Connection", "close");
        c.raw.append(format_response(200, "OK", h, index_page()));
      } else {
        HeaderList h;
        h.add("Connection", "close");
        c.raw.append(format_response(404, "Not Found", h, ""));
      }
      c.phase = Phase::Draining;
      return;
    }
    const HandshakeRequest hs = to_upgrade_request(req);
    c.in.erase(c.in.begin(), c.in.begin() + static_cast<std::ptrdiff_t>(parsed->consumed));
    c.raw.append(build_response(hs));
    c.phase = Phase::Open;
    if (state_.counters.active_conns.load() >= options_.max_conns || shutting_down_) {
      state_.counters.drops.fetch_add(1);
      start_close(c, close_code::kTryAgainLater);
      return;
    }
    c.counted = true;
    state_.counters.active_conns.fetch_add(1);
  }

  void on_frames(Connection &c) {
    // c may be destroyed by a drop inside the loop, so key off the fd value
    const int fd = c.fd.get();
    std::size_t pos = 0;
    while (conns_.contains(fd)) {
      auto decoded = decode_frame(ByteView(c.in).subspan(pos), options_.max_payload);
      if (!decoded) break;
      pos += decoded->consumed;
      Frame &f = decoded->frame;
      if (!f.mask_key) throw Error(ErrorCode::ProtocolViolation, "client frame without mask");
      switch (f.opcode) {
        case Opcode::Ping: {
          Frame pong;
          pong.opcode = Opcode::Pong;
          pong.payload = std::move(f.payload);
          enqueue(c, encode_frame(pong), true);
          break;
        }
        case Opcode::Pong:
          break;
        case Opcode::Close: {
          if (c.phase == Phase::Open) {
            const auto code = close_status(f).value_or(close_code::kNormal);
            enqueue(c, encode_frame(make_close_frame(code)), true);
          }
          c.phase = Phase::Draining;
          c.in.clear();
          return;
        }
        default: {
          if (c.phase != Phase::Open) break;
          auto msg = c.reassembler.push(std::move(f));
          if (msg) dispatch(c, *msg);
          break;
        }
      }
    }
    if (conns_.contains(fd)) c.in.erase(c.in.begin(), c.in.begin() + static_cast<std::ptrdiff_t>(pos));
  }

  void dispatch(Connection &c, const Message &msg) {
    auto outcome = handle_event(state_, msg);
    if (outcome.ping && store_.connected()) {
      store_.incr("pings:" + std::to_string(state_.index));
      store_.flush();
      loop_.modify(store_.fd(), store_.wants_write() ? EPOLLIN | EPOLLOUT : EPOLLIN);
    }
    for (const auto &reply : outcome.replies) {
      Frame f;
      f.opcode = reply.kind == MessageKind::Text ? Opcode::Text : Opcode::Binary;
      f.payload = reply.data;
      if (!enqueue(c, encode_frame(f), false)) return;
    }
    if (outcome.close) start_close(c, *outcome.close);
  }

  /// Control frames bypass the cap; data frames past it drop the connection.
  bool enqueue(Connection &c, Bytes frame, bool control) {
    if (!control && c.queue.size() >= options_.send_queue_cap) {
      drop(c.fd.get(), true);
      return false;
    }
    c.queue.push_back(std::move(frame));
    return true;
  }

  void start_close(Connection &c, std::uint16_t code) {
    if (c.phase == Phase::Closing || c.phase == Phase::Draining) return;
    enqueue(c, encode_frame(make_close_frame(code)), true);
    c.phase = Phase::Closing;
    const int fd = c.fd.get();
    c.close_timer = loop_.add_timer(std::chrono::seconds(1), [this, fd] {
      if (conns_.contains(fd)) close_conn(fd);
    });
  }

  bool flush(Connection &c) {
    if (c.raw.flush(c.fd.get()) == IoStatus::Error) return false;
    if (!c.raw.empty()) return true;
    while (!c.queue.empty()) {
      const Bytes &front = c.queue.front();
      const ssize_t n = ::send(c.fd.get(), front.data() + c.front_offset, front.size() - c.front_offset, MSG_NOSIGNAL);
      if (n < 0) {
        if (errno == EAGAIN || errno == EWOULDBLOCK) return true;
        if (errno == EINTR) continue;
        return false;
      }
      c.front_offset += static_cast<std::size_t>(n);
      if (c.front_offset == front.size()) {
        c.queue.pop_front();
        c.front_offset = 0;
      }
    }
    return true;
  }

  void update_interest(Connection &c) {
    const int fd = c.fd.get();
    if (!flush(c)) return drop(fd, false);
    const bool pending = !c.raw.empty() || !c.queue.empty();
    if (!pending && c.phase == Phase::Draining) return close_conn(fd);
    loop_.modify(fd, EPOLLIN | EPOLLRDHUP | (pending ? EPOLLOUT : 0u));
  }

  void drop(int fd, bool count) {
    if (count) state_.counters.drops.fetch_add(1);
    close_conn(fd);
  }

  void close_conn(int fd) {
    auto it = conns_.find(fd);
    if (it == conns_.end()) return;
    if (it->second->counted) state_.counters.active_conns.fetch_sub(1);
    if (it->second->close_timer) loop_.cancel_timer(it->second->close_timer);
    loop_.remove(fd);
    conns_.erase(it);
  }

  void begin_shutdown(std::chrono::milliseconds grace, std::function<void(std::string)> done) {
    if (done) shutdown_replies_.push_back(std::move(done));
    if (shutting_down_) return;
    shutting_down_ = true;
    shutdown_deadline_ = Clock::now() + grace;
    loop_.remove(listener_.get());
    listener_.reset();
    std::vector<int> fds;
    for (auto &[fd, c] : conns_) fds.push_back(fd);
    for (int fd : fds) {
      auto it = conns_.find(fd);
      if (it == conns_.end()) continue;
      Connection &c = *it->second;
      if (c.phase == Phase::Open) {
        start_close(c, close_code::kGoingAway);
        update_interest(c);
      } else if (c.phase == Phase::Http) {
        close_conn(fd);
      }
    }
    poll_shutdown();
  }

  void poll_shutdown() {
    const bool store_idle = !store_.connected() || (store_.outstanding() == 0 && !store_.wants_write());
    if ((conns_.empty() && store_idle) || Clock::now() >= shutdown_deadline_) {
      const auto line = state_.counters.snapshot(state_.index).to_line();
      for (auto &reply : shutdown_replies_) reply(line);
      loop_.stop();
      return;
    }
    loop_.add_timer(std::chrono::milliseconds(10), [this] { poll_shutdown(); });
  }

  WorkerOptions options_;
  EventLoop loop_;
  Fd listener_;
  WorkerState state_;
  StoreLink store_;
  std::map<int, std::unique_ptr<Connection>> conns_;
  std::unique_ptr<ControlServer> control_;
  bool shutting_down_ = false;
  Clock::time_point shutdown_deadline_;
  std::vector<std::function<void(std::string)>> shutdown_replies_;
};

}  // namespace

int run_worker(const WorkerOptions &options) {
  Worker worker(options);
  return worker.run();
}

}  // namespace wsforge
