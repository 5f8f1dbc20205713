#include "wsforge/comet.hpp"

#include <signal.h>
#include <sys/epoll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <memory>
#include <thread>
#include <vector>

#include "wsforge/error.hpp"
#include "wsforge/event.hpp"
#include "wsforge/frame.hpp"
#include "wsforge/http.hpp"
#include "wsforge/net.hpp"

namespace wsforge {

std::string_view to_string(Transport t) noexcept {
  switch (t) {
    case Transport::WebSocket: return "websocket";
    case Transport::Poll: return "poll";
    case Transport::LongPoll: return "long_poll";
  }
  return "unknown";
}

Transport parse_transport(std::string_view text) {
  for (Transport t : {Transport::WebSocket, Transport::Poll, Transport::LongPoll}) {
    if (to_string(t) == text) return t;
  }
  throw Error(ErrorCode::BadConfig, "unknown transport " + std::string(text));
}

std::string format_poll_request(std::string_view path, std::string_view sid, std::string_view host) {
  std::string out = "GET " + std::string(path) + "?sid=" + std::string(sid) + " HTTP/1.1\r\n";
  out += "Host: " + std::string(host) + "\r\n";
  out += "Connection: close\r\n\r\n";
  return out;
}

std::string format_post_request(std::string_view path, std::string_view sid, std::string_view host,
                                std::string_view body) {
  std::string out = "POST " + std::string(path) + "?sid=" + std::string(sid) + " HTTP/1.1\r\n";
  out += "Host: " + std::string(host) + "\r\n";
  out += "Connection: close\r\n";
  out += "Content-Length: " + std::to_string(body.size()) + "\r\n\r\n";
  out += body;
  return out;
}

std::string format_poll_response(std::string_view body) {
  HeaderList h;
  h.add("Content-Type", "application/octet-stream");
  h.add("Cache-Control", "no-cache");
  h.add("Connection", "close");
  return format_response(200, "OK", h, body);
}

HeaderProfile minimal_header_profile() {
  // A representative exchange: 8-character session id, loopback host, and a
  // two-digit Content-Length.
  const std::string request = format_poll_request("/lpoll", "00000001", "127.0.0.1:8001");
  const std::string body(20, 'x');
  const std::string response = format_poll_response(body);
  return {"minimal", request.size(), response.size() - body.size()};
}

HeaderProfile browser_realistic_header_profile() {
  // Only the 871-byte total is meaningful; the direction split is nominal.
  return {"browser_realistic", 621, 250};
}

std::size_t measure_per_message_bytes(Transport transport, std::size_t payload, const HeaderProfile &profile,
                                      bool masked) {
  if (transport == Transport::WebSocket) return frame_overhead(payload, masked) + payload;
  return profile.request_header_bytes + profile.response_header_bytes + payload;
}

PollReply SessionTable::serve_poll(const std::string &sid) {
  std::lock_guard lock(mu_);
  auto &s = sessions_[sid];
  if (s.pending.empty()) return {PollOutcome::Empty, {}};
  PollReply r{PollOutcome::Data, std::move(s.pending.front())};
  s.pending.pop_front();
  return r;
}

SessionTable::ParkId SessionTable::serve_long_poll(const std::string &sid, ParkCallback reply,
                                                   Clock::time_point deadline) {
  std::optional<Parked> released;
  PollReply immediate;
  bool answer_now = false;
  ParkId id = 0;
  {
    std::lock_guard lock(mu_);
    auto &s = sessions_[sid];
    if (s.parked) {
      released = std::move(s.parked);
      s.parked.reset();
    }
    if (!s.pending.empty()) {
      immediate = {PollOutcome::Data, std::move(s.pending.front())};
      s.pending.pop_front();
      answer_now = true;
    } else {
      id = next_id_++;
      s.parked = Parked{id, std::move(reply), deadline};
    }
  }
  if (released) released->reply({PollOutcome::Superseded, {}});
  if (answer_now) reply(std::move(immediate));
  return id;
}

void SessionTable::cancel(const std::string &sid, ParkId id) {
  std::lock_guard lock(mu_);
  auto it = sessions_.find(sid);
  if (it != sessions_.end() && it->second.parked && it->second.parked->id == id) it->second.parked.reset();
}

void SessionTable::publish(const std::string &sid, Bytes message) {
  std::optional<Parked> target;
  {
    std::lock_guard lock(mu_);
    auto &s = sessions_[sid];
    if (s.parked && s.pending.empty()) {
      target = std::move(s.parked);
      s.parked.reset();
    } else {
      s.pending.push_back(std::move(message));
    }
  }
  if (target) target->reply({PollOutcome::Data, std::move(message)});
}

std::size_t SessionTable::expire(Clock::time_point now) {
  std::vector<Parked> due;
  {
    std::lock_guard lock(mu_);
    for (auto &[sid, s] : sessions_) {
      if (s.parked && s.parked->deadline <= now) {
        due.push_back(std::move(*s.parked));
        s.parked.reset();
      }
    }
  }
  for (auto &p : due) p.reply({PollOutcome::Timeout, {}});
  return due.size();
}

std::optional<SessionTable::Clock::time_point> SessionTable::next_deadline() const {
  std::lock_guard lock(mu_);
  std::optional<Clock::time_point> best;
  for (const auto &[sid, s] : sessions_) {
    if (s.parked && (!best || s.parked->deadline < *best)) best = s.parked->deadline;
  }
  return best;
}

std::size_t SessionTable::pending(const std::string &sid) const {
  std::lock_guard lock(mu_);
  auto it = sessions_.find(sid);
  return it == sessions_.end() ? 0 : it->second.pending.size();
}

bool SessionTable::parked(const std::string &sid) const {
  std::lock_guard lock(mu_);
  auto it = sessions_.find(sid);
  return it != sessions_.end() && it->second.parked.has_value();
}

std::size_t SessionTable::session_count() const {
  std::lock_guard lock(mu_);
  return sessions_.size();
}

namespace {

struct HttpConn {
  Fd fd;
  Bytes in;
  OutBuffer out;
  bool responded = false;
  std::string parked_sid;
  SessionTable::ParkId park_id = 0;
};

class CometServer {
 public:
  explicit CometServer(const CometOptions &options) : options_(options), listener_(listen_tcp(options.port)) {
    state_.index = 0;
    loop_.add(listener_.get(), EPOLLIN, [this](std::uint32_t) { accept_all(); });
    control_ = std::make_unique<ControlServer>(
        loop_, options.control_name, [this] { return stats_line(); },
        [this](std::chrono::milliseconds, std::function<void(std::string)> done) {
          done(stats_line());
          loop_.stop();
        });
    loop_.on_signals({SIGTERM, SIGINT}, [this](int) { loop_.stop(); });
    schedule_expiry();
  }

  int run() {
    loop_.run();
    return 0;
  }

 private:
  std::string stats_line() const {
    auto s = state_.counters.snapshot(0);
    return "role=comet active_conns=" + std::to_string(conns_.size()) + " sessions=" +
           std::to_string(sessions_.session_count()) + " pings_received=" + std::to_string(s.pings_received) +
           " pongs_sent=" + std::to_string(s.pongs_sent) + " msgs_in=" + std::to_string(s.msgs_in) +
           " msgs_out=" + std::to_string(s.msgs_out) + " timeouts=" + std::to_string(timeouts_) +
           " drops=" + std::to_string(drops_);
  }

  void schedule_expiry() {
    loop_.add_timer(std::chrono::milliseconds(50), [this] {
      timeouts_ += sessions_.expire(SessionTable::Clock::now());
      schedule_expiry();
    });
  }

  void accept_all() {
    while (true) {
      const int fd = ::accept4(listener_.get(), nullptr, nullptr, SOCK_NONBLOCK | SOCK_CLOEXEC);
      if (fd < 0) return;
      set_nodelay(fd);
      auto c = std::make_unique<HttpConn>();
      c->fd.reset(fd);
      conns_.emplace(fd, std::move(c));
      loop_.add(fd, EPOLLIN | EPOLLRDHUP, [this, fd](std::uint32_t ev) { on_conn(fd, ev); });
    }
  }

  void on_conn(int fd, std::uint32_t ev) {
    auto it = conns_.find(fd);
    if (it == conns_.end()) return;
    HttpConn &c = *it->second;
    if (ev & EPOLLOUT) return flush(c);
    const auto st = read_available(fd, c.in);
    if (!c.responded && c.park_id == 0) {
      try {
        handle(c);
      } catch (const Error &) {
        respond(c, format_response(400, "Bad Request", {}, ""));
      }
    }
    if (!conns_.contains(fd)) return;
    if ((st == IoStatus::Closed || st == IoStatus::Error) && !c.responded) {
      // Client gave up on a parked request; leave its messages queued.
      if (c.park_id != 0) sessions_.cancel(c.parked_sid, c.park_id);
      close(fd);
    }
  }

  void handle(HttpConn &c) {
    auto parsed = parse_http_request(as_chars(c.in));
    if (!parsed) return;
    const HttpRequest &req = parsed->value;
    std::size_t body_len = 0;
    if (auto cl = req.headers.get("Content-Length")) body_len = std::stoul(std::string(*cl));
    if (c.in.size() < parsed->consumed + body_len) return;
    const ByteView body = ByteView(c.in).subspan(parsed->consumed, body_len);

    const auto path = target_path(req.target);
    const auto sid = query_param(req.target, "sid");
    if (!sid || sid->empty()) {
      respond(c, format_response(404, "Not Found", {}, ""));
      return;
    }
    if (path == "/poll" && req.method == "GET") {
      auto r = sessions_.serve_poll(*sid);
      respond(c, format_poll_response(as_chars(r.body)));
    } else if (path == "/lpoll" && req.method == "GET") {
      const int fd = c.fd.get();
      c.parked_sid = *sid;
      // Nonzero marks "in flight" until the table answers.
      c.park_id = ~SessionTable::ParkId{0};
      const auto id = sessions_.serve_long_poll(
          *sid,
          [this, fd](PollReply r) {
            auto it = conns_.find(fd);
            if (it == conns_.end()) return;
            respond(*it->second, format_poll_response(as_chars(r.body)));
          },
          SessionTable::Clock::now() + options_.hold_timeout);
      if (auto it = conns_.find(fd); it != conns_.end() && !it->second->responded) it->second->park_id = id;
    } else if (path == "/publish" && req.method == "POST") {
      sessions_.publish(*sid, Bytes(body.begin(), body.end()));
      respond(c, format_response(204, "No Content", {}, ""));
    } else if (path == "/emit" && req.method == "POST") {
      auto outcome = handle_event(state_, Message{MessageKind::Text, Bytes(body.begin(), body.end())});
      respond(c, format_response(204, "No Content", {}, ""));
      for (auto &reply : outcome.replies) sessions_.publish(*sid, std::move(reply.data));
    } else {
      respond(c, format_response(404, "Not Found", {}, ""));
    }
  }

  void respond(HttpConn &c, const std::string &bytes) {
    c.responded = true;
    c.out.append(bytes);
    flush(c);
  }

  void flush(HttpConn &c) {
    const int fd = c.fd.get();
    const auto st = c.out.flush(fd);
    if (st == IoStatus::Error) {
      ++drops_;
      return close(fd);
    }
    if (c.out.empty()) {
      if (c.responded) close(fd);
      return;
    }
    loop_.modify(fd, EPOLLOUT | EPOLLRDHUP);
  }

  void close(int fd) {
    loop_.remove(fd);
    conns_.erase(fd);
  }

  CometOptions options_;
  EventLoop loop_;
  Fd listener_;
  SessionTable sessions_;
  WorkerState state_;
  std::map<int, std::unique_ptr<HttpConn>> conns_;
  std::unique_ptr<ControlServer> control_;
  std::uint64_t timeouts_ = 0;
  std::uint64_t drops_ = 0;
};

std::atomic<int> g_comet_counter{0};

}  // namespace

int run_comet_server(const CometOptions &options) {
  CometServer server(options);
  return server.run();
}

CometServerProcess::CometServerProcess(CometOptions options) : options_(std::move(options)) {
  if (port_in_use(options_.port)) throw Error(ErrorCode::PortInUse, "port " + std::to_string(options_.port));
  if (options_.control_name.empty()) {
    options_.control_name =
        "wsforge." + std::to_string(::getpid()) + ".comet." + std::to_string(g_comet_counter.fetch_add(1));
  }
  const CometOptions opts = options_;
  pid_ = fork_process([&opts] { return run_comet_server(opts); });
  const auto deadline = std::chrono::steady_clock::now() + std::chrono::seconds(5);
  while (control_request(options_.control_name, "PING", std::chrono::milliseconds(200)) != "PONG") {
    if (std::chrono::steady_clock::now() > deadline || wait_for_exit(pid_, std::chrono::milliseconds(0))) {
      kill_and_reap(pid_);
      pid_ = -1;
      throw Error(ErrorCode::SpawnFailure, "comet server failed its health check");
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(10));
  }
}

CometServerProcess::~CometServerProcess() {
  if (pid_ > 0) kill_and_reap(pid_);
}

std::optional<std::string> CometServerProcess::stats() const { return control_request(options_.control_name, "STATS"); }

std::optional<std::string> CometServerProcess::shutdown() {
  if (pid_ <= 0) return std::nullopt;
  auto reply = control_request(options_.control_name, "SHUTDOWN 1000");
  if (!wait_for_exit(pid_, std::chrono::milliseconds(2000))) kill_and_reap(pid_);
  pid_ = -1;
  return reply;
}

}  // namespace wsforge
