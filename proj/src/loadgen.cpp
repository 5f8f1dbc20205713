#include "wsforge/loadgen.hpp"

#include <fcntl.h>
#include <sys/epoll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <deque>
#include <fstream>
#include <limits>
#include <memory>
#include <nlohmann/json.hpp>
#include <sstream>
#include <unordered_map>

#include "wsforge/cluster.hpp"
#include "wsforge/embedded.hpp"
#include "wsforge/error.hpp"
#include "wsforge/event.hpp"
#include "wsforge/frame.hpp"
#include "wsforge/handshake.hpp"
#include "wsforge/http.hpp"
#include "wsforge/net.hpp"

namespace wsforge {
namespace {

using Clock = std::chrono::steady_clock;

std::string_view to_string(JitterLaw j) noexcept {
  return j == JitterLaw::Uniform0To5s ? "uniform_0_to_5s" : "uniform_pm_fraction";
}

JitterLaw parse_jitter(std::string_view s) {
  if (s == "uniform_0_to_5s") return JitterLaw::Uniform0To5s;
  if (s == "uniform_pm_fraction") return JitterLaw::UniformPmFraction;
  throw Error(ErrorCode::BadConfig, "unknown ping_jitter '" + std::string(s) + "'");
}

std::string_view to_string(PayloadKind p) noexcept {
  return p == PayloadKind::RandomNumber ? "random_number" : "file_request";
}

PayloadKind parse_payload(std::string_view s) {
  if (s == "random_number") return PayloadKind::RandomNumber;
  if (s == "file_request") return PayloadKind::FileRequest;
  throw Error(ErrorCode::BadConfig, "unknown payload '" + std::string(s) + "'");
}

std::size_t count_value(const KeyValues &kv, const std::string &key, std::size_t fallback) {
  const auto v = kv_int(kv, key, static_cast<std::int64_t>(fallback));
  if (v < 0) throw Error(ErrorCode::BadConfig, key + " must not be negative");
  return static_cast<std::size_t>(v);
}

const std::map<std::string, KeyValues> &preset_table() {
  static const auto table = parse_sections(embedded::kPresets);
  return table;
}

const KeyValues &preset_section(std::string_view name) {
  const auto &table = preset_table();
  auto it = table.find(std::string(name));
  if (it == table.end()) {
    std::string known;
    for (const auto &[n, kv] : table) known += (known.empty() ? "" : ", ") + n;
    throw Error(ErrorCode::UnknownPreset, "unknown preset '" + std::string(name) + "' (known: " + known + ")");
  }
  return it->second;
}

double seconds_since(Clock::time_point t0, Clock::time_point t) {
  return std::chrono::duration<double>(t - t0).count();
}

void bump(std::vector<std::uint64_t> &series, std::size_t index, std::uint64_t by = 1) {
  if (series.size() <= index) series.resize(index + 1, 0);
  series[index] += by;
}

/// Number of connections the whole run has opened after `ticks` ticks.
std::size_t cumulative_target(const Scenario &s, std::size_t ticks) {
  const std::size_t total = ticks * s.new_conns_per_tick;
  return s.max_total_conns ? std::min(total, *s.max_total_conns) : total;
}

/// Shared bookkeeping for both client kinds: tick ramp, ping schedule,
/// reply matching, drain and the final report.
class ClientBase {
 public:
  ClientBase(const Scenario &s, int proc_index)
      : s_(s),
        proc_(proc_index),
        rng_(s.seed * 0x9E3779B97F4A7C15ULL + static_cast<std::uint64_t>(proc_index) + 1),
        masks_(rng_()) {
    report_.proc_index = proc_index;
    report_.pid = ::getpid();
  }
  virtual ~ClientBase() = default;

  ProcReport run() {
    t0_ = Clock::now();
    end_ = t0_ + std::chrono::duration_cast<Clock::duration>(std::chrono::duration<double>(s_.duration));
    schedule_tick(0);
    loop_.add_timer(end_, [this] { begin_drain(); });
    loop_.run();
    finish_series();
    return report_;
  }

 protected:
  struct Session {
    std::size_t id = 0;
    bool established = false;
    bool dropped = false;
    bool closed = false;
    std::deque<Clock::time_point> outstanding;
    EventLoop::TimerId ping_timer = 0;
  };

  virtual void open_session(std::size_t id) = 0;
  virtual void send_request(Session &sess, std::string_view event_text) = 0;
  /// Closes everything; called once the drain is over.
  virtual void close_all() = 0;

  [[nodiscard]] bool finishing() const noexcept { return finishing_; }

  void on_established(Session &sess) {
    sess.established = true;
    ++report_.established;
    ++open_now_;
    report_.peak_open = std::max<std::uint64_t>(report_.peak_open, open_now_);
    if (s_.saturate) {
      fire_ping(sess);
    } else {
      arm_ping(sess);
    }
  }

  /// A reply for the oldest outstanding request on `sess`.
  void on_reply(Session &sess) {
    if (sess.outstanding.empty()) return;
    const auto now = Clock::now();
    const double ms = std::chrono::duration<double, std::milli>(now - sess.outstanding.front()).count();
    sess.outstanding.pop_front();
    --outstanding_total_;
    ++report_.pongs_received;
    report_.rtt_sum_ms += ms;
    report_.rtt.add(ms);
    bump(report_.pongs_per_second, static_cast<std::size_t>(seconds_since(t0_, now)));
    if (s_.saturate && !finishing_) fire_ping(sess);
    maybe_finish_drain();
  }

  /// The server or network lost the session before the run ended.
  void on_lost(Session &sess) {
    if (sess.closed) return;
    sess.closed = true;
    if (sess.ping_timer != 0) loop_.cancel_timer(sess.ping_timer);
    sess.ping_timer = 0;
    outstanding_total_ -= sess.outstanding.size();
    sess.outstanding.clear();
    if (sess.established) --open_now_;
    if (!closing_ && !sess.dropped) {
      sess.dropped = true;
      ++report_.dropped;
    }
    maybe_finish_drain();
  }

  /// Orderly end of a session during shutdown.
  void on_closed(Session &sess) {
    if (sess.closed) return;
    sess.closed = true;
    if (sess.established) --open_now_;
    outstanding_total_ -= sess.outstanding.size();
    sess.outstanding.clear();
  }

  void count_out(std::size_t n) noexcept { report_.bytes_out += n; }
  void count_in(std::size_t n) noexcept { report_.bytes_in += n; }

  std::string next_event_text() {
    if (s_.payload == PayloadKind::FileRequest) return encode_event({"getfile", s_.file_name, std::nullopt});
    std::uniform_int_distribution<std::int64_t> dist(0, 1'000'000'000);
    return encode_event({"ping", dist(rng_), std::nullopt});
  }

  const Scenario &s_;
  int proc_;
  std::mt19937_64 rng_;
  MaskGenerator masks_;
  EventLoop loop_;
  ProcReport report_;
  Clock::time_point t0_;
  Clock::time_point end_;
  std::unordered_map<std::size_t, std::unique_ptr<Session>> sessions_;

  Session &new_session(std::size_t id) {
    auto sess = std::make_unique<Session>();
    sess->id = id;
    auto &ref = *sess;
    sessions_[id] = std::move(sess);
    return ref;
  }

 private:
  void schedule_tick(std::size_t k) {
    const auto when = t0_ + std::chrono::duration_cast<Clock::duration>(
                                std::chrono::duration<double>(s_.tick_period * static_cast<double>(k)));
    if (when >= end_ && k > 0) return;
    loop_.add_timer(when, [this, k] {
      if (finishing_) return;
      const std::size_t before = share_for_proc(cumulative_target(s_, k), s_.n_client_procs, proc_);
      const std::size_t after = share_for_proc(cumulative_target(s_, k + 1), s_.n_client_procs, proc_);
      const auto sec = static_cast<std::size_t>(seconds_since(t0_, Clock::now()));
      for (std::size_t i = before; i < after; ++i) {
        ++report_.attempted;
        bump(attempted_at_, sec);
        open_session(i);
      }
      schedule_tick(k + 1);
    });
  }

  void arm_ping(Session &sess) {
    const auto delay = draw_ping_interval(s_, rng_);
    const std::size_t id = sess.id;
    sess.ping_timer = loop_.add_timer(delay, [this, id] {
      auto it = sessions_.find(id);
      if (it == sessions_.end()) return;
      it->second->ping_timer = 0;
      fire_ping(*it->second);
      if (!s_.saturate && !it->second->closed && !finishing_) arm_ping(*it->second);
    });
  }

  void fire_ping(Session &sess) {
    if (finishing_ || sess.closed || Clock::now() >= end_) return;
    const std::string text = next_event_text();
    sess.outstanding.push_back(Clock::now());
    ++outstanding_total_;
    ++report_.pings_sent;
    send_request(sess, text);
  }

  void begin_drain() {
    finishing_ = true;
    for (auto &[id, sess] : sessions_) {
      if (sess->ping_timer != 0) loop_.cancel_timer(sess->ping_timer);
      sess->ping_timer = 0;
    }
    const auto deadline = Clock::now() + std::chrono::duration_cast<Clock::duration>(
                                             std::chrono::duration<double>(s_.drain));
    loop_.add_timer(deadline, [this] { end_run(); });
    maybe_finish_drain();
  }

  void maybe_finish_drain() {
    if (finishing_ && outstanding_total_ == 0 && !closing_) {
      // Defer so the caller's stack unwinds before sessions are torn down.
      loop_.add_timer(std::chrono::nanoseconds(0), [this] { end_run(); });
    }
  }

  void end_run() {
    if (closing_) return;
    closing_ = true;
    for (auto &[id, sess] : sessions_) {
      // Still connecting or handshaking when time ran out: never got going.
      if (!sess->established && !sess->dropped && !sess->closed) {
        sess->dropped = true;
        ++report_.dropped;
      }
    }
    close_all();
  }

  void finish_series() {
    std::uint64_t running = 0;
    report_.attempted_by_second.clear();
    const auto seconds = static_cast<std::size_t>(std::ceil(s_.duration));
    for (std::size_t i = 0; i < std::max(seconds, attempted_at_.size()); ++i) {
      running += i < attempted_at_.size() ? attempted_at_[i] : 0;
      report_.attempted_by_second.push_back(running);
    }
  }

  bool finishing_ = false;
  bool closing_ = false;
  std::uint64_t outstanding_total_ = 0;
  std::uint64_t open_now_ = 0;
  std::vector<std::uint64_t> attempted_at_;
};

class WsClient final : public ClientBase {
 public:
  using ClientBase::ClientBase;

 private:
  enum class Phase { Connecting, Handshake, Open, Closing };

  struct Conn {
    Fd fd;
    Phase phase = Phase::Connecting;
    std::string key;
    Bytes in;
    OutBuffer out;
  };

  void open_session(std::size_t id) override {
    Session &sess = new_session(id);
    Fd fd;
    try {
      fd = connect_tcp(s_.host, s_.port);
    } catch (const Error &) {
      on_lost(sess);
      return;
    }
    const int raw = fd.get();
    auto c = std::make_unique<Conn>();
    c->fd = std::move(fd);
    c->key = generate_key(rng_);
    conns_[id] = std::move(c);
    by_fd_[raw] = id;
    loop_.add(raw, EPOLLOUT | EPOLLIN | EPOLLRDHUP, [this, id](std::uint32_t ev) { on_io(id, ev); });
  }

  void send_request(Session &sess, std::string_view event_text) override {
    auto it = conns_.find(sess.id);
    if (it == conns_.end()) return;
    Frame f;
    f.opcode = Opcode::Text;
    f.mask_key = masks_.next();
    f.payload.assign(event_text.begin(), event_text.end());
    send_frame(sess.id, *it->second, f);
  }

  void close_all() override {
    for (auto &[id, c] : conns_) {
      if (c->phase == Phase::Open) {
        Frame f = make_close_frame(close_code::kNormal, "");
        f.mask_key = masks_.next();
        c->phase = Phase::Closing;
        send_frame(id, *c, f);
      }
    }
    std::vector<std::size_t> idle;
    for (auto &[id, c] : conns_) {
      if (c->phase != Phase::Closing) idle.push_back(id);
    }
    for (auto id : idle) drop_conn(id, false);
    if (conns_.empty()) return loop_.stop();
    // Servers that never answer our close frame are cut off after a second.
    loop_.add_timer(std::chrono::seconds(1), [this] {
      std::vector<std::size_t> left;
      for (auto &[id, c] : conns_) left.push_back(id);
      for (auto id : left) drop_conn(id, false);
      loop_.stop();
    });
  }

  void send_frame(std::size_t id, Conn &c, const Frame &f) {
    const Bytes wire = encode_frame(f);
    count_out(wire.size());
    c.out.append(wire);
    flush(id, c);
  }

  void flush(std::size_t id, Conn &c) {
    if (c.phase == Phase::Connecting) return;
    if (c.out.flush(c.fd.get()) == IoStatus::Error) return drop_conn(id, true);
    loop_.modify(c.fd.get(), c.out.empty() ? (EPOLLIN | EPOLLRDHUP) : (EPOLLIN | EPOLLOUT | EPOLLRDHUP));
  }

  void on_io(std::size_t id, std::uint32_t ev) {
    auto it = conns_.find(id);
    if (it == conns_.end()) return;
    Conn &c = *it->second;
    if (c.phase == Phase::Connecting) {
      if (!(ev & (EPOLLOUT | EPOLLERR | EPOLLHUP))) return;
      int err = 0;
      socklen_t len = sizeof err;
      ::getsockopt(c.fd.get(), SOL_SOCKET, SO_ERROR, &err, &len);
      if (err != 0 || (ev & EPOLLERR)) return drop_conn(id, true);
      set_nodelay(c.fd.get());
      c.phase = Phase::Handshake;
      const std::string host = s_.host + ":" + std::to_string(s_.port);
      const std::string req = build_upgrade_request(host, "/", c.key);
      count_out(req.size());
      c.out.append(req);
      flush(id, c);
      return;
    }
    if (ev & EPOLLOUT) {
      flush(id, c);
      if (!conns_.contains(id)) return;
    }
    if (!(ev & (EPOLLIN | EPOLLRDHUP | EPOLLHUP | EPOLLERR))) return;
    const std::size_t before = c.in.size();
    const auto st = read_available(c.fd.get(), c.in);
    count_in(c.in.size() - before);
    if (!process_input(id, c)) return;
    if (st == IoStatus::Closed || st == IoStatus::Error) drop_conn(id, c.phase != Phase::Closing);
  }

  /// False once the connection has been torn down.
  bool process_input(std::size_t id, Conn &c) {
    std::size_t offset = 0;
    if (c.phase == Phase::Handshake) {
      try {
        auto resp = validate_response(as_chars(c.in), c.key);
        if (!resp) return true;
        offset = resp->consumed;
      } catch (const Error &) {
        drop_conn(id, true);
        return false;
      }
      c.phase = Phase::Open;
      on_established(*sessions_.at(id));
      if (!conns_.contains(id)) return false;
    }
    while (offset < c.in.size()) {
      std::optional<DecodedFrame> d;
      try {
        d = decode_frame(ByteView(c.in).subspan(offset), s_.payload == PayloadKind::FileRequest
                                                              ? kDefaultMaxPayload
                                                              : std::size_t{1} << 20);
      } catch (const Error &) {
        drop_conn(id, true);
        return false;
      }
      if (!d) break;
      offset += d->consumed;
      if (!handle_frame(id, c, d->frame)) return false;
    }
    c.in.erase(c.in.begin(), c.in.begin() + static_cast<std::ptrdiff_t>(offset));
    return true;
  }

  bool handle_frame(std::size_t id, Conn &c, const Frame &f) {
    Session &sess = *sessions_.at(id);
    switch (f.opcode) {
      case Opcode::Text:
      case Opcode::Binary:
        // Servers in this project never fragment replies.
        if (f.opcode == Opcode::Binary || is_reply_event(f.payload)) on_reply(sess);
        // A closed-loop reply can trigger a send that tears the connection down.
        return conns_.contains(id);
      case Opcode::Ping: {
        Frame pong;
        pong.opcode = Opcode::Pong;
        pong.mask_key = masks_.next();
        pong.payload = f.payload;
        send_frame(id, c, pong);
        return conns_.contains(id);
      }
      case Opcode::Close:
        if (c.phase == Phase::Closing) {
          drop_conn(id, false);
        } else {
          // Server-initiated close: echo it, but the session counts as dropped.
          Frame echo = make_close_frame(close_status(f).value_or(close_code::kNormal), "");
          echo.mask_key = masks_.next();
          send_frame(id, c, echo);
          drop_conn(id, true);
        }
        return false;
      default:
        return true;
    }
  }

  static bool is_reply_event(const Bytes &payload) {
    auto ev = decode_event(as_chars(payload));
    return ev && (ev->e == "pong" || ev->e == "nofile");
  }

  void drop_conn(std::size_t id, bool lost) {
    auto it = conns_.find(id);
    if (it == conns_.end()) return;
    if (auto s = sessions_.find(id); s != sessions_.end()) {
      if (lost) {
        on_lost(*s->second);
      } else {
        on_closed(*s->second);
      }
    }
    // Best effort: push out any queued close frame before the fd goes.
    if (!it->second->out.empty()) it->second->out.flush(it->second->fd.get());
    by_fd_.erase(it->second->fd.get());
    loop_.remove(it->second->fd.get());
    conns_.erase(it);
    if (finishing() && conns_.empty()) loop_.stop();
  }

  std::unordered_map<std::size_t, std::unique_ptr<Conn>> conns_;
  std::unordered_map<int, std::size_t> by_fd_;
};

/// Long-poll client: each session keeps one parked GET /lpoll open and
/// sends each request as a separate POST /emit.
class LongPollClient final : public ClientBase {
 public:
  using ClientBase::ClientBase;

 private:
  enum class Kind { Poll, Emit };

  struct Exchange {
    Fd fd;
    std::size_t session = 0;
    Kind kind = Kind::Poll;
    bool connected = false;
    Bytes in;
    OutBuffer out;
  };

  std::string sid_for(std::size_t id) const {
    return "p" + std::to_string(proc_) + "c" + std::to_string(id) + "s" + std::to_string(s_.seed);
  }

  void open_session(std::size_t id) override {
    new_session(id);
    start_exchange(id, Kind::Poll, "");
  }

  void send_request(Session &sess, std::string_view event_text) override {
    start_exchange(sess.id, Kind::Emit, event_text);
  }

  void close_all() override {
    std::vector<int> fds;
    for (auto &[fd, ex] : exchanges_) fds.push_back(fd);
    for (int fd : fds) end_exchange(fd);
    for (auto &[id, sess] : sessions_) on_closed(*sess);
    loop_.stop();
  }

  void start_exchange(std::size_t id, Kind kind, std::string_view body) {
    Fd fd;
    try {
      fd = connect_tcp(s_.host, s_.port);
    } catch (const Error &) {
      if (auto s = sessions_.find(id); s != sessions_.end()) on_lost(*s->second);
      return;
    }
    auto ex = std::make_unique<Exchange>();
    ex->session = id;
    ex->kind = kind;
    const std::string host = s_.host + ":" + std::to_string(s_.port);
    const std::string req = kind == Kind::Poll ? format_poll_request("/lpoll", sid_for(id), host)
                                               : format_post_request("/emit", sid_for(id), host, body);
    count_out(req.size());
    ex->out.append(req);
    const int raw = fd.get();
    ex->fd = std::move(fd);
    exchanges_[raw] = std::move(ex);
    loop_.add(raw, EPOLLOUT | EPOLLIN | EPOLLRDHUP, [this, raw](std::uint32_t ev) { on_io(raw, ev); });
  }

  void on_io(int fd, std::uint32_t ev) {
    auto it = exchanges_.find(fd);
    if (it == exchanges_.end()) return;
    Exchange &ex = *it->second;
    if (!ex.connected) {
      if (!(ev & (EPOLLOUT | EPOLLERR | EPOLLHUP))) return;
      int err = 0;
      socklen_t len = sizeof err;
      ::getsockopt(fd, SOL_SOCKET, SO_ERROR, &err, &len);
      if (err != 0 || (ev & EPOLLERR)) return fail(fd);
      ex.connected = true;
      set_nodelay(fd);
      Session &sess = *sessions_.at(ex.session);
      if (!sess.established && ex.kind == Kind::Poll) {
        on_established(sess);
        if (!exchanges_.contains(fd)) return;
      }
    }
    if (!ex.out.empty()) {
      if (ex.out.flush(fd) == IoStatus::Error) return fail(fd);
      loop_.modify(fd, ex.out.empty() ? (EPOLLIN | EPOLLRDHUP) : (EPOLLIN | EPOLLOUT | EPOLLRDHUP));
    }
    if (!(ev & (EPOLLIN | EPOLLRDHUP | EPOLLHUP))) return;
    const std::size_t before = ex.in.size();
    const auto st = read_available(fd, ex.in);
    count_in(ex.in.size() - before);
    if (st == IoStatus::Error) return fail(fd);
    if (st == IoStatus::Closed) complete(fd);
  }

  /// The server closed the connection; the response is complete.
  void complete(int fd) {
    auto node = exchanges_.extract(fd);
    loop_.remove(fd);
    Exchange &ex = *node.mapped();
    auto sit = sessions_.find(ex.session);
    if (sit == sessions_.end() || sit->second->closed) return;
    Session &sess = *sit->second;
    std::optional<Parsed<HttpResponse>> resp;
    try {
      resp = parse_http_response(as_chars(ex.in));
    } catch (const Error &) {
    }
    if (!resp) return on_lost(sess);
    const int status = resp->value.status;
    if (ex.kind == Kind::Emit) {
      if (status != 204) on_lost(sess);
      return;
    }
    if (status != 200) return on_lost(sess);
    if (ex.in.size() > resp->consumed) on_reply(sess);
    if (!sess.closed && !(finishing() && sess.outstanding.empty())) start_exchange(sess.id, Kind::Poll, "");
  }

  void fail(int fd) {
    auto it = exchanges_.find(fd);
    if (it == exchanges_.end()) return;
    const std::size_t id = it->second->session;
    end_exchange(fd);
    if (auto s = sessions_.find(id); s != sessions_.end()) on_lost(*s->second);
  }

  void end_exchange(int fd) {
    loop_.remove(fd);
    exchanges_.erase(fd);
  }

  std::unordered_map<int, std::unique_ptr<Exchange>> exchanges_;
};

nlohmann::json series_json(const std::vector<std::uint64_t> &v) { return nlohmann::json(v); }

void write_all(int fd, std::string_view data) {
  while (!data.empty()) {
    const auto n = ::write(fd, data.data(), data.size());
    if (n <= 0) {
      if (n < 0 && errno == EINTR) continue;
      return;
    }
    data.remove_prefix(static_cast<std::size_t>(n));
  }
}

std::string read_all(int fd) {
  std::string out;
  char buf[65536];
  while (true) {
    const auto n = ::read(fd, buf, sizeof buf);
    if (n < 0 && errno == EINTR) continue;
    if (n <= 0) break;
    out.append(buf, static_cast<std::size_t>(n));
  }
  return out;
}

std::string fmt_double(double v) {
  std::ostringstream ss;
  ss.precision(6);
  ss << v;
  return ss.str();
}

std::ofstream open_out(const std::filesystem::path &path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  return out;
}

}  // namespace

void Scenario::validate() const {
  if (!(duration > 0)) throw Error(ErrorCode::BadConfig, "duration must be > 0");
  if (new_conns_per_tick < 1) throw Error(ErrorCode::BadConfig, "new_conns_per_tick must be >= 1");
  if (!(tick_period > 0)) throw Error(ErrorCode::BadConfig, "tick_period must be > 0");
  if (!(ping_mean_period > 0)) throw Error(ErrorCode::BadConfig, "ping_mean_period must be > 0");
  if (ping_jitter == JitterLaw::UniformPmFraction && !(jitter_fraction >= 0 && jitter_fraction < 1)) {
    throw Error(ErrorCode::BadConfig, "jitter_fraction must be in [0, 1)");
  }
  if (n_client_procs < 1) throw Error(ErrorCode::BadConfig, "n_client_procs must be >= 1");
  if (payload == PayloadKind::FileRequest && file_name.empty()) {
    throw Error(ErrorCode::BadConfig, "file_request needs a file_name");
  }
  if (transport == Transport::Poll) {
    throw Error(ErrorCode::BadConfig, "the load generator drives websocket and long_poll transports only");
  }
  if (drain < 0) throw Error(ErrorCode::BadConfig, "drain must be >= 0");
}

Scenario Scenario::from_key_values(const KeyValues &kv) {
  Scenario s;
  s.name = kv_string(kv, "name", s.name);
  s.duration = kv_double(kv, "duration", s.duration);
  s.new_conns_per_tick = count_value(kv, "new_conns_per_tick", s.new_conns_per_tick);
  s.tick_period = kv_double(kv, "tick_period", s.tick_period);
  s.ping_mean_period = kv_double(kv, "ping_mean_period", s.ping_mean_period);
  s.ping_jitter = parse_jitter(kv_string(kv, "ping_jitter", std::string(to_string(s.ping_jitter))));
  s.jitter_fraction = kv_double(kv, "jitter_fraction", s.jitter_fraction);
  s.payload = parse_payload(kv_string(kv, "payload", std::string(to_string(s.payload))));
  s.file_name = kv_string(kv, "file_name", s.file_name);
  s.n_client_procs = count_value(kv, "n_client_procs", s.n_client_procs);
  s.host = kv_string(kv, "host", s.host);
  const auto port = kv_int(kv, "port", s.port);
  if (port < 1 || port > 65535) throw Error(ErrorCode::BadConfig, "port out of range");
  s.port = static_cast<std::uint16_t>(port);
  if (const auto cap = count_value(kv, "max_total_conns", 0); cap > 0) s.max_total_conns = cap;
  s.transport = parse_transport(kv_string(kv, "transport", std::string(to_string(s.transport))));
  s.saturate = kv_bool(kv, "saturate", s.saturate);
  s.drain = kv_double(kv, "drain", s.drain);
  s.seed = static_cast<std::uint64_t>(kv_int(kv, "seed", static_cast<std::int64_t>(s.seed)));
  s.validate();
  return s;
}

KeyValues Scenario::to_key_values() const {
  return {
      {"name", name},
      {"duration", fmt_double(duration)},
      {"new_conns_per_tick", std::to_string(new_conns_per_tick)},
      {"tick_period", fmt_double(tick_period)},
      {"ping_mean_period", fmt_double(ping_mean_period)},
      {"ping_jitter", std::string(to_string(ping_jitter))},
      {"jitter_fraction", fmt_double(jitter_fraction)},
      {"payload", std::string(to_string(payload))},
      {"file_name", file_name},
      {"n_client_procs", std::to_string(n_client_procs)},
      {"host", host},
      {"port", std::to_string(port)},
      {"max_total_conns", std::to_string(max_total_conns.value_or(0))},
      {"transport", std::string(to_string(transport))},
      {"saturate", saturate ? "true" : "false"},
      {"drain", fmt_double(drain)},
      {"seed", std::to_string(seed)},
  };
}

std::vector<std::string> preset_names() {
  std::vector<std::string> out;
  for (const auto &[name, kv] : preset_table()) out.push_back(name);
  return out;
}

Scenario preset(std::string_view name) {
  KeyValues kv;
  for (const auto &[k, v] : preset_section(name)) {
    if (!k.starts_with("cluster.")) kv[k] = v;
  }
  kv["name"] = std::string(name);
  return Scenario::from_key_values(kv);
}

KeyValues preset_cluster_overrides(std::string_view name) {
  KeyValues out;
  for (const auto &[k, v] : preset_section(name)) {
    if (k.starts_with("cluster.")) out[k.substr(8)] = v;
  }
  return out;
}

std::chrono::milliseconds draw_ping_interval(const Scenario &s, std::mt19937_64 &rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  if (s.ping_jitter == JitterLaw::Uniform0To5s) {
    return std::chrono::milliseconds(static_cast<std::int64_t>(std::round(unit(rng) * 5000.0)));
  }
  const double lo = s.ping_mean_period * (1.0 - s.jitter_fraction);
  const double hi = s.ping_mean_period * (1.0 + s.jitter_fraction);
  return std::chrono::milliseconds(static_cast<std::int64_t>(std::round((lo + unit(rng) * (hi - lo)) * 1000.0)));
}

std::size_t share_for_proc(std::size_t total, std::size_t n_procs, std::size_t proc) {
  if (n_procs == 0) return 0;
  return total / n_procs + (proc < total % n_procs ? 1 : 0);
}

void LatencyHistogram::add(double ms) {
  const auto it = std::lower_bound(kEdgesMs.begin(), kEdgesMs.end(), ms);
  ++counts_[static_cast<std::size_t>(it - kEdgesMs.begin())];
}

void LatencyHistogram::merge(const LatencyHistogram &other) {
  for (std::size_t i = 0; i < kBuckets; ++i) counts_[i] += other.counts_[i];
}

std::uint64_t LatencyHistogram::total() const {
  std::uint64_t t = 0;
  for (auto c : counts_) t += c;
  return t;
}

double LatencyHistogram::quantile_upper_ms(double q) const {
  const auto n = total();
  if (n == 0) return 0;
  const auto rank = static_cast<std::uint64_t>(std::ceil(q * static_cast<double>(n)));
  std::uint64_t seen = 0;
  for (std::size_t i = 0; i < kBuckets; ++i) {
    seen += counts_[i];
    if (seen >= std::max<std::uint64_t>(rank, 1)) {
      return i < kEdgesMs.size() ? kEdgesMs[i] : std::numeric_limits<double>::infinity();
    }
  }
  return std::numeric_limits<double>::infinity();
}

double RunReport::wire_bytes_per_message() const noexcept {
  const auto msgs = pings_sent + pongs_received;
  return msgs == 0 ? 0.0 : static_cast<double>(bytes_in + bytes_out) / static_cast<double>(msgs);
}

double RunReport::throughput() const noexcept {
  return scenario.duration > 0 ? static_cast<double>(pongs_received) / scenario.duration : 0.0;
}

ProcReport run_client_proc(const Scenario &scenario, int proc_index) {
  scenario.validate();
  if (scenario.transport == Transport::LongPoll) return LongPollClient(scenario, proc_index).run();
  return WsClient(scenario, proc_index).run();
}

std::string proc_report_to_json(const ProcReport &r) {
  nlohmann::json j;
  j["proc_index"] = r.proc_index;
  j["pid"] = r.pid;
  j["attempted"] = r.attempted;
  j["established"] = r.established;
  j["dropped"] = r.dropped;
  j["pings_sent"] = r.pings_sent;
  j["pongs_received"] = r.pongs_received;
  j["bytes_out"] = r.bytes_out;
  j["bytes_in"] = r.bytes_in;
  j["peak_open"] = r.peak_open;
  j["rtt_sum_ms"] = r.rtt_sum_ms;
  j["rtt"] = r.rtt.counts();
  j["pongs_per_second"] = series_json(r.pongs_per_second);
  j["attempted_by_second"] = series_json(r.attempted_by_second);
  j["error"] = r.error;
  return j.dump();
}

ProcReport proc_report_from_json(std::string_view text) {
  const auto j = nlohmann::json::parse(text);
  ProcReport r;
  r.proc_index = j.at("proc_index").get<int>();
  r.pid = j.at("pid").get<pid_t>();
  r.attempted = j.at("attempted").get<std::uint64_t>();
  r.established = j.at("established").get<std::uint64_t>();
  r.dropped = j.at("dropped").get<std::uint64_t>();
  r.pings_sent = j.at("pings_sent").get<std::uint64_t>();
  r.pongs_received = j.at("pongs_received").get<std::uint64_t>();
  r.bytes_out = j.at("bytes_out").get<std::uint64_t>();
  r.bytes_in = j.at("bytes_in").get<std::uint64_t>();
  r.peak_open = j.at("peak_open").get<std::uint64_t>();
  r.rtt_sum_ms = j.at("rtt_sum_ms").get<double>();
  r.rtt.counts() = j.at("rtt").get<std::array<std::uint64_t, LatencyHistogram::kBuckets>>();
  r.pongs_per_second = j.at("pongs_per_second").get<std::vector<std::uint64_t>>();
  r.attempted_by_second = j.at("attempted_by_second").get<std::vector<std::uint64_t>>();
  r.error = j.at("error").get<std::string>();
  return r;
}

RunReport merge_reports(const Scenario &scenario, std::vector<ProcReport> procs, double elapsed_s) {
  RunReport out;
  out.scenario = scenario;
  out.elapsed_s = elapsed_s;
  std::sort(procs.begin(), procs.end(), [](const auto &a, const auto &b) { return a.proc_index < b.proc_index; });
  for (const auto &p : procs) {
    out.attempted += p.attempted;
    out.established += p.established;
    out.dropped += p.dropped;
    out.pings_sent += p.pings_sent;
    out.pongs_received += p.pongs_received;
    out.bytes_out += p.bytes_out;
    out.bytes_in += p.bytes_in;
    out.peak_open += p.peak_open;
    out.rtt_sum_ms += p.rtt_sum_ms;
    out.rtt.merge(p.rtt);
    for (std::size_t i = 0; i < p.pongs_per_second.size(); ++i) bump(out.pongs_per_second, i, p.pongs_per_second[i]);
  }
  out.procs = std::move(procs);
  return out;
}

RunReport run(const Scenario &scenario, const RunHooks &hooks) {
  scenario.validate();
  if (!connect_tcp_blocking(scenario.host, scenario.port, std::chrono::milliseconds(2000))) {
    throw Error(ErrorCode::TargetUnreachable,
                "cannot connect to " + scenario.host + ":" + std::to_string(scenario.port));
  }
  const auto ticks = static_cast<std::size_t>(std::ceil(scenario.duration / scenario.tick_period));
  const std::size_t expected = share_for_proc(cumulative_target(scenario, ticks), scenario.n_client_procs, 0);
  if (auto warning = fd_limit_warning(expected)) std::fprintf(stderr, "warning: %s\n", warning->c_str());

  const auto start = Clock::now();
  struct Child {
    pid_t pid = 0;
    Fd pipe;
  };
  std::vector<Child> children;
  for (std::size_t i = 0; i < scenario.n_client_procs; ++i) {
    int fds[2];
    if (::pipe2(fds, O_CLOEXEC) != 0) {
      for (auto &c : children) kill_and_reap(c.pid);
      throw Error(ErrorCode::SpawnFailure, "pipe failed");
    }
    Fd read_end(fds[0]);
    Fd write_end(fds[1]);
    const int wfd = write_end.get();
    const auto index = static_cast<int>(i);
    const pid_t pid = fork_process([&scenario, wfd, index] {
      ProcReport r;
      try {
        r = run_client_proc(scenario, index);
      } catch (const std::exception &e) {
        r.proc_index = index;
        r.pid = ::getpid();
        r.error = e.what();
      }
      write_all(wfd, proc_report_to_json(r));
      return 0;
    });
    if (pid < 0) {
      for (auto &c : children) kill_and_reap(c.pid);
      throw Error(ErrorCode::SpawnFailure, "fork failed");
    }
    children.push_back({pid, std::move(read_end)});
  }
  if (hooks.on_clients_started) {
    std::vector<pid_t> pids;
    for (const auto &c : children) pids.push_back(c.pid);
    hooks.on_clients_started(pids);
  }

  std::vector<ProcReport> reports;
  for (std::size_t i = 0; i < children.size(); ++i) {
    const std::string text = read_all(children[i].pipe.get());
    wait_for_exit(children[i].pid, std::chrono::milliseconds(10000));
    ProcReport r;
    try {
      r = proc_report_from_json(text);
    } catch (const std::exception &) {
      r.proc_index = static_cast<int>(i);
      r.pid = children[i].pid;
      r.error = "client process exited without a report";
    }
    reports.push_back(std::move(r));
  }
  const double elapsed = std::chrono::duration<double>(Clock::now() - start).count();
  return merge_reports(scenario, std::move(reports), elapsed);
}

void write_report_csv(const RunReport &report, const std::filesystem::path &path) {
  auto out = open_out(path);
  out << "second,pongs_received,conns_attempted";
  for (const auto &p : report.procs) out << ",proc" << p.proc_index << "_pongs";
  out << "\n";
  std::size_t rows = report.pongs_per_second.size();
  for (const auto &p : report.procs) rows = std::max(rows, p.attempted_by_second.size());
  for (std::size_t i = 0; i < rows; ++i) {
    std::uint64_t attempted = 0;
    for (const auto &p : report.procs) {
      if (p.attempted_by_second.empty()) continue;
      attempted += p.attempted_by_second[std::min(i, p.attempted_by_second.size() - 1)];
    }
    out << i << "," << (i < report.pongs_per_second.size() ? report.pongs_per_second[i] : 0) << "," << attempted;
    for (const auto &p : report.procs) out << "," << (i < p.pongs_per_second.size() ? p.pongs_per_second[i] : 0);
    out << "\n";
  }
  if (!out) throw Error(ErrorCode::IoError, "write failed: " + path.string());
}

void write_latency_csv(const RunReport &report, const std::filesystem::path &path) {
  auto out = open_out(path);
  out << "bucket_upper_ms,count\n";
  const auto &counts = report.rtt.counts();
  for (std::size_t i = 0; i < LatencyHistogram::kBuckets; ++i) {
    if (i < LatencyHistogram::kEdgesMs.size()) {
      out << fmt_double(LatencyHistogram::kEdgesMs[i]);
    } else {
      out << "inf";
    }
    out << "," << counts[i] << "\n";
  }
  if (!out) throw Error(ErrorCode::IoError, "write failed: " + path.string());
}

KeyValues summary_values(const RunReport &r) {
  KeyValues kv{
      {"scenario", r.scenario.name},
      {"transport", std::string(to_string(r.scenario.transport))},
      {"elapsed_s", fmt_double(r.elapsed_s)},
      {"conns_attempted", std::to_string(r.attempted)},
      {"conns_established", std::to_string(r.established)},
      {"conns_dropped", std::to_string(r.dropped)},
      {"drop_rate", fmt_double(r.drop_rate())},
      {"pings_sent", std::to_string(r.pings_sent)},
      {"pongs_received", std::to_string(r.pongs_received)},
      {"peak_open", std::to_string(r.peak_open)},
      {"throughput_per_s", fmt_double(r.throughput())},
      {"rtt_mean_ms", fmt_double(r.mean_rtt_ms())},
      {"rtt_p50_le_ms", fmt_double(r.rtt.quantile_upper_ms(0.5))},
      {"rtt_p99_le_ms", fmt_double(r.rtt.quantile_upper_ms(0.99))},
      {"wire_bytes_per_message", fmt_double(r.wire_bytes_per_message())},
  };
  for (const auto &p : r.procs) {
    const std::string prefix = "proc" + std::to_string(p.proc_index) + ".";
    kv[prefix + "established"] = std::to_string(p.established);
    kv[prefix + "pongs_received"] = std::to_string(p.pongs_received);
    if (!p.error.empty()) kv[prefix + "error"] = p.error;
  }
  return kv;
}

std::string summarize(const RunReport &r) {
  std::ostringstream ss;
  ss << "scenario " << r.scenario.name << " (" << to_string(r.scenario.transport) << ", "
     << r.scenario.n_client_procs << " client procs, " << fmt_double(r.scenario.duration) << " s)\n";
  ss << "  connections: " << r.attempted << " attempted, " << r.established << " established, " << r.dropped
     << " dropped (" << fmt_double(r.drop_rate() * 100) << "%), peak open " << r.peak_open << "\n";
  ss << "  requests:    " << r.pings_sent << " sent, " << r.pongs_received << " replies, "
     << fmt_double(r.throughput()) << " replies/s\n";
  ss << "  rtt:         mean " << fmt_double(r.mean_rtt_ms()) << " ms, p50 <= " << fmt_double(r.rtt.quantile_upper_ms(0.5))
     << " ms, p99 <= " << fmt_double(r.rtt.quantile_upper_ms(0.99)) << " ms\n";
  ss << "  wire:        " << fmt_double(r.wire_bytes_per_message()) << " bytes per message\n";
  for (const auto &p : r.procs) {
    ss << "  proc " << p.proc_index << ": " << p.established << " established, " << p.pongs_received << " replies";
    if (!p.error.empty()) ss << " (error: " << p.error << ")";
    ss << "\n";
  }
  return ss.str();
}

Comparison compare(const std::vector<Transport> &transports, const Scenario &scenario,
                   const std::map<Transport, std::uint16_t> &ports) {
  if (transports.empty()) throw Error(ErrorCode::NoTransports, "no transports to compare");
  Comparison out;
  const std::size_t payload_bytes =
      scenario.payload == PayloadKind::FileRequest
          ? encode_event({"getfile", scenario.file_name, std::nullopt}).size()
          : encode_event({"ping", std::int64_t{123456789}, std::nullopt}).size();
  for (const auto t : transports) {
    auto it = ports.find(t);
    if (it == ports.end()) throw Error(ErrorCode::BadConfig, "no port given for " + std::string(to_string(t)));
    Scenario s = scenario;
    s.transport = t;
    s.port = it->second;
    TransportResult result;
    result.transport = t;
    result.report = run(s);
    result.model_bytes_per_message = measure_per_message_bytes(t, payload_bytes, minimal_header_profile(), true);
    out.results.push_back(std::move(result));
  }
  const TransportResult *ws = nullptr;
  const TransportResult *lp = nullptr;
  for (const auto &r : out.results) {
    if (r.transport == Transport::WebSocket) ws = &r;
    if (r.transport == Transport::LongPoll) lp = &r;
  }
  if (ws && lp && ws->report.wire_bytes_per_message() > 0) {
    out.wire_ratio = lp->report.wire_bytes_per_message() / ws->report.wire_bytes_per_message();
  }
  return out;
}

}  // namespace wsforge
