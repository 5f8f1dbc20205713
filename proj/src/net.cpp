#include "wsforge/net.hpp"

#include <arpa/inet.h>
#include <fcntl.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <signal.h>
#include <sys/epoll.h>
#include <sys/prctl.h>
#include <sys/signalfd.h>
#include <sys/socket.h>
#include <sys/un.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <cstdio>
#include <cstring>
#include <iostream>
#include <thread>

#include "wsforge/error.hpp"

namespace wsforge {
namespace {

std::string errno_text() { return std::strerror(errno); }

sockaddr_in make_addr(std::string_view host, std::uint16_t port) {
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(port);
  const std::string h(host.empty() ? "127.0.0.1" : host);
  if (h == "localhost") {
    addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  } else if (::inet_pton(AF_INET, h.c_str(), &addr.sin_addr) != 1) {
    throw Error(ErrorCode::BadConfig, "not an IPv4 address: " + h);
  }
  return addr;
}

std::pair<sockaddr_un, socklen_t> make_unix_addr(std::string_view name) {
  sockaddr_un addr{};
  addr.sun_family = AF_UNIX;
  // Leading NUL selects the abstract namespace.
  const std::size_t n = std::min(name.size(), sizeof(addr.sun_path) - 2);
  std::memcpy(addr.sun_path + 1, name.data(), n);
  return {addr, static_cast<socklen_t>(offsetof(sockaddr_un, sun_path) + 1 + n)};
}

std::optional<std::string> line_exchange(int fd, std::string_view line, std::chrono::milliseconds timeout) {
  std::string msg(line);
  msg += '\n';
  std::size_t sent = 0;
  while (sent < msg.size()) {
    const ssize_t n = ::send(fd, msg.data() + sent, msg.size() - sent, MSG_NOSIGNAL);
    if (n <= 0) return std::nullopt;
    sent += static_cast<std::size_t>(n);
  }
  const auto deadline = std::chrono::steady_clock::now() + timeout;
  std::string reply;
  char buf[4096];
  while (reply.find('\n') == std::string::npos) {
    const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now());
    if (left.count() <= 0) return std::nullopt;
    pollfd p{fd, POLLIN, 0};
    const int r = ::poll(&p, 1, static_cast<int>(left.count()));
    if (r < 0 && errno == EINTR) continue;
    if (r <= 0) return std::nullopt;
    const ssize_t n = ::recv(fd, buf, sizeof buf, 0);
    if (n <= 0) return std::nullopt;
    reply.append(buf, static_cast<std::size_t>(n));
  }
  reply.resize(reply.find('\n'));
  return reply;
}

}  // namespace

void Fd::reset(int fd) noexcept {
  if (fd_ >= 0) ::close(fd_);
  fd_ = fd;
}

void set_nonblocking(int fd) {
  const int flags = ::fcntl(fd, F_GETFL, 0);
  if (flags < 0 || ::fcntl(fd, F_SETFL, flags | O_NONBLOCK) < 0) throw Error(ErrorCode::IoError, "fcntl: " + errno_text());
}

void set_nodelay(int fd) {
  int one = 1;
  ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
}

Fd listen_tcp(std::uint16_t port, bool reuse_port, int backlog) {
  Fd fd(::socket(AF_INET, SOCK_STREAM | SOCK_NONBLOCK | SOCK_CLOEXEC, 0));
  if (!fd) throw Error(ErrorCode::IoError, "socket: " + errno_text());
  int one = 1;
  ::setsockopt(fd.get(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  if (reuse_port) ::setsockopt(fd.get(), SOL_SOCKET, SO_REUSEPORT, &one, sizeof one);
  auto addr = make_addr("127.0.0.1", port);
  addr.sin_addr.s_addr = htonl(INADDR_ANY);
  if (::bind(fd.get(), reinterpret_cast<sockaddr *>(&addr), sizeof addr) < 0) {
    if (errno == EADDRINUSE) throw Error(ErrorCode::PortInUse, "port " + std::to_string(port));
    throw Error(ErrorCode::IoError, "bind: " + errno_text());
  }
  if (::listen(fd.get(), backlog) < 0) throw Error(ErrorCode::IoError, "listen: " + errno_text());
  return fd;
}

bool port_in_use(std::uint16_t port) {
  Fd fd(::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0));
  int one = 1;
  ::setsockopt(fd.get(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  auto addr = make_addr("127.0.0.1", port);
  addr.sin_addr.s_addr = htonl(INADDR_ANY);
  return ::bind(fd.get(), reinterpret_cast<sockaddr *>(&addr), sizeof addr) < 0 && errno == EADDRINUSE;
}

Fd connect_tcp(std::string_view host, std::uint16_t port) {
  Fd fd(::socket(AF_INET, SOCK_STREAM | SOCK_NONBLOCK | SOCK_CLOEXEC, 0));
  if (!fd) throw Error(ErrorCode::IoError, "socket: " + errno_text());
  set_nodelay(fd.get());
  const auto addr = make_addr(host, port);
  if (::connect(fd.get(), reinterpret_cast<const sockaddr *>(&addr), sizeof addr) < 0 && errno != EINPROGRESS) {
    return Fd();
  }
  return fd;
}

Fd connect_tcp_blocking(std::string_view host, std::uint16_t port, std::chrono::milliseconds timeout) {
  Fd fd = connect_tcp(host, port);
  if (!fd) return fd;
  pollfd p{fd.get(), POLLOUT, 0};
  if (::poll(&p, 1, static_cast<int>(timeout.count())) != 1) return Fd();
  int err = 0;
  socklen_t len = sizeof err;
  ::getsockopt(fd.get(), SOL_SOCKET, SO_ERROR, &err, &len);
  if (err != 0) return Fd();
  const int flags = ::fcntl(fd.get(), F_GETFL, 0);
  ::fcntl(fd.get(), F_SETFL, flags & ~O_NONBLOCK);
  return fd;
}

Fd listen_unix(std::string_view name) {
  Fd fd(::socket(AF_UNIX, SOCK_STREAM | SOCK_NONBLOCK | SOCK_CLOEXEC, 0));
  if (!fd) throw Error(ErrorCode::IoError, "socket: " + errno_text());
  auto [addr, len] = make_unix_addr(name);
  if (::bind(fd.get(), reinterpret_cast<sockaddr *>(&addr), len) < 0) {
    throw Error(errno == EADDRINUSE ? ErrorCode::PortInUse : ErrorCode::IoError, "control socket " + std::string(name));
  }
  if (::listen(fd.get(), 64) < 0) throw Error(ErrorCode::IoError, "listen: " + errno_text());
  return fd;
}

std::optional<std::string> control_request(std::string_view name, std::string_view line,
                                           std::chrono::milliseconds timeout) {
  Fd fd(::socket(AF_UNIX, SOCK_STREAM | SOCK_CLOEXEC, 0));
  auto [addr, len] = make_unix_addr(name);
  if (::connect(fd.get(), reinterpret_cast<sockaddr *>(&addr), len) < 0) return std::nullopt;
  return line_exchange(fd.get(), line, timeout);
}

std::optional<std::string> tcp_line_request(std::uint16_t port, std::string_view line,
                                            std::chrono::milliseconds timeout) {
  Fd fd = connect_tcp_blocking("127.0.0.1", port, timeout);
  if (!fd) return std::nullopt;
  return line_exchange(fd.get(), line, timeout);
}

IoStatus read_available(int fd, Bytes &buf, std::size_t limit) {
  bool got = false;
  std::size_t total = 0;
  while (total < limit) {
    const std::size_t old = buf.size();
    const std::size_t chunk = std::min<std::size_t>(65536, limit - total);
    buf.resize(old + chunk);
    const ssize_t n = ::recv(fd, buf.data() + old, chunk, 0);
    if (n > 0) {
      buf.resize(old + static_cast<std::size_t>(n));
      total += static_cast<std::size_t>(n);
      got = true;
      if (static_cast<std::size_t>(n) < chunk) break;
      continue;
    }
    buf.resize(old);
    if (n == 0) return got ? IoStatus::Ok : IoStatus::Closed;
    if (errno == EINTR) continue;
    if (errno == EAGAIN || errno == EWOULDBLOCK) return got ? IoStatus::Ok : IoStatus::WouldBlock;
    return IoStatus::Error;
  }
  return IoStatus::Ok;
}

IoStatus OutBuffer::flush(int fd) {
  while (offset_ < data_.size()) {
    const ssize_t n = ::send(fd, data_.data() + offset_, data_.size() - offset_, MSG_NOSIGNAL);
    if (n > 0) {
      offset_ += static_cast<std::size_t>(n);
      continue;
    }
    if (n < 0 && errno == EINTR) continue;
    if (n < 0 && (errno == EAGAIN || errno == EWOULDBLOCK)) break;
    return IoStatus::Error;
  }
  if (offset_ == data_.size()) {
    data_.clear();
    offset_ = 0;
    return IoStatus::Ok;
  }
  // Compact once the written prefix dominates.
  if (offset_ > 65536 && offset_ * 2 > data_.size()) {
    data_.erase(data_.begin(), data_.begin() + static_cast<std::ptrdiff_t>(offset_));
    offset_ = 0;
  }
  return IoStatus::WouldBlock;
}

EventLoop::EventLoop() : epoll_(::epoll_create1(EPOLL_CLOEXEC)) {
  if (!epoll_) throw Error(ErrorCode::IoError, "epoll_create1: " + errno_text());
}

void EventLoop::add(int fd, std::uint32_t events, Handler handler) {
  epoll_event ev{};
  ev.events = events;
  ev.data.fd = fd;
  if (::epoll_ctl(epoll_.get(), EPOLL_CTL_ADD, fd, &ev) < 0) throw Error(ErrorCode::IoError, "epoll add: " + errno_text());
  handlers_[fd] = std::make_shared<Handler>(std::move(handler));
}

void EventLoop::modify(int fd, std::uint32_t events) {
  epoll_event ev{};
  ev.events = events;
  ev.data.fd = fd;
  ::epoll_ctl(epoll_.get(), EPOLL_CTL_MOD, fd, &ev);
}

void EventLoop::remove(int fd) {
  ::epoll_ctl(epoll_.get(), EPOLL_CTL_DEL, fd, nullptr);
  handlers_.erase(fd);
}

EventLoop::TimerId EventLoop::add_timer(Clock::time_point when, std::function<void()> fn) {
  const TimerId id = next_timer_++;
  timers_.emplace(id, std::move(fn));
  timer_heap_.push({when, id});
  return id;
}

void EventLoop::cancel_timer(TimerId id) { timers_.erase(id); }

void EventLoop::on_signals(std::vector<int> signals, std::function<void(int)> fn) {
  sigset_t mask;
  sigemptyset(&mask);
  for (int s : signals) sigaddset(&mask, s);
  ::sigprocmask(SIG_BLOCK, &mask, nullptr);
  signal_fd_.reset(::signalfd(-1, &mask, SFD_NONBLOCK | SFD_CLOEXEC));
  const int sfd = signal_fd_.get();
  add(sfd, EPOLLIN, [sfd, fn = std::move(fn)](std::uint32_t) {
    signalfd_siginfo info{};
    while (::read(sfd, &info, sizeof info) == sizeof info) fn(static_cast<int>(info.ssi_signo));
  });
}

void EventLoop::fire_timers() {
  const auto now = Clock::now();
  while (!timer_heap_.empty() && timer_heap_.top().when <= now) {
    const TimerId id = timer_heap_.top().id;
    timer_heap_.pop();
    auto it = timers_.find(id);
    if (it == timers_.end()) continue;
    auto fn = std::move(it->second);
    timers_.erase(it);
    fn();
  }
}

void EventLoop::run_once(std::chrono::milliseconds max_wait) {
  // Drop cancelled entries so they do not shorten the wait.
  while (!timer_heap_.empty() && !timers_.contains(timer_heap_.top().id)) timer_heap_.pop();
  auto wait = max_wait;
  if (!timer_heap_.empty()) {
    const auto until = std::chrono::duration_cast<std::chrono::milliseconds>(timer_heap_.top().when - Clock::now());
    wait = std::clamp(until + std::chrono::milliseconds(1), std::chrono::milliseconds(0), max_wait);
  }
  std::array<epoll_event, 256> events{};
  const int n = ::epoll_wait(epoll_.get(), events.data(), static_cast<int>(events.size()), static_cast<int>(wait.count()));
  for (int i = 0; i < n; ++i) {
    auto it = handlers_.find(events[static_cast<std::size_t>(i)].data.fd);
    if (it == handlers_.end()) continue;
    auto handler = it->second;  // keeps the callable alive if it removes itself
    (*handler)(events[static_cast<std::size_t>(i)].events);
  }
  fire_timers();
}

void EventLoop::run() {
  stopped_ = false;
  while (!stopped_) run_once(std::chrono::milliseconds(1000));
}

struct ControlServer::Client {
  Fd fd;
  std::string in;
};

ControlServer::ControlServer(EventLoop &loop, std::string_view name, StatsFn stats, ShutdownFn shutdown)
    : loop_(loop), listener_(listen_unix(name)), stats_(std::move(stats)), shutdown_(std::move(shutdown)) {
  loop_.add(listener_.get(), EPOLLIN, [this](std::uint32_t) { accept_clients(); });
}

ControlServer::~ControlServer() {
  for (auto &[fd, c] : clients_) loop_.remove(fd);
  loop_.remove(listener_.get());
}

void ControlServer::accept_clients() {
  while (true) {
    const int fd = ::accept4(listener_.get(), nullptr, nullptr, SOCK_NONBLOCK | SOCK_CLOEXEC);
    if (fd < 0) return;
    auto client = std::make_unique<Client>();
    client->fd.reset(fd);
    clients_.emplace(fd, std::move(client));
    loop_.add(fd, EPOLLIN, [this, fd](std::uint32_t) {
      auto it = clients_.find(fd);
      if (it == clients_.end()) return;
      Bytes buf;
      const auto st = read_available(fd, buf);
      if (st == IoStatus::Closed || st == IoStatus::Error) {
        close_client(fd);
        return;
      }
      it->second->in.append(as_chars(buf));
      std::size_t nl;
      while (clients_.contains(fd) && (nl = clients_[fd]->in.find('\n')) != std::string::npos) {
        std::string line = clients_[fd]->in.substr(0, nl);
        clients_[fd]->in.erase(0, nl + 1);
        handle_line(fd, std::move(line));
      }
    });
  }
}

void ControlServer::close_client(int fd) {
  loop_.remove(fd);
  clients_.erase(fd);
}

void ControlServer::handle_line(int fd, std::string line) {
  auto reply = [fd](const std::string &text) {
    const std::string msg = text + "\n";
    std::size_t sent = 0;
    for (int spins = 0; sent < msg.size() && spins < 1000; ++spins) {
      const ssize_t n = ::send(fd, msg.data() + sent, msg.size() - sent, MSG_NOSIGNAL);
      if (n > 0) {
        sent += static_cast<std::size_t>(n);
      } else if (n < 0 && (errno == EAGAIN || errno == EINTR)) {
        std::this_thread::sleep_for(std::chrono::milliseconds(1));
      } else {
        break;
      }
    }
  };
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line == "PING") {
    reply("PONG");
  } else if (line == "STATS") {
    reply(stats_());
  } else if (line.starts_with("SHUTDOWN")) {
    long grace_ms = 2000;
    if (line.size() > 9) grace_ms = std::strtol(line.c_str() + 9, nullptr, 10);
    // The reply is sent by the role once it has wound down.
    shutdown_(std::chrono::milliseconds(grace_ms), reply);
  } else {
    reply("-ERR");
  }
}

pid_t fork_process(const std::function<int()> &body) {
  std::fflush(nullptr);
  const pid_t parent = ::getpid();
  const pid_t pid = ::fork();
  if (pid < 0) throw Error(ErrorCode::SpawnFailure, "fork: " + errno_text());
  if (pid > 0) return pid;

  sigset_t all;
  sigemptyset(&all);
  ::sigprocmask(SIG_SETMASK, &all, nullptr);
  ::signal(SIGINT, SIG_DFL);
  ::signal(SIGTERM, SIG_DFL);
  ::signal(SIGPIPE, SIG_IGN);
  // Children never outlive the orchestrating process.
  ::prctl(PR_SET_PDEATHSIG, SIGKILL);
  if (::getppid() != parent) ::_exit(1);
  // Out of the terminal's process group: a Ctrl-C reaches only the parent,
  // which then shuts the children down in order.
  ::setpgid(0, 0);
  int code = 1;
  try {
    code = body();
  } catch (const std::exception &e) {
    std::cerr << "wsforge[" << ::getpid() << "]: " << e.what() << std::endl;
    code = 3;
  }
  std::fflush(nullptr);
  ::_exit(code);
}

bool wait_for_exit(pid_t pid, std::chrono::milliseconds timeout, int *status) {
  const auto deadline = std::chrono::steady_clock::now() + timeout;
  while (true) {
    int st = 0;
    const pid_t r = ::waitpid(pid, &st, WNOHANG);
    if (r == pid || (r < 0 && errno == ECHILD)) {
      if (status) *status = st;
      return true;
    }
    if (std::chrono::steady_clock::now() >= deadline) return false;
    std::this_thread::sleep_for(std::chrono::milliseconds(5));
  }
}

void kill_and_reap(pid_t pid) {
  if (pid <= 0) return;
  ::kill(pid, SIGKILL);
  ::waitpid(pid, nullptr, 0);
}

std::map<std::string, std::string> parse_kv_line(std::string_view line) {
  std::map<std::string, std::string> out;
  while (!line.empty()) {
    while (!line.empty() && line.front() == ' ') line.remove_prefix(1);
    const auto sp = line.find(' ');
    const std::string_view tok = line.substr(0, sp);
    if (const auto eq = tok.find('='); eq != std::string_view::npos) {
      out.emplace(std::string(tok.substr(0, eq)), std::string(tok.substr(eq + 1)));
    }
    if (sp == std::string_view::npos) break;
    line.remove_prefix(sp + 1);
  }
  return out;
}

}  // namespace wsforge
