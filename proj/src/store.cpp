#include "wsforge/store.hpp"

#include <signal.h>
#include <sys/epoll.h>
#include <sys/socket.h>

#include <memory>

#include "wsforge/net.hpp"

namespace wsforge {

std::int64_t CounterStore::get(const std::string &key) const {
  const auto it = counters_.find(key);
  return it == counters_.end() ? 0 : it->second;
}

std::int64_t CounterStore::sum(std::string_view prefix) const {
  std::int64_t total = 0;
  for (auto it = counters_.lower_bound(prefix); it != counters_.end() && it->first.starts_with(prefix); ++it) {
    total += it->second;
  }
  return total;
}

std::string CounterStore::handle_line(std::string_view line) {
  while (!line.empty() && (line.back() == '\n' || line.back() == '\r')) line.remove_suffix(1);
  const auto sp = line.find(' ');
  if (sp == std::string_view::npos) return "-ERR\n";
  const std::string_view cmd = line.substr(0, sp);
  const std::string_view arg = line.substr(sp + 1);
  if (arg.find(' ') != std::string_view::npos) return "-ERR\n";
  if (cmd == "INCR" && !arg.empty()) return std::to_string(incr(std::string(arg))) + "\n";
  if (cmd == "GET" && !arg.empty()) return std::to_string(get(std::string(arg))) + "\n";
  if (cmd == "SUM") return std::to_string(sum(arg)) + "\n";
  return "-ERR\n";
}

namespace {

struct StoreConn {
  Fd fd;
  Bytes in;
  OutBuffer out;
};

}  // namespace

int run_store(const StoreOptions &options) {
  EventLoop loop;
  CounterStore store;
  std::uint64_t commands = 0;
  std::map<int, std::unique_ptr<StoreConn>> conns;
  Fd listener = listen_tcp(options.port);

  auto close_conn = [&](int fd) {
    loop.remove(fd);
    conns.erase(fd);
  };

  loop.add(listener.get(), EPOLLIN, [&](std::uint32_t) {
    while (true) {
      const int fd = ::accept4(listener.get(), nullptr, nullptr, SOCK_NONBLOCK | SOCK_CLOEXEC);
      if (fd < 0) return;
      auto conn = std::make_unique<StoreConn>();
      conn->fd.reset(fd);
      StoreConn *c = conn.get();
      conns.emplace(fd, std::move(conn));
      loop.add(fd, EPOLLIN, [&, fd, c](std::uint32_t events) {
        if (events & EPOLLOUT) {
          if (c->out.flush(fd) == IoStatus::Error) return close_conn(fd);
          if (c->out.empty()) loop.modify(fd, EPOLLIN);
        }
        if (!(events & (EPOLLIN | EPOLLHUP | EPOLLERR))) return;
        const auto st = read_available(fd, c->in);
        std::size_t start = 0;
        for (std::size_t nl; (nl = std::string_view(as_chars(c->in)).find('\n', start)) != std::string_view::npos;
             start = nl + 1) {
          c->out.append(store.handle_line(as_chars(ByteView(c->in).subspan(start, nl - start))));
          ++commands;
        }
        c->in.erase(c->in.begin(), c->in.begin() + static_cast<std::ptrdiff_t>(start));
        if (c->out.flush(fd) == IoStatus::Error) return close_conn(fd);
        if (!c->out.empty()) loop.modify(fd, EPOLLIN | EPOLLOUT);
        if (st == IoStatus::Closed || st == IoStatus::Error) close_conn(fd);
      });
    }
  });

  ControlServer control(
      loop, options.control_name,
      [&] {
        return "role=store active_conns=" + std::to_string(conns.size()) + " msgs_in=" + std::to_string(commands) +
               " msgs_out=" + std::to_string(commands) + " pings_sum=" + std::to_string(store.sum("pings:"));
      },
      [&](std::chrono::milliseconds, std::function<void(std::string)> done) {
        done("BYE pings_sum=" + std::to_string(store.sum("pings:")));
        loop.stop();
      });
  loop.on_signals({SIGTERM, SIGINT}, [&](int) { loop.stop(); });
  loop.run();
  return 0;
}

}  // namespace wsforge
