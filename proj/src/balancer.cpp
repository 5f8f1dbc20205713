#include "wsforge/balancer.hpp"

#include <signal.h>
#include <sys/epoll.h>
#include <sys/socket.h>

#include <map>
#include <memory>

#include "wsforge/error.hpp"
#include "wsforge/net.hpp"

namespace wsforge {

std::string_view to_string(LbStrategy s) noexcept {
  return s == LbStrategy::RoundRobin ? "round_robin" : "least_connections";
}

LbStrategy parse_lb_strategy(std::string_view text) {
  if (text == "round_robin") return LbStrategy::RoundRobin;
  if (text == "least_connections") return LbStrategy::LeastConnections;
  throw Error(ErrorCode::BadConfig, "unknown lb_strategy " + std::string(text));
}

BalancerState::BalancerState(std::size_t n_workers, LbStrategy strategy)
    : strategy_(strategy), active_(n_workers, 0), healthy_(n_workers, true) {
  if (n_workers == 0) throw Error(ErrorCode::BadConfig, "balancer needs at least one worker");
}

std::size_t BalancerState::balance() {
  const std::size_t n = active_.size();
  if (strategy_ == LbStrategy::RoundRobin) {
    for (std::size_t tried = 0; tried < n; ++tried) {
      const std::size_t w = next_;
      next_ = (next_ + 1) % n;
      if (healthy_[w]) return w;
    }
  } else {
    std::size_t best = n;
    for (std::size_t w = 0; w < n; ++w) {
      if (healthy_[w] && (best == n || active_[w] < active_[best])) best = w;
    }
    if (best != n) return best;
  }
  throw Error(ErrorCode::NoWorkerAvailable, "all workers unhealthy");
}

namespace {

constexpr std::size_t kPauseAt = 1 << 20;

struct Side {
  Fd fd;
  OutBuffer out;  // bytes waiting to be written to this side
  bool eof = false;
};

struct Splice {
  Side client;
  Side worker;
  std::size_t worker_index = 0;
  bool connected = false;
  std::size_t attempts = 0;
};

class Balancer {
 public:
  explicit Balancer(const BalancerOptions &options)
      : options_(options), state_(options.n_workers, options.strategy),
        listener_(listen_tcp(options.public_port, /*reuse_port=*/true)) {
    loop_.add(listener_.get(), EPOLLIN, [this](std::uint32_t) { accept_all(); });
    control_ = std::make_unique<ControlServer>(
        loop_, options.control_name, [this] { return stats_line(); },
        [this](std::chrono::milliseconds grace, std::function<void(std::string)> done) {
          // Stop accepting but keep splicing so workers' close frames still
          // reach clients. Splices end when the workers close their side.
          done("BYE " + stats_line());
          if (draining_) return;
          draining_ = true;
          loop_.remove(listener_.get());
          listener_.reset();
          loop_.add_timer(grace, [this] { loop_.stop(); });
          if (splices_.empty()) loop_.stop();
        });
    loop_.on_signals({SIGTERM, SIGINT}, [this](int) { loop_.stop(); });
    schedule_reprobe();
  }

  int run() {
    loop_.run();
    return 0;
  }

 private:
  std::string stats_line() const {
    std::string s = "role=load_balancer index=" + std::to_string(options_.index) +
                    " active_conns=" + std::to_string(splices_.size()) + " msgs_in=" + std::to_string(accepted_) +
                    " msgs_out=" + std::to_string(bytes_forwarded_) + " drops=" + std::to_string(drops_);
    for (std::size_t w = 0; w < state_.size(); ++w) s += " w" + std::to_string(w) + "=" + std::to_string(state_.active(w));
    return s;
  }

  /// Workers marked down get another chance once a second.
  void schedule_reprobe() {
    loop_.add_timer(std::chrono::seconds(1), [this] {
      for (std::size_t w = 0; w < state_.size(); ++w) state_.set_healthy(w, true);
      schedule_reprobe();
    });
  }

  void accept_all() {
    while (true) {
      const int fd = ::accept4(listener_.get(), nullptr, nullptr, SOCK_NONBLOCK | SOCK_CLOEXEC);
      if (fd < 0) return;
      set_nodelay(fd);
      ++accepted_;
      auto sp = std::make_unique<Splice>();
      sp->client.fd.reset(fd);
      Splice *raw = sp.get();
      splices_.emplace(fd, std::move(sp));
      connect_worker(*raw);
    }
  }

  void connect_worker(Splice &sp) {
    const int cfd = sp.client.fd.get();
    while (sp.attempts < state_.size()) {
      ++sp.attempts;
      std::size_t w;
      try {
        w = state_.balance();
      } catch (const Error &) {
        break;
      }
      Fd wfd = connect_tcp("127.0.0.1", static_cast<std::uint16_t>(options_.worker_base_port + w));
      if (!wfd) {
        state_.set_healthy(w, false);
        continue;
      }
      sp.worker_index = w;
      sp.worker.fd = std::move(wfd);
      state_.on_open(w);
      loop_.add(sp.worker.fd.get(), EPOLLOUT, [this, cfd](std::uint32_t ev) { on_worker(cfd, ev); });
      return;
    }
    // NoWorkerAvailable: refuse and count.
    ++drops_;
    splices_.erase(cfd);
  }

  void on_worker(int cfd, std::uint32_t ev) {
    auto it = splices_.find(cfd);
    if (it == splices_.end()) return;
    Splice &sp = *it->second;
    if (!sp.connected) {
      int err = 0;
      socklen_t len = sizeof err;
      ::getsockopt(sp.worker.fd.get(), SOL_SOCKET, SO_ERROR, &err, &len);
      if (err != 0 || (ev & (EPOLLERR | EPOLLHUP))) {
        // Worker refused: mark it down and retry elsewhere.
        loop_.remove(sp.worker.fd.get());
        state_.on_close(sp.worker_index);
        state_.set_healthy(sp.worker_index, false);
        sp.worker.fd.reset();
        connect_worker(sp);
        return;
      }
      sp.connected = true;
      loop_.add(cfd, EPOLLIN | EPOLLRDHUP, [this, cfd](std::uint32_t e) { on_client(cfd, e); });
    }
    pump(sp, sp.worker, sp.client, ev);
  }

  void on_client(int cfd, std::uint32_t ev) {
    auto it = splices_.find(cfd);
    if (it == splices_.end()) return;
    Splice &sp = *it->second;
    pump(sp, sp.client, sp.worker, ev);
  }

  /// Moves bytes from `from` to `to` and flushes `from`'s own queue.
  void pump(Splice &sp, Side &from, Side &to, std::uint32_t ev) {
    const int cfd = sp.client.fd.get();
    if (ev & EPOLLOUT) {
      if (from.out.flush(from.fd.get()) == IoStatus::Error) return teardown(cfd);
    }
    if ((ev & (EPOLLIN | EPOLLHUP | EPOLLERR | EPOLLRDHUP)) && to.out.pending() < kPauseAt) {
      Bytes buf;
      const auto st = read_available(from.fd.get(), buf);
      if (!buf.empty()) {
        bytes_forwarded_ += buf.size();
        to.out.append(buf);
        if (to.out.flush(to.fd.get()) == IoStatus::Error) return teardown(cfd);
      }
      if (st == IoStatus::Closed || st == IoStatus::Error) from.eof = true;
    }
    if (from.eof && to.out.empty()) {
      // Half-close is not propagated: either side ending ends the splice.
      return teardown(cfd);
    }
    refresh(sp);
  }

  void refresh(Splice &sp) {
    auto interest = [](const Side &self, const Side &peer) {
      std::uint32_t e = EPOLLRDHUP;
      if (!self.eof && peer.out.pending() < kPauseAt) e |= EPOLLIN;
      if (!self.out.empty()) e |= EPOLLOUT;
      return e;
    };
    loop_.modify(sp.client.fd.get(), interest(sp.client, sp.worker));
    loop_.modify(sp.worker.fd.get(), interest(sp.worker, sp.client));
  }

  void teardown(int cfd) {
    auto it = splices_.find(cfd);
    if (it == splices_.end()) return;
    Splice &sp = *it->second;
    // Best effort: push what is still buffered.
    sp.client.out.flush(sp.client.fd.get());
    sp.worker.out.flush(sp.worker.fd.get());
    if (sp.connected) loop_.remove(cfd);
    if (sp.worker.fd) {
      loop_.remove(sp.worker.fd.get());
      state_.on_close(sp.worker_index);
    }
    splices_.erase(it);
    if (draining_ && splices_.empty()) loop_.stop();
  }

  BalancerOptions options_;
  EventLoop loop_;
  BalancerState state_;
  Fd listener_;
  std::map<int, std::unique_ptr<Splice>> splices_;
  std::unique_ptr<ControlServer> control_;
  std::uint64_t accepted_ = 0;
  std::uint64_t bytes_forwarded_ = 0;
  std::uint64_t drops_ = 0;
  bool draining_ = false;
};

}  // namespace

int run_balancer(const BalancerOptions &options) {
  Balancer lb(options);
  return lb.run();
}

}  // namespace wsforge
