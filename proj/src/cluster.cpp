#include "wsforge/cluster.hpp"

#include <signal.h>
#include <sys/resource.h>
#include <unistd.h>

#include <atomic>
#include <future>
#include <iostream>
#include <set>
#include <thread>

#include "wsforge/error.hpp"
#include "wsforge/net.hpp"
#include "wsforge/store.hpp"
#include "wsforge/worker.hpp"

namespace wsforge {

std::string_view to_string(Role role) noexcept {
  switch (role) {
    case Role::LoadBalancer: return "load_balancer";
    case Role::Worker: return "worker";
    case Role::Store: return "store";
    case Role::Client: return "client";
  }
  return "unknown";
}

Role parse_role(std::string_view text) {
  for (Role r : {Role::LoadBalancer, Role::Worker, Role::Store, Role::Client}) {
    if (to_string(r) == text) return r;
  }
  throw Error(ErrorCode::BadConfig, "unknown role " + std::string(text));
}

void ClusterConfig::validate() const {
  if (n_load_balancers < 1) throw Error(ErrorCode::BadConfig, "n_load_balancers must be >= 1");
  if (n_workers < 1) throw Error(ErrorCode::BadConfig, "n_workers must be >= 1");
  if (n_stores > 1) throw Error(ErrorCode::BadConfig, "n_stores must be 0 or 1");
  if (public_port == 0 || worker_base_port == 0) throw Error(ErrorCode::BadConfig, "ports must be non-zero");
  if (static_cast<std::size_t>(worker_base_port) + n_workers > 65536) {
    throw Error(ErrorCode::BadConfig, "worker ports overflow");
  }
  std::set<std::uint32_t> ports{public_port};
  for (std::size_t i = 0; i < n_workers; ++i) {
    if (!ports.insert(static_cast<std::uint32_t>(worker_base_port + i)).second) {
      throw Error(ErrorCode::BadConfig, "worker port overlaps another port");
    }
  }
  if (n_stores == 1 && !ports.insert(store_port).second) throw Error(ErrorCode::BadConfig, "store port overlaps");
  if (max_conns_per_worker == 0 || send_queue_cap == 0) throw Error(ErrorCode::BadConfig, "limits must be positive");
}

namespace {

std::uint16_t port_value(const KeyValues &kv, const std::string &key, std::uint16_t fallback) {
  const auto v = kv_int(kv, key, fallback);
  if (v <= 0 || v > 65535) throw Error(ErrorCode::BadConfig, key + " out of range");
  return static_cast<std::uint16_t>(v);
}

std::size_t count_value(const KeyValues &kv, const std::string &key, std::size_t fallback) {
  const auto v = kv_int(kv, key, static_cast<std::int64_t>(fallback));
  if (v < 0) throw Error(ErrorCode::BadConfig, key + " must be non-negative");
  return static_cast<std::size_t>(v);
}

}  // namespace

ClusterConfig ClusterConfig::from_key_values(const KeyValues &kv) {
  ClusterConfig c;
  c.n_load_balancers = count_value(kv, "n_load_balancers", c.n_load_balancers);
  c.n_workers = count_value(kv, "n_workers", c.n_workers);
  c.n_stores = count_value(kv, "n_stores", c.n_stores);
  c.public_port = port_value(kv, "public_port", c.public_port);
  c.worker_base_port = port_value(kv, "worker_base_port", c.worker_base_port);
  c.store_port = port_value(kv, "store_port", c.store_port);
  c.lb_strategy = parse_lb_strategy(kv_string(kv, "lb_strategy", std::string(to_string(c.lb_strategy))));
  c.max_conns_per_worker = count_value(kv, "max_conns_per_worker", c.max_conns_per_worker);
  c.send_queue_cap = count_value(kv, "send_queue_cap", c.send_queue_cap);
  c.max_payload = count_value(kv, "max_payload", c.max_payload);
  c.expected_peak_conns = count_value(kv, "expected_peak_conns", c.expected_peak_conns);
  c.files_dir = kv_string(kv, "files_dir", "");
  c.validate();
  return c;
}

KeyValues ClusterConfig::to_key_values() const {
  return {
      {"n_load_balancers", std::to_string(n_load_balancers)},
      {"n_workers", std::to_string(n_workers)},
      {"n_stores", std::to_string(n_stores)},
      {"public_port", std::to_string(public_port)},
      {"worker_base_port", std::to_string(worker_base_port)},
      {"store_port", std::to_string(store_port)},
      {"lb_strategy", std::string(to_string(lb_strategy))},
      {"max_conns_per_worker", std::to_string(max_conns_per_worker)},
      {"send_queue_cap", std::to_string(send_queue_cap)},
      {"max_payload", std::to_string(max_payload)},
      {"expected_peak_conns", std::to_string(expected_peak_conns)},
      {"files_dir", files_dir.string()},
  };
}

std::optional<std::string> fd_limit_warning(std::size_t expected_conns, std::uint64_t soft_limit) {
  const std::uint64_t needed = expected_conns + kFdHeadroom;
  if (soft_limit >= needed) return std::nullopt;
  return "file-descriptor soft limit is " + std::to_string(soft_limit) + " but " + std::to_string(needed) +
         " are needed for " + std::to_string(expected_conns) + " connections; raise it with `ulimit -n`";
}

std::optional<std::string> fd_limit_warning(std::size_t expected_conns) {
  rlimit lim{};
  if (::getrlimit(RLIMIT_NOFILE, &lim) != 0) return std::nullopt;
  return fd_limit_warning(expected_conns, lim.rlim_cur == RLIM_INFINITY ? UINT64_MAX : lim.rlim_cur);
}

ClusterHandle::~ClusterHandle() {
  if (!stopped_) kill_all();
}

void ClusterHandle::kill_all() noexcept {
  for (const auto &p : processes_) kill_and_reap(p.pid);
  stopped_ = true;
}

bool ClusterHandle::healthy() const {
  for (const auto &p : processes_) {
    if (control(p, "PING") != "PONG") return false;
  }
  return true;
}

std::optional<std::string> ClusterHandle::control(const ProcessInfo &proc, std::string_view command) const {
  return control_request(proc.control, command);
}

std::vector<WorkerStats> ClusterHandle::worker_stats() const {
  std::vector<WorkerStats> out;
  for (const auto &p : processes_) {
    if (p.role != Role::Worker) continue;
    if (auto line = control(p, "STATS")) {
      out.push_back(WorkerStats::from_line(*line));
    } else {
      WorkerStats dead;
      dead.worker_index = p.index;
      out.push_back(dead);
    }
  }
  return out;
}

std::optional<std::string> ClusterHandle::store_request(std::string_view line) const {
  if (config_.n_stores == 0) return std::nullopt;
  return tcp_line_request(config_.store_port, line);
}

ShutdownReport ClusterHandle::shutdown(std::chrono::milliseconds grace) {
  ShutdownReport report;
  if (stopped_) return report;
  const auto reply_timeout = grace + std::chrono::milliseconds(1000);
  const std::string cmd = "SHUTDOWN " + std::to_string(grace.count());

  auto wait_role = [&](Role role) {
    for (const auto &p : processes_) {
      if (p.role == role && !wait_for_exit(p.pid, reply_timeout)) kill_and_reap(p.pid);
    }
  };
  auto stop_role = [&](Role role, bool wait) {
    std::vector<std::pair<const ProcessInfo *, std::future<std::optional<std::string>>>> pending;
    for (const auto &p : processes_) {
      if (p.role != role) continue;
      pending.emplace_back(&p, std::async(std::launch::async, [&p, &cmd, reply_timeout] {
                             return control_request(p.control, cmd, reply_timeout);
                           }));
    }
    std::vector<std::pair<const ProcessInfo *, std::optional<std::string>>> replies;
    for (auto &[p, fut] : pending) replies.emplace_back(p, fut.get());
    if (wait) {
      for (auto &[p, reply] : replies) {
        if (!wait_for_exit(p->pid, std::chrono::milliseconds(500))) kill_and_reap(p->pid);
      }
    }
    return replies;
  };

  // Last live snapshot in case a worker dies without answering SHUTDOWN.
  const auto before = worker_stats();
  // Balancers stop accepting first but keep forwarding until the workers
  // have closed their connections.
  stop_role(Role::LoadBalancer, false);
  for (auto &[p, reply] : stop_role(Role::Worker, true)) {
    if (reply && reply->starts_with("worker=")) {
      report.workers.push_back(WorkerStats::from_line(*reply));
    } else {
      for (const auto &s : before) {
        if (s.worker_index == p->index) report.workers.push_back(s);
      }
    }
  }
  wait_role(Role::LoadBalancer);
  if (config_.n_stores == 1) {
    if (auto sum = store_request("SUM pings:")) {
      try {
        report.store_pings_sum = std::stoll(*sum);
      } catch (const std::exception &) {
      }
    }
    stop_role(Role::Store, true);
  }
  stopped_ = true;
  return report;
}

namespace {

std::atomic<int> g_spawn_counter{0};

bool wait_healthy(const ProcessInfo &p, std::chrono::milliseconds timeout) {
  const auto deadline = std::chrono::steady_clock::now() + timeout;
  while (std::chrono::steady_clock::now() < deadline) {
    if (control_request(p.control, "PING", std::chrono::milliseconds(500)) == "PONG") return true;
    int status = 0;
    if (wait_for_exit(p.pid, std::chrono::milliseconds(0), &status)) return false;
    std::this_thread::sleep_for(std::chrono::milliseconds(10));
  }
  return false;
}

}  // namespace

ClusterHandle spawn(const ClusterConfig &config) {
  config.validate();
  std::vector<std::uint16_t> ports{config.public_port};
  for (std::size_t i = 0; i < config.n_workers; ++i) ports.push_back(static_cast<std::uint16_t>(config.worker_base_port + i));
  if (config.n_stores == 1) ports.push_back(config.store_port);
  for (auto port : ports) {
    if (port_in_use(port)) throw Error(ErrorCode::PortInUse, "port " + std::to_string(port));
  }

  auto warning = fd_limit_warning(config.expected_peak_conns);
  if (warning) std::cerr << "warning: " << *warning << "\n";

  const std::string prefix =
      "wsforge." + std::to_string(::getpid()) + "." + std::to_string(g_spawn_counter.fetch_add(1)) + ".";
  std::vector<ProcessInfo> procs;
  auto rollback = [&](const std::string &why) {
    for (const auto &p : procs) kill_and_reap(p.pid);
    throw Error(ErrorCode::SpawnFailure, why);
  };
  auto launch = [&](Role role, int index, const std::function<int(const std::string &)> &body) {
    ProcessInfo info;
    info.role = role;
    info.index = index;
    info.control = prefix + std::string(to_string(role)) + "." + std::to_string(index);
    try {
      info.pid = fork_process([&] { return body(info.control); });
    } catch (const Error &e) {
      rollback(e.what());
    }
    procs.push_back(info);
    if (!wait_healthy(procs.back(), std::chrono::milliseconds(5000))) {
      rollback(std::string(to_string(role)) + " " + std::to_string(index) + " failed its health check");
    }
  };

  if (config.n_stores == 1) {
    launch(Role::Store, 0, [&](const std::string &control) {
      return run_store(StoreOptions{config.store_port, control});
    });
  }
  for (std::size_t i = 0; i < config.n_workers; ++i) {
    launch(Role::Worker, static_cast<int>(i), [&, i](const std::string &control) {
      WorkerOptions o;
      o.index = static_cast<int>(i);
      o.port = static_cast<std::uint16_t>(config.worker_base_port + i);
      o.control_name = control;
      if (config.n_stores == 1) o.store_port = config.store_port;
      o.max_conns = config.max_conns_per_worker;
      o.send_queue_cap = config.send_queue_cap;
      o.max_payload = config.max_payload;
      o.files_dir = config.files_dir;
      return run_worker(o);
    });
  }
  for (std::size_t i = 0; i < config.n_load_balancers; ++i) {
    launch(Role::LoadBalancer, static_cast<int>(i), [&, i](const std::string &control) {
      BalancerOptions o;
      o.index = static_cast<int>(i);
      o.public_port = config.public_port;
      o.worker_base_port = config.worker_base_port;
      o.n_workers = config.n_workers;
      o.strategy = config.lb_strategy;
      o.control_name = control;
      return run_balancer(o);
    });
  }
  return ClusterHandle(config, std::move(procs), std::move(warning));
}

}  // namespace wsforge
