#pragma once

#include <sys/types.h>

#include <chrono>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "wsforge/balancer.hpp"
#include "wsforge/config.hpp"
#include "wsforge/event.hpp"
#include "wsforge/role.hpp"

namespace wsforge {

/// Process topology and limits. Keys in key=value form match the field names.
struct ClusterConfig {
  std::size_t n_load_balancers = 1;
  std::size_t n_workers = 1;
  std::size_t n_stores = 0;
  std::uint16_t public_port = 8000;
  std::uint16_t worker_base_port = 8100;
  std::uint16_t store_port = 8090;
  LbStrategy lb_strategy = LbStrategy::RoundRobin;
  std::size_t max_conns_per_worker = 10000;
  std::size_t send_queue_cap = 1024;
  std::size_t max_payload = std::size_t{16} << 20;
  /// Peak concurrent connections the run expects; drives the fd-limit check.
  std::size_t expected_peak_conns = 1000;
  std::filesystem::path files_dir;

  /// Throws BadConfig on out-of-range counts or overlapping ports.
  void validate() const;
  static ClusterConfig from_key_values(const KeyValues &kv);
  [[nodiscard]] KeyValues to_key_values() const;
};

struct ProcessInfo {
  pid_t pid = -1;
  Role role = Role::Worker;
  int index = 0;
  std::string control;
};

struct ShutdownReport {
  std::vector<WorkerStats> workers;
  /// Store's "SUM pings:" just before it stopped.
  std::optional<std::int64_t> store_pings_sum;
};

/// Fd headroom kept above the expected connection count.
inline constexpr std::uint64_t kFdHeadroom = 100;

/// Warning text when the soft RLIMIT_NOFILE is too low for `expected_conns`.
std::optional<std::string> fd_limit_warning(std::size_t expected_conns, std::uint64_t soft_limit);
std::optional<std::string> fd_limit_warning(std::size_t expected_conns);

/// Live cluster. Destroying a handle that was not shut down kills every process.
class ClusterHandle {
 public:
  ClusterHandle(ClusterConfig config, std::vector<ProcessInfo> processes, std::optional<std::string> fd_warning)
      : config_(std::move(config)), processes_(std::move(processes)), fd_warning_(std::move(fd_warning)) {}
  ClusterHandle(ClusterHandle &&) noexcept = default;
  ClusterHandle &operator=(ClusterHandle &&) noexcept = default;
  ClusterHandle(const ClusterHandle &) = delete;
  ClusterHandle &operator=(const ClusterHandle &) = delete;
  ~ClusterHandle();

  [[nodiscard]] const ClusterConfig &config() const noexcept { return config_; }
  [[nodiscard]] const std::vector<ProcessInfo> &processes() const noexcept { return processes_; }
  [[nodiscard]] const std::optional<std::string> &fd_warning() const noexcept { return fd_warning_; }

  /// Every process answers PING.
  [[nodiscard]] bool healthy() const;
  [[nodiscard]] std::optional<std::string> control(const ProcessInfo &proc, std::string_view command) const;
  [[nodiscard]] std::vector<WorkerStats> worker_stats() const;
  [[nodiscard]] std::optional<std::string> store_request(std::string_view line) const;

  /// Balancers first, then workers (close 1001, drain), then the store.
  /// Processes still alive after `grace` are killed.
  ShutdownReport shutdown(std::chrono::milliseconds grace = std::chrono::milliseconds(3000));

 private:
  void kill_all() noexcept;

  ClusterConfig config_;
  std::vector<ProcessInfo> processes_;
  std::optional<std::string> fd_warning_;
  bool stopped_ = false;
};

/// Forks the store, workers and balancers, then health-checks each.
/// Throws PortInUse before forking anything, or SpawnFailure after rolling
/// back whatever had started.
ClusterHandle spawn(const ClusterConfig &config);

}  // namespace wsforge
