#pragma once

#include <sys/types.h>

#include <array>
#include <chrono>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "wsforge/comet.hpp"
#include "wsforge/config.hpp"

namespace wsforge {

enum class JitterLaw {
  /// Interval drawn as round(uniform[0,1) * 5000) ms, whatever the mean.
  Uniform0To5s,
  /// Uniform over mean * [1 - f, 1 + f].
  UniformPmFraction,
};

enum class PayloadKind { RandomNumber, FileRequest };

/// One benchmark experiment. Times are in seconds.
struct Scenario {
  std::string name = "custom";
  double duration = 60;
  std::size_t new_conns_per_tick = 20;
  double tick_period = 1;
  double ping_mean_period = 2.5;
  JitterLaw ping_jitter = JitterLaw::Uniform0To5s;
  double jitter_fraction = 0.2;
  PayloadKind payload = PayloadKind::RandomNumber;
  std::string file_name = "foo.txt";
  std::size_t n_client_procs = 1;
  std::string host = "127.0.0.1";
  std::uint16_t port = 8000;
  std::optional<std::size_t> max_total_conns;
  Transport transport = Transport::WebSocket;
  /// Closed loop: each connection pings again as soon as its reply lands.
  bool saturate = false;
  /// How long to wait for outstanding replies once `duration` has elapsed.
  double drain = 5;
  std::uint64_t seed = 1;

  /// Throws BadConfig.
  void validate() const;
  static Scenario from_key_values(const KeyValues &kv);
  [[nodiscard]] KeyValues to_key_values() const;
};

std::vector<std::string> preset_names();

/// Named scenario from the compiled-in presets file. Throws UnknownPreset.
Scenario preset(std::string_view name);

/// The preset's suggested cluster topology ("cluster.*" keys, prefix stripped).
KeyValues preset_cluster_overrides(std::string_view name);

/// Next ping delay under the scenario's jitter law.
std::chrono::milliseconds draw_ping_interval(const Scenario &s, std::mt19937_64 &rng);

/// Share of `total` assigned to client process `proc` of `n_procs`; the
/// remainder goes to the lowest indices.
std::size_t share_for_proc(std::size_t total, std::size_t n_procs, std::size_t proc);

/// RTT histogram with fixed bucket edges in milliseconds; the last bucket
/// is open-ended.
class LatencyHistogram {
 public:
  static constexpr std::array<double, 15> kEdgesMs{0.1, 0.2, 0.5, 1, 2, 5, 10, 20, 50, 100, 200, 500, 1000, 2000, 5000};
  static constexpr std::size_t kBuckets = kEdgesMs.size() + 1;

  void add(double ms);
  void merge(const LatencyHistogram &other);
  [[nodiscard]] std::uint64_t total() const;
  /// Upper edge of the bucket holding quantile `q`; infinity for the last.
  [[nodiscard]] double quantile_upper_ms(double q) const;
  [[nodiscard]] const std::array<std::uint64_t, kBuckets> &counts() const noexcept { return counts_; }
  std::array<std::uint64_t, kBuckets> &counts() noexcept { return counts_; }

 private:
  std::array<std::uint64_t, kBuckets> counts_{};
};

struct ProcReport {
  int proc_index = 0;
  pid_t pid = 0;
  std::uint64_t attempted = 0;
  std::uint64_t established = 0;
  std::uint64_t dropped = 0;
  std::uint64_t pings_sent = 0;
  std::uint64_t pongs_received = 0;
  std::uint64_t bytes_out = 0;
  std::uint64_t bytes_in = 0;
  /// Peak simultaneously open connections.
  std::uint64_t peak_open = 0;
  double rtt_sum_ms = 0;
  LatencyHistogram rtt;
  /// Replies received in each second of the run.
  std::vector<std::uint64_t> pongs_per_second;
  /// Connections attempted by the end of each second.
  std::vector<std::uint64_t> attempted_by_second;
  std::string error;
};

struct RunReport {
  Scenario scenario;
  double elapsed_s = 0;
  std::uint64_t attempted = 0;
  std::uint64_t established = 0;
  std::uint64_t dropped = 0;
  std::uint64_t pings_sent = 0;
  std::uint64_t pongs_received = 0;
  std::uint64_t bytes_out = 0;
  std::uint64_t bytes_in = 0;
  std::uint64_t peak_open = 0;
  double rtt_sum_ms = 0;
  LatencyHistogram rtt;
  std::vector<std::uint64_t> pongs_per_second;
  std::vector<ProcReport> procs;

  [[nodiscard]] double drop_rate() const noexcept {
    return attempted == 0 ? 0.0 : static_cast<double>(dropped) / static_cast<double>(attempted);
  }
  /// Client-side wire bytes (both directions, handshakes included) per
  /// request or reply carried.
  [[nodiscard]] double wire_bytes_per_message() const noexcept;
  [[nodiscard]] double mean_rtt_ms() const noexcept {
    return pongs_received == 0 ? 0.0 : rtt_sum_ms / static_cast<double>(pongs_received);
  }
  /// Replies per second over the active part of the run.
  [[nodiscard]] double throughput() const noexcept;
};

struct RunHooks {
  /// Called in the parent once every client process is forked.
  std::function<void(const std::vector<pid_t> &)> on_clients_started;
};

/// Forks scenario.n_client_procs clients, drives them for the scenario's
/// duration and merges their reports. Throws TargetUnreachable when nothing
/// at all could connect; partial runs return with their drop counts.
RunReport run(const Scenario &scenario, const RunHooks &hooks = {});

/// One client process's work, in-process. Exposed for tests.
ProcReport run_client_proc(const Scenario &scenario, int proc_index);

RunReport merge_reports(const Scenario &scenario, std::vector<ProcReport> procs, double elapsed_s);

std::string proc_report_to_json(const ProcReport &r);
ProcReport proc_report_from_json(std::string_view text);

/// Per-second CSV: second,pongs,attempted plus per-process columns.
void write_report_csv(const RunReport &report, const std::filesystem::path &path);
void write_latency_csv(const RunReport &report, const std::filesystem::path &path);
std::string summarize(const RunReport &report);
/// key=value lines, one per headline figure.
KeyValues summary_values(const RunReport &report);

struct TransportResult {
  Transport transport = Transport::WebSocket;
  RunReport report;
  /// Analytical per-message bytes at the run's payload size.
  std::size_t model_bytes_per_message = 0;
};

struct Comparison {
  std::vector<TransportResult> results;
  /// Measured wire bytes per message, long-poll over WebSocket, when both ran.
  std::optional<double> wire_ratio;
};

/// Runs the same scenario against each transport's endpoint (port per
/// transport). Throws NoTransports for an empty list.
Comparison compare(const std::vector<Transport> &transports, const Scenario &scenario,
                   const std::map<Transport, std::uint16_t> &ports);

}  // namespace wsforge
