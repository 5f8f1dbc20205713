#pragma once

#include <sys/types.h>

#include <atomic>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "wsforge/role.hpp"

namespace wsforge {

struct MetricsSample {
  std::int64_t t_ms = 0;
  pid_t pid = 0;
  Role role = Role::Worker;
  int proc_index = 0;
  /// Percent of one core; may exceed 100 for multithreaded processes.
  double cpu_pct = 0;
  std::uint64_t rss_bytes = 0;
  std::uint64_t active_conns = 0;
  std::uint64_t msgs_in = 0;
  std::uint64_t msgs_out = 0;
  std::uint64_t drops = 0;
  /// Process had exited at this tick; every other field but t/pid/role/index is zero.
  bool dead = false;

  bool operator==(const MetricsSample &) const = default;
};

struct SampleTarget {
  pid_t pid = 0;
  Role role = Role::Worker;
  int proc_index = 0;
  /// Control socket to pull STATS from; empty for processes without one.
  std::string control_name;
};

/// Cumulative CPU time (user + system) and resident set of a live process.
struct ProcStat {
  std::chrono::nanoseconds cpu_time{0};
  std::uint64_t rss_bytes = 0;
};

/// Reads /proc/<pid>/stat and statm. nullopt if the process is gone.
/// Throws PermissionDenied when the files exist but cannot be read.
std::optional<ProcStat> read_proc_stat(pid_t pid);

inline constexpr std::chrono::milliseconds kMinSamplePeriod{100};

/// Incremental sampler: call tick() once per period.
class MetricsCollector {
 public:
  explicit MetricsCollector(std::vector<SampleTarget> targets);

  /// Starts tracking more processes; their first tick primes the baseline.
  void add(const std::vector<SampleTarget> &targets);

  /// Samples every target once at `now`; the first tick only primes CPU
  /// baselines and records nothing.
  void tick(std::chrono::steady_clock::time_point now);

  [[nodiscard]] const std::vector<MetricsSample> &samples() const noexcept { return samples_; }
  std::vector<MetricsSample> take() { return std::move(samples_); }

 private:
  struct Tracked {
    SampleTarget target;
    std::optional<std::chrono::nanoseconds> last_cpu;
    std::chrono::steady_clock::time_point last_wall;
    bool dead = false;
  };
  std::vector<Tracked> tracked_;
  std::optional<std::chrono::steady_clock::time_point> start_;
  std::vector<MetricsSample> samples_;
};

/// Blocking sample run. Throws BadConfig for period < 100 ms and
/// DegenerateInput when a target is not alive at start.
std::vector<MetricsSample> sample(const std::vector<SampleTarget> &targets, std::chrono::milliseconds period,
                                  std::chrono::milliseconds duration);

/// Background sampler for use alongside a benchmark run.
class Sampler {
 public:
  Sampler(std::vector<SampleTarget> targets, std::chrono::milliseconds period);
  ~Sampler();
  Sampler(const Sampler &) = delete;
  Sampler &operator=(const Sampler &) = delete;

  /// Adds processes that appear after start (e.g. load-generator clients).
  void add_targets(const std::vector<SampleTarget> &targets);
  /// Stops the thread and returns everything collected.
  std::vector<MetricsSample> stop();

 private:
  void loop();

  std::chrono::milliseconds period_;
  std::mutex mutex_;
  std::vector<SampleTarget> pending_;
  std::vector<MetricsSample> collected_;
  std::atomic<bool> stop_{false};
  std::thread thread_;
};

inline constexpr std::string_view kMetricsCsvHeader =
    "t_ms,pid,role,proc_index,cpu_pct,rss_bytes,active_conns,msgs_in,msgs_out,drops";

/// Writes the series sorted by (t_ms, role, proc_index). Throws
/// DegenerateInput for an empty series and IoError on write failure.
void export_csv(const std::vector<MetricsSample> &series, const std::filesystem::path &path);
std::string format_csv(const std::vector<MetricsSample> &series);

/// Parses a file written by export_csv. Throws BadConfig on schema errors.
std::vector<MetricsSample> import_csv(const std::filesystem::path &path);
std::vector<MetricsSample> parse_csv(std::string_view text);

/// Writes a gnuplot script next to `csv_path` plotting CPU% over time, one
/// curve per process, one plot per role. Returns the script path.
std::filesystem::path emit_plot_script(const std::filesystem::path &csv_path);
std::string format_plot_script(const std::vector<MetricsSample> &series, const std::filesystem::path &csv_path);

}  // namespace wsforge
