#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "wsforge/comet.hpp"
#include "wsforge/config.hpp"
#include "wsforge/metrics.hpp"

namespace wsforge {

/// Parallel fraction P in [0, 1] run on N >= 1 processors.
struct AmdahlModel {
  double P = 0;
  double N = 1;

  /// Throws BadConfig outside the domain.
  void validate() const;
};

/// speedup(N) = 1 / ((1 - P) + P / N).
double amdahl_speedup(const AmdahlModel &model);

/// 1 / (1 - P), the speedup as N grows without bound. Throws DivergesAtOne at P = 1.
double amdahl_limit(double P);

struct ScalingPoint {
  double cores = 0;
  double throughput = 0;
};

/// Band of per-core efficiency slopes counted as the "n/2" scaling regime.
inline constexpr double kHalfRegimeLow = 0.4;
inline constexpr double kHalfRegimeHigh = 0.7;

struct ScalingFit {
  std::vector<ScalingPoint> points;
  /// throughput[i] / throughput[0].
  std::vector<double> implied_speedup;
  /// Least-squares slope of speedup against cores / cores[0].
  double efficiency_per_core = 0;
  bool half_regime = false;
};

/// Throws DegenerateInput for fewer than 2 points, a zero baseline or core
/// counts that are not strictly increasing.
ScalingFit scaling_fit(std::vector<ScalingPoint> points);

/// Poll wire bytes over unmasked WebSocket wire bytes for one message.
/// Throws BadConfig for a zero payload.
double overhead_ratio(std::size_t payload, const HeaderProfile &profile);

struct RoleUsage {
  Role role = Role::Worker;
  std::size_t processes = 0;
  std::size_t samples = 0;
  double mean_cpu_pct = 0;
  double peak_cpu_pct = 0;
  std::uint64_t peak_rss_bytes = 0;
  std::uint64_t peak_active_conns = 0;
  std::uint64_t final_msgs_in = 0;
  std::uint64_t final_msgs_out = 0;
  std::uint64_t final_drops = 0;
  std::size_t dead_processes = 0;
};

struct MetricsAnalysis {
  std::int64_t span_ms = 0;
  std::vector<RoleUsage> roles;
};

/// Per-role aggregates over a metrics series. Throws DegenerateInput when empty.
MetricsAnalysis analyze_metrics(const std::vector<MetricsSample> &series);

std::string format_analysis_report(const MetricsAnalysis &analysis);
KeyValues analysis_summary(const MetricsAnalysis &analysis);

}  // namespace wsforge
