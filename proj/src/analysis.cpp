#include "wsforge/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <sstream>

#include "wsforge/error.hpp"

namespace wsforge {

void AmdahlModel::validate() const {
  if (!(P >= 0 && P <= 1)) throw Error(ErrorCode::BadConfig, "P must be in [0, 1]");
  if (!(N >= 1)) throw Error(ErrorCode::BadConfig, "N must be >= 1");
}

double amdahl_speedup(const AmdahlModel &model) {
  model.validate();
  return 1.0 / ((1.0 - model.P) + model.P / model.N);
}

double amdahl_limit(double P) {
  if (!(P >= 0 && P <= 1)) throw Error(ErrorCode::BadConfig, "P must be in [0, 1]");
  if (P == 1.0) throw Error(ErrorCode::DivergesAtOne, "speedup is unbounded when P = 1");
  return 1.0 / (1.0 - P);
}

ScalingFit scaling_fit(std::vector<ScalingPoint> points) {
  if (points.size() < 2) throw Error(ErrorCode::DegenerateInput, "scaling fit needs at least 2 points");
  for (std::size_t i = 1; i < points.size(); ++i) {
    if (!(points[i].cores > points[i - 1].cores)) {
      throw Error(ErrorCode::DegenerateInput, "core counts must be strictly increasing");
    }
  }
  if (!(points[0].cores > 0) || points[0].throughput == 0) {
    throw Error(ErrorCode::DegenerateInput, "baseline throughput and cores must be nonzero");
  }
  ScalingFit fit;
  std::vector<double> xs;
  for (const auto &p : points) {
    fit.implied_speedup.push_back(p.throughput / points[0].throughput);
    xs.push_back(p.cores / points[0].cores);
  }
  const auto n = static_cast<double>(points.size());
  double mx = 0;
  double my = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    mx += xs[i];
    my += fit.implied_speedup[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0;
  double sxx = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sxy += (xs[i] - mx) * (fit.implied_speedup[i] - my);
    sxx += (xs[i] - mx) * (xs[i] - mx);
  }
  fit.efficiency_per_core = sxy / sxx;
  fit.half_regime = fit.efficiency_per_core >= kHalfRegimeLow && fit.efficiency_per_core <= kHalfRegimeHigh;
  fit.points = std::move(points);
  return fit;
}

double overhead_ratio(std::size_t payload, const HeaderProfile &profile) {
  if (payload == 0) throw Error(ErrorCode::BadConfig, "payload must be > 0");
  const auto poll = measure_per_message_bytes(Transport::Poll, payload, profile);
  const auto ws = measure_per_message_bytes(Transport::WebSocket, payload, profile, false);
  return static_cast<double>(poll) / static_cast<double>(ws);
}

MetricsAnalysis analyze_metrics(const std::vector<MetricsSample> &series) {
  if (series.empty()) throw Error(ErrorCode::DegenerateInput, "no samples to analyze");
  MetricsAnalysis out;
  std::int64_t lo = series.front().t_ms;
  std::int64_t hi = lo;
  std::map<Role, RoleUsage> roles;
  std::map<Role, std::set<pid_t>> pids;
  std::map<Role, std::set<pid_t>> dead;
  // Last counters seen per pid; summed per role at the end.
  std::map<pid_t, MetricsSample> last;
  for (const auto &s : series) {
    lo = std::min(lo, s.t_ms);
    hi = std::max(hi, s.t_ms);
    auto &r = roles[s.role];
    r.role = s.role;
    pids[s.role].insert(s.pid);
    if (s.dead) {
      dead[s.role].insert(s.pid);
      continue;
    }
    ++r.samples;
    r.mean_cpu_pct += s.cpu_pct;
    r.peak_cpu_pct = std::max(r.peak_cpu_pct, s.cpu_pct);
    r.peak_rss_bytes = std::max(r.peak_rss_bytes, s.rss_bytes);
    r.peak_active_conns = std::max(r.peak_active_conns, s.active_conns);
    auto &l = last[s.pid];
    if (s.t_ms >= l.t_ms) l = s;
  }
  for (const auto &[pid, s] : last) {
    auto &r = roles[s.role];
    r.final_msgs_in += s.msgs_in;
    r.final_msgs_out += s.msgs_out;
    r.final_drops += s.drops;
  }
  for (auto &[role, r] : roles) {
    r.processes = pids[role].size();
    r.dead_processes = dead[role].size();
    if (r.samples > 0) r.mean_cpu_pct /= static_cast<double>(r.samples);
    out.roles.push_back(r);
  }
  out.span_ms = hi - lo;
  return out;
}

std::string format_analysis_report(const MetricsAnalysis &a) {
  std::ostringstream ss;
  ss.setf(std::ios::fixed);
  ss.precision(1);
  ss << "metrics span: " << static_cast<double>(a.span_ms) / 1000.0 << " s\n";
  for (const auto &r : a.roles) {
    ss << to_string(r.role) << ": " << r.processes << " process(es), " << r.samples << " samples\n";
    ss << "  cpu mean " << r.mean_cpu_pct << "%, peak " << r.peak_cpu_pct << "%\n";
    ss << "  rss peak " << static_cast<double>(r.peak_rss_bytes) / (1024.0 * 1024.0) << " MiB\n";
    ss << "  conns peak " << r.peak_active_conns << ", msgs in " << r.final_msgs_in << ", out " << r.final_msgs_out
       << ", drops " << r.final_drops << "\n";
    if (r.dead_processes > 0) ss << "  " << r.dead_processes << " process(es) exited during sampling\n";
  }
  return ss.str();
}

KeyValues analysis_summary(const MetricsAnalysis &a) {
  KeyValues kv;
  kv["span_ms"] = std::to_string(a.span_ms);
  for (const auto &r : a.roles) {
    const std::string p = std::string(to_string(r.role)) + ".";
    std::ostringstream mean;
    mean << r.mean_cpu_pct;
    std::ostringstream peak;
    peak << r.peak_cpu_pct;
    kv[p + "processes"] = std::to_string(r.processes);
    kv[p + "samples"] = std::to_string(r.samples);
    kv[p + "cpu_mean_pct"] = mean.str();
    kv[p + "cpu_peak_pct"] = peak.str();
    kv[p + "rss_peak_bytes"] = std::to_string(r.peak_rss_bytes);
    kv[p + "conns_peak"] = std::to_string(r.peak_active_conns);
    kv[p + "msgs_in"] = std::to_string(r.final_msgs_in);
    kv[p + "msgs_out"] = std::to_string(r.final_msgs_out);
    kv[p + "drops"] = std::to_string(r.final_drops);
    kv[p + "dead"] = std::to_string(r.dead_processes);
  }
  return kv;
}

}  // namespace wsforge
