#include "wsforge/metrics.hpp"

#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <charconv>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "wsforge/error.hpp"
#include "wsforge/net.hpp"

namespace wsforge {
namespace {

using Clock = std::chrono::steady_clock;

std::optional<std::string> read_small_file(const std::string &path) {
  std::ifstream in(path);
  if (!in) {
    if (errno == EACCES || errno == EPERM) throw Error(ErrorCode::PermissionDenied, "cannot read " + path);
    return std::nullopt;
  }
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::uint64_t stat_u64(const std::map<std::string, std::string> &kv, const char *key) {
  auto it = kv.find(key);
  if (it == kv.end()) return 0;
  std::uint64_t v = 0;
  std::from_chars(it->second.data(), it->second.data() + it->second.size(), v);
  return v;
}

std::string format_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

std::string quote_field(std::string_view f) {
  if (f.find_first_of(",\"\r\n") == std::string_view::npos) return std::string(f);
  std::string out = "\"";
  for (char c : f) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

/// Splits one RFC 4180 record starting at `pos`; advances past its line break.
std::vector<std::string> read_record(std::string_view text, std::size_t &pos) {
  std::vector<std::string> fields(1);
  bool quoted = false;
  while (pos < text.size()) {
    const char c = text[pos++];
    if (quoted) {
      if (c == '"') {
        if (pos < text.size() && text[pos] == '"') {
          fields.back() += '"';
          ++pos;
        } else {
          quoted = false;
        }
      } else {
        fields.back() += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.emplace_back();
    } else if (c == '\n') {
      break;
    } else if (c != '\r') {
      fields.back() += c;
    }
  }
  if (quoted) throw Error(ErrorCode::BadConfig, "unterminated quoted CSV field");
  return fields;
}

template <typename T>
T parse_number(const std::string &s, const char *what) {
  T v{};
  const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || end != s.data() + s.size()) {
    throw Error(ErrorCode::BadConfig, std::string("bad ") + what + " value '" + s + "'");
  }
  return v;
}

bool sample_less(const MetricsSample &a, const MetricsSample &b) {
  if (a.t_ms != b.t_ms) return a.t_ms < b.t_ms;
  if (a.role != b.role) return a.role < b.role;
  if (a.proc_index != b.proc_index) return a.proc_index < b.proc_index;
  return a.pid < b.pid;
}

}  // namespace

std::optional<ProcStat> read_proc_stat(pid_t pid) {
  const std::string base = "/proc/" + std::to_string(pid);
  const auto stat = read_small_file(base + "/stat");
  if (!stat) return std::nullopt;
  // The command name may hold spaces or parentheses; fields resume after the last ')'.
  const auto close = stat->rfind(')');
  if (close == std::string::npos) return std::nullopt;
  std::istringstream fields(stat->substr(close + 2));
  std::string state;
  fields >> state;
  if (state == "Z" || state == "X") return std::nullopt;
  // Fields 4..13 precede utime (14) and stime (15).
  std::string skip;
  for (int i = 4; i <= 13; ++i) fields >> skip;
  std::uint64_t utime = 0;
  std::uint64_t stime = 0;
  fields >> utime >> stime;
  if (!fields) return std::nullopt;

  ProcStat out;
  static const long ticks = ::sysconf(_SC_CLK_TCK);
  out.cpu_time = std::chrono::nanoseconds((utime + stime) * 1'000'000'000ULL / static_cast<std::uint64_t>(ticks));
  if (const auto statm = read_small_file(base + "/statm")) {
    std::istringstream s(*statm);
    std::uint64_t size = 0;
    std::uint64_t resident = 0;
    s >> size >> resident;
    static const long page = ::sysconf(_SC_PAGESIZE);
    out.rss_bytes = resident * static_cast<std::uint64_t>(page);
  }
  return out;
}

MetricsCollector::MetricsCollector(std::vector<SampleTarget> targets) { add(targets); }

void MetricsCollector::add(const std::vector<SampleTarget> &targets) {
  for (const auto &t : targets) tracked_.push_back({t, std::nullopt, {}, false});
}

void MetricsCollector::tick(Clock::time_point now) {
  if (!start_) start_ = now;
  const auto t_ms = std::chrono::duration_cast<std::chrono::milliseconds>(now - *start_).count();
  for (auto &tr : tracked_) {
    if (tr.dead) continue;
    const auto stat = read_proc_stat(tr.target.pid);
    if (!stat) {
      tr.dead = true;
      if (tr.last_cpu) {
        MetricsSample s;
        s.t_ms = t_ms;
        s.pid = tr.target.pid;
        s.role = tr.target.role;
        s.proc_index = tr.target.proc_index;
        s.dead = true;
        samples_.push_back(s);
      }
      continue;
    }
    if (tr.last_cpu) {
      MetricsSample s;
      s.t_ms = t_ms;
      s.pid = tr.target.pid;
      s.role = tr.target.role;
      s.proc_index = tr.target.proc_index;
      const double wall = std::chrono::duration<double>(now - tr.last_wall).count();
      const double cpu = std::chrono::duration<double>(stat->cpu_time - *tr.last_cpu).count();
      s.cpu_pct = wall > 0 ? std::max(0.0, cpu / wall * 100.0) : 0.0;
      s.rss_bytes = stat->rss_bytes;
      if (!tr.target.control_name.empty()) {
        if (auto reply = control_request(tr.target.control_name, "STATS", std::chrono::milliseconds(500))) {
          const auto kv = parse_kv_line(*reply);
          s.active_conns = stat_u64(kv, "active_conns");
          s.msgs_in = stat_u64(kv, "msgs_in");
          s.msgs_out = stat_u64(kv, "msgs_out");
          s.drops = stat_u64(kv, "drops");
        }
      }
      samples_.push_back(s);
    }
    tr.last_cpu = stat->cpu_time;
    tr.last_wall = now;
  }
}

std::vector<MetricsSample> sample(const std::vector<SampleTarget> &targets, std::chrono::milliseconds period,
                                  std::chrono::milliseconds duration) {
  if (period < kMinSamplePeriod) throw Error(ErrorCode::BadConfig, "sample period must be at least 100 ms");
  for (const auto &t : targets) {
    if (!read_proc_stat(t.pid)) {
      throw Error(ErrorCode::DegenerateInput, "process " + std::to_string(t.pid) + " is not running");
    }
  }
  MetricsCollector collector(targets);
  const auto start = Clock::now();
  collector.tick(start);
  const auto ticks = duration / period;
  for (std::int64_t i = 1; i <= ticks; ++i) {
    const auto when = start + i * period;
    std::this_thread::sleep_until(when);
    collector.tick(Clock::now());
  }
  return collector.take();
}

Sampler::Sampler(std::vector<SampleTarget> targets, std::chrono::milliseconds period)
    : period_(period), pending_(std::move(targets)) {
  if (period < kMinSamplePeriod) throw Error(ErrorCode::BadConfig, "sample period must be at least 100 ms");
  thread_ = std::thread([this] { loop(); });
}

Sampler::~Sampler() { stop(); }

void Sampler::add_targets(const std::vector<SampleTarget> &targets) {
  std::lock_guard lock(mutex_);
  pending_.insert(pending_.end(), targets.begin(), targets.end());
}

std::vector<MetricsSample> Sampler::stop() {
  stop_ = true;
  if (thread_.joinable()) thread_.join();
  std::lock_guard lock(mutex_);
  return std::move(collected_);
}

void Sampler::loop() {
  MetricsCollector collector({});
  auto next = Clock::now();
  while (!stop_) {
    {
      std::lock_guard lock(mutex_);
      collector.add(pending_);
      pending_.clear();
    }
    collector.tick(Clock::now());
    next += period_;
    while (!stop_ && Clock::now() < next) {
      std::this_thread::sleep_for(std::min<Clock::duration>(next - Clock::now(), std::chrono::milliseconds(20)));
    }
  }
  std::lock_guard lock(mutex_);
  collected_ = collector.take();
}

std::string format_csv(const std::vector<MetricsSample> &series) {
  auto sorted = series;
  std::stable_sort(sorted.begin(), sorted.end(), sample_less);
  std::string out(kMetricsCsvHeader);
  out += "\n";
  for (const auto &s : sorted) {
    out += std::to_string(s.t_ms) + "," + std::to_string(s.pid) + "," + quote_field(to_string(s.role)) + "," +
           std::to_string(s.proc_index) + ",";
    if (s.dead) {
      // Dead processes keep their row with the measurement columns left empty.
      out += ",,,,,\n";
      continue;
    }
    out += format_double(s.cpu_pct) + "," + std::to_string(s.rss_bytes) + "," + std::to_string(s.active_conns) +
           "," + std::to_string(s.msgs_in) + "," + std::to_string(s.msgs_out) + "," + std::to_string(s.drops) + "\n";
  }
  return out;
}

void export_csv(const std::vector<MetricsSample> &series, const std::filesystem::path &path) {
  if (series.empty()) throw Error(ErrorCode::DegenerateInput, "no samples to export");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  out << format_csv(series);
  if (!out.flush()) throw Error(ErrorCode::IoError, "write failed: " + path.string());
}

std::vector<MetricsSample> parse_csv(std::string_view text) {
  std::size_t pos = 0;
  const auto header = read_record(text, pos);
  std::string joined;
  for (std::size_t i = 0; i < header.size(); ++i) joined += (i ? "," : "") + header[i];
  if (joined != kMetricsCsvHeader) throw Error(ErrorCode::BadConfig, "unexpected metrics CSV header");
  std::vector<MetricsSample> out;
  while (pos < text.size()) {
    const auto f = read_record(text, pos);
    if (f.size() == 1 && f[0].empty()) continue;
    if (f.size() != 10) throw Error(ErrorCode::BadConfig, "metrics CSV row must have 10 fields");
    MetricsSample s;
    s.t_ms = parse_number<std::int64_t>(f[0], "t_ms");
    s.pid = parse_number<pid_t>(f[1], "pid");
    s.role = parse_role(f[2]);
    s.proc_index = parse_number<int>(f[3], "proc_index");
    if (f[4].empty()) {
      s.dead = true;
    } else {
      s.cpu_pct = parse_number<double>(f[4], "cpu_pct");
      s.rss_bytes = parse_number<std::uint64_t>(f[5], "rss_bytes");
      s.active_conns = parse_number<std::uint64_t>(f[6], "active_conns");
      s.msgs_in = parse_number<std::uint64_t>(f[7], "msgs_in");
      s.msgs_out = parse_number<std::uint64_t>(f[8], "msgs_out");
      s.drops = parse_number<std::uint64_t>(f[9], "drops");
    }
    out.push_back(s);
  }
  return out;
}

std::vector<MetricsSample> import_csv(const std::filesystem::path &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_csv(ss.str());
}

std::string format_plot_script(const std::vector<MetricsSample> &series, const std::filesystem::path &csv_path) {
  // role -> (proc_index, pid) curves, both in stable order.
  std::map<Role, std::set<std::pair<int, pid_t>>> groups;
  for (const auto &s : series) groups[s.role].insert({s.proc_index, s.pid});

  const std::string csv = csv_path.string();
  std::string out;
  out += "# CPU usage per process over time, one plot per role.\n";
  out += "# Render with: gnuplot -persist <this file>\n";
  out += "set datafile separator ','\n";
  out += "set key outside right\n";
  out += "set grid\n";
  out += "set xlabel 'time (s)'\n";
  out += "set ylabel 'CPU (%)'\n";
  out += "set yrange [0:*]\n";
  out += "set multiplot layout " + std::to_string(std::max<std::size_t>(groups.size(), 1)) + ",1\n";
  for (const auto &[role, procs] : groups) {
    out += "set title '" + std::string(to_string(role)) + "'\n";
    out += "plot";
    bool first = true;
    for (const auto &[index, pid] : procs) {
      out += first ? " " : ", \\\n     ";
      first = false;
      out += "'" + csv + "' every ::1 using ($1/1000):($2 == " + std::to_string(pid) + " ? $5 : 1/0) with lines title '" +
             std::string(to_string(role)) + " " + std::to_string(index) + "'";
    }
    out += "\n";
  }
  out += "unset multiplot\n";
  return out;
}

std::filesystem::path emit_plot_script(const std::filesystem::path &csv_path) {
  const auto series = import_csv(csv_path);
  auto script = csv_path;
  script.replace_extension(".gp");
  std::ofstream out(script, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + script.string());
  out << format_plot_script(series, csv_path);
  if (!out.flush()) throw Error(ErrorCode::IoError, "write failed: " + script.string());
  return script;
}

}  // namespace wsforge
