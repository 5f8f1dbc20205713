#include <signal.h>

#include <CLI11.hpp>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "wsforge/analysis.hpp"
#include "wsforge/cluster.hpp"
#include "wsforge/comet.hpp"
#include "wsforge/config.hpp"
#include "wsforge/error.hpp"
#include "wsforge/loadgen.hpp"
#include "wsforge/metrics.hpp"

namespace fs = std::filesystem;
using namespace wsforge;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct CommonOpts {
  std::string config;
  std::vector<std::string> sets;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<double> duration;
  std::optional<double> max_drop;
  bool spawn = false;
};

fs::path output_root(const CommonOpts &o) {
  if (!o.out.empty()) return o.out;
  if (const char *env = std::getenv("WSFORGE_OUT"); env && *env) return env;
  return "out";
}

fs::path make_run_dir(const fs::path &root, const std::string &label) {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  ::localtime_r(&now, &tm);
  char stamp[32];
  std::strftime(stamp, sizeof stamp, "%Y%m%d-%H%M%S", &tm);
  fs::path dir = root / ("run-" + std::string(stamp) + "-" + label);
  for (int n = 2; fs::exists(dir); ++n) dir = root / ("run-" + std::string(stamp) + "-" + label + "-" + std::to_string(n));
  fs::create_directories(dir);
  return dir;
}

void write_text(const fs::path &path, const std::string &text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out || !(out << text)) throw Error(ErrorCode::IoError, "cannot write " + path.string());
}

/// Scenario and cluster key=value sets from a preset or config file plus
/// --set overrides; "cluster." keys go to the cluster side.
struct Resolved {
  Scenario scenario;
  KeyValues cluster;
};

Resolved resolve(const std::string &preset_name, const CommonOpts &o) {
  KeyValues scenario_kv;
  KeyValues cluster_kv;
  if (!preset_name.empty()) {
    scenario_kv = preset(preset_name).to_key_values();
    cluster_kv = preset_cluster_overrides(preset_name);
  }
  auto split_into = [&](const KeyValues &kv) {
    for (const auto &[k, v] : kv) {
      if (k.starts_with("cluster.")) {
        cluster_kv[k.substr(8)] = v;
      } else {
        scenario_kv[k] = v;
      }
    }
  };
  if (!o.config.empty()) split_into(load_key_values(o.config));
  KeyValues sets;
  for (const auto &s : o.sets) apply_override(sets, s);
  split_into(sets);
  if (o.seed) scenario_kv["seed"] = std::to_string(*o.seed);
  if (o.duration) {
    std::ostringstream d;
    d << *o.duration;
    scenario_kv["duration"] = d.str();
  }
  return {Scenario::from_key_values(scenario_kv), cluster_kv};
}

ClusterConfig cluster_for(const Resolved &r) {
  KeyValues kv = r.cluster;
  if (!kv.contains("public_port")) kv["public_port"] = std::to_string(r.scenario.port);
  if (!kv.contains("expected_peak_conns") && r.scenario.max_total_conns) {
    kv["expected_peak_conns"] = std::to_string(*r.scenario.max_total_conns);
  }
  return ClusterConfig::from_key_values(kv);
}

std::vector<SampleTarget> cluster_targets(const ClusterHandle &h) {
  std::vector<SampleTarget> out;
  for (const auto &p : h.processes()) out.push_back({p.pid, p.role, p.index, p.control});
  return out;
}

/// Blocks SIGINT/SIGTERM so they can be waited for synchronously; forked
/// children unblock them again.
sigset_t block_stop_signals() {
  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &set, nullptr);
  return set;
}

int cmd_serve(const CommonOpts &o, const std::string &transport_name) {
  const Transport transport = parse_transport(transport_name);
  KeyValues raw;
  if (!o.config.empty()) raw = load_key_values(o.config);
  for (const auto &s : o.sets) apply_override(raw, s);
  // Same files as bench: "cluster." keys and bare keys both configure the cluster.
  KeyValues kv;
  for (const auto &[k, v] : raw) kv[k.starts_with("cluster.") ? k.substr(8) : k] = v;
  const sigset_t stop = block_stop_signals();

  if (transport == Transport::LongPoll) {
    CometOptions opts;
    opts.port = static_cast<std::uint16_t>(kv_int(kv, "port", opts.port));
    opts.control_name = "wsforge.serve." + std::to_string(::getpid()) + ".comet";
    CometServerProcess server(opts);
    std::printf("long-poll server listening on http://127.0.0.1:%u/lpoll\n", opts.port);
    std::fflush(stdout);
    int sig = 0;
    sigwait(&stop, &sig);
    if (auto line = server.shutdown()) std::printf("%s\n", line->c_str());
    return kExitOk;
  }
  if (transport != Transport::WebSocket) throw UsageError("serve supports websocket and long_poll");

  const ClusterConfig config = ClusterConfig::from_key_values(kv);
  ClusterHandle cluster = spawn(config);
  std::printf("cluster up: ws://127.0.0.1:%u/ (%zu load balancer(s), %zu worker(s), %zu store(s))\n",
              config.public_port, config.n_load_balancers, config.n_workers, config.n_stores);
  for (const auto &p : cluster.processes()) std::printf("  %s %d pid=%d\n", std::string(to_string(p.role)).c_str(), p.index, p.pid);
  std::fflush(stdout);
  int sig = 0;
  sigwait(&stop, &sig);
  std::printf("shutting down\n");
  const auto report = cluster.shutdown();
  for (const auto &w : report.workers) std::printf("%s\n", w.to_line().c_str());
  if (report.store_pings_sum) std::printf("store pings_sum=%lld\n", static_cast<long long>(*report.store_pings_sum));
  return kExitOk;
}

int cmd_bench(const CommonOpts &o, const std::string &preset_name, int period_ms) {
  if (preset_name.empty() && o.config.empty()) throw UsageError("bench needs a preset name or --config");
  Resolved r = resolve(preset_name, o);
  std::optional<ClusterHandle> cluster;
  if (o.spawn) cluster.emplace(spawn(cluster_for(r)));

  const fs::path dir = make_run_dir(output_root(o), r.scenario.name);
  write_text(dir / "scenario.conf", format_key_values(r.scenario.to_key_values()));

  Sampler sampler(cluster ? cluster_targets(*cluster) : std::vector<SampleTarget>{}, std::chrono::milliseconds(period_ms));
  RunHooks hooks;
  hooks.on_clients_started = [&](const std::vector<pid_t> &pids) {
    std::vector<SampleTarget> targets;
    for (std::size_t i = 0; i < pids.size(); ++i) targets.push_back({pids[i], Role::Client, static_cast<int>(i), ""});
    sampler.add_targets(targets);
  };

  std::optional<RunReport> report;
  std::string failure;
  try {
    report = run(r.scenario, hooks);
  } catch (const Error &e) {
    failure = e.what();
  }
  auto samples = sampler.stop();
  std::optional<ShutdownReport> shutdown;
  if (cluster) shutdown = cluster->shutdown();

  // Flush whatever exists even when the run itself failed.
  if (!samples.empty()) {
    export_csv(samples, dir / "metrics.csv");
    emit_plot_script(dir / "metrics.csv");
  }
  if (!report) throw Error(ErrorCode::TargetUnreachable, failure);

  write_report_csv(*report, dir / "report.csv");
  write_latency_csv(*report, dir / "latency.csv");
  KeyValues summary = summary_values(*report);
  if (shutdown) {
    std::uint64_t pongs = 0;
    std::uint64_t pings = 0;
    for (const auto &w : shutdown->workers) {
      pongs += w.pongs_sent;
      pings += w.pings_received;
    }
    summary["cluster.pings_received"] = std::to_string(pings);
    summary["cluster.pongs_sent"] = std::to_string(pongs);
    if (shutdown->store_pings_sum) summary["cluster.store_pings_sum"] = std::to_string(*shutdown->store_pings_sum);
  }
  write_text(dir / "summary.txt", format_key_values(summary));
  std::cout << summarize(*report);
  std::cout << "artifacts: " << dir.string() << "\n";
  if (o.max_drop && report->drop_rate() > *o.max_drop) {
    std::fprintf(stderr, "drop rate %.4f exceeds --max-drop %.4f\n", report->drop_rate(), *o.max_drop);
    return kExitRuntime;
  }
  return kExitOk;
}

int cmd_compare(const CommonOpts &o, const std::string &preset_name, std::uint16_t ws_port, std::uint16_t lp_port) {
  Resolved r = resolve(preset_name, o);
  std::optional<ClusterHandle> cluster;
  std::optional<CometServerProcess> comet;
  if (o.spawn) {
    r.scenario.port = ws_port;
    cluster.emplace(spawn(cluster_for(r)));
    CometOptions opts;
    opts.port = lp_port;
    opts.control_name = "wsforge.compare." + std::to_string(::getpid()) + ".comet";
    comet.emplace(opts);
  }
  const auto result = compare({Transport::WebSocket, Transport::LongPoll}, r.scenario,
                              {{Transport::WebSocket, ws_port}, {Transport::LongPoll, lp_port}});
  if (cluster) cluster->shutdown();
  if (comet) comet->shutdown();

  const fs::path dir = make_run_dir(output_root(o), "compare-" + r.scenario.name);
  std::ostringstream text;
  KeyValues summary;
  for (const auto &t : result.results) {
    const std::string name(to_string(t.transport));
    text << "== " << name << "\n" << summarize(t.report);
    text << "  model:       " << t.model_bytes_per_message << " bytes per message\n";
    write_report_csv(t.report, dir / (name + "-report.csv"));
    write_latency_csv(t.report, dir / (name + "-latency.csv"));
    for (const auto &[k, v] : summary_values(t.report)) summary[name + "." + k] = v;
  }
  if (result.wire_ratio) {
    std::ostringstream ratio;
    ratio.precision(4);
    ratio << *result.wire_ratio;
    text << "ratio=" << ratio.str() << " (long_poll / websocket wire bytes per message)\n";
    summary["wire_ratio"] = ratio.str();
  }
  write_text(dir / "compare.txt", text.str());
  write_text(dir / "summary.txt", format_key_values(summary));
  std::cout << text.str() << "artifacts: " << dir.string() << "\n";
  return kExitOk;
}

double parse_assignment_value(const std::vector<std::string> &args, const std::string &key) {
  for (const auto &a : args) {
    const auto eq = a.find('=');
    if (eq != std::string::npos && a.substr(0, eq) == key) {
      try {
        return std::stod(a.substr(eq + 1));
      } catch (const std::exception &) {
        throw UsageError("bad value in '" + a + "'");
      }
    }
  }
  throw UsageError("--amdahl needs " + key + "=<value>");
}

std::vector<ScalingPoint> parse_scaling(const std::string &text) {
  std::vector<ScalingPoint> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto colon = item.find(':');
    if (colon == std::string::npos) throw UsageError("--scaling expects cores:throughput pairs");
    try {
      out.push_back({std::stod(item.substr(0, colon)), std::stod(item.substr(colon + 1))});
    } catch (const std::exception &) {
      throw UsageError("bad scaling point '" + item + "'");
    }
  }
  return out;
}

struct AnalyzeOpts {
  std::vector<std::string> amdahl;
  std::optional<double> limit;
  std::optional<std::size_t> overhead_payload;
  std::string profile = "browser_realistic";
  std::string scaling;
  std::string metrics;
};

int cmd_analyze(const AnalyzeOpts &a) {
  bool did = false;
  if (!a.amdahl.empty()) {
    const AmdahlModel m{parse_assignment_value(a.amdahl, "P"), parse_assignment_value(a.amdahl, "N")};
    std::printf("speedup = %.3f\n", amdahl_speedup(m));
    if (m.P < 1) std::printf("limit = %.3f\n", amdahl_limit(m.P));
    did = true;
  }
  if (a.limit) {
    std::printf("limit = %.3f\n", amdahl_limit(*a.limit));
    did = true;
  }
  if (a.overhead_payload) {
    HeaderProfile profile;
    if (a.profile == "browser_realistic") {
      profile = browser_realistic_header_profile();
    } else if (a.profile == "minimal") {
      profile = minimal_header_profile();
    } else {
      throw UsageError("unknown profile '" + a.profile + "' (browser_realistic, minimal)");
    }
    const auto poll = measure_per_message_bytes(Transport::Poll, *a.overhead_payload, profile);
    const auto ws = measure_per_message_bytes(Transport::WebSocket, *a.overhead_payload, profile);
    std::printf("poll_bytes = %zu\nwebsocket_bytes = %zu\nratio = %.3f\n", poll, ws,
                overhead_ratio(*a.overhead_payload, profile));
    did = true;
  }
  if (!a.scaling.empty()) {
    const auto fit = scaling_fit(parse_scaling(a.scaling));
    std::printf("speedups =");
    for (double s : fit.implied_speedup) std::printf(" %.3f", s);
    std::printf("\nefficiency_per_core = %.3f\nhalf_regime = %s\n", fit.efficiency_per_core,
                fit.half_regime ? "true" : "false");
    did = true;
  }
  if (!a.metrics.empty()) {
    const auto analysis = analyze_metrics(import_csv(a.metrics));
    std::cout << format_analysis_report(analysis);
    did = true;
  }
  if (!did) throw UsageError("analyze needs --amdahl, --limit, --overhead, --scaling or --metrics");
  return kExitOk;
}

int cmd_report(const std::string &dir_name) {
  const fs::path dir = dir_name;
  if (!fs::is_directory(dir)) throw UsageError("no such directory: " + dir_name);
  std::vector<fs::path> runs;
  if (fs::exists(dir / "summary.txt")) runs.push_back(dir);
  for (const auto &entry : fs::directory_iterator(dir)) {
    if (entry.is_directory() && fs::exists(entry.path() / "summary.txt")) runs.push_back(entry.path());
  }
  std::sort(runs.begin(), runs.end());
  if (runs.empty()) throw UsageError("no benchmark runs under " + dir_name);

  std::ostringstream text;
  for (const auto &run_dir : runs) {
    const auto summary = load_key_values(run_dir / "summary.txt");
    text << "== " << run_dir.filename().string() << "\n";
    for (const auto &[k, v] : summary) text << "  " << k << " = " << v << "\n";
    if (fs::exists(run_dir / "metrics.csv")) {
      const auto analysis = analyze_metrics(import_csv(run_dir / "metrics.csv"));
      write_text(run_dir / "analysis.txt", format_analysis_report(analysis));
      write_text(run_dir / "analysis_summary.txt", format_key_values(analysis_summary(analysis)));
      std::istringstream lines(format_analysis_report(analysis));
      for (std::string line; std::getline(lines, line);) text << "  " << line << "\n";
    }
  }
  write_text(dir / "report.txt", text.str());
  std::cout << text.str();
  return kExitOk;
}

bool usage_code(ErrorCode c) {
  return c == ErrorCode::BadConfig || c == ErrorCode::UnknownPreset || c == ErrorCode::NoTransports;
}

}  // namespace

int main(int argc, char **argv) {
  CLI::App app{"WebSocket stack, cluster server and benchmark harness"};
  app.require_subcommand(1);

  CommonOpts common;
  auto add_common = [&](CLI::App *sub) {
    sub->add_option("--config", common.config, "key=value config file");
    sub->add_option("--set", common.sets, "override key=value (repeatable)");
    sub->add_option("--out", common.out, "output directory (default: $WSFORGE_OUT or ./out)");
    sub->add_option("--seed", common.seed, "seed for every randomized schedule");
    sub->add_option("--duration", common.duration, "run length in seconds");
    sub->add_option("--max-drop", common.max_drop, "fail when the drop rate exceeds this fraction");
    sub->add_flag("--spawn", common.spawn, "start the servers for this run");
  };

  std::string transport = "websocket";
  auto *serve = app.add_subcommand("serve", "run the cluster until SIGINT/SIGTERM");
  add_common(serve);
  serve->add_option("--transport", transport, "websocket or long_poll");

  std::string preset_name;
  int period_ms = 1000;
  auto *bench = app.add_subcommand("bench", "run a benchmark preset or scenario file");
  add_common(bench);
  bench->add_option("preset", preset_name, "preset name");
  bench->add_option("--period-ms", period_ms, "metrics sample period")->check(CLI::Range(100, 60000));
  bench->add_flag_callback(
      "--list",
      [] {
        for (const auto &n : preset_names()) std::printf("%s\n", n.c_str());
        std::exit(0);
      },
      "list presets");

  std::string compare_preset = "compare_transports";
  std::uint16_t ws_port = 8000;
  std::uint16_t lp_port = 8001;
  auto *cmp = app.add_subcommand("compare", "same scenario over WebSocket and long-polling");
  add_common(cmp);
  cmp->add_option("--preset", compare_preset, "scenario preset");
  cmp->add_option("--ws-port", ws_port, "WebSocket endpoint port");
  cmp->add_option("--lp-port", lp_port, "long-poll endpoint port");

  AnalyzeOpts analyze_opts;
  auto *analyze = app.add_subcommand("analyze", "Amdahl, overhead and scaling calculations");
  analyze->add_option("--amdahl", analyze_opts.amdahl, "P=<fraction> N=<processors>")->expected(2);
  analyze->add_option("--limit", analyze_opts.limit, "Amdahl limit for parallel fraction P");
  analyze->add_option("--overhead", analyze_opts.overhead_payload, "poll/websocket ratio at this payload size");
  analyze->add_option("--profile", analyze_opts.profile, "header profile: browser_realistic or minimal");
  analyze->add_option("--scaling", analyze_opts.scaling, "cores:throughput,... measured points");
  analyze->add_option("--metrics", analyze_opts.metrics, "metrics CSV to summarize");

  std::string report_dir;
  auto *report = app.add_subcommand("report", "collate benchmark runs under a directory");
  report->add_option("dir", report_dir, "directory holding run-* folders")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError &e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*serve) return cmd_serve(common, transport);
    if (*bench) return cmd_bench(common, preset_name, period_ms);
    if (*cmp) return cmd_compare(common, compare_preset, ws_port, lp_port);
    if (*analyze) return cmd_analyze(analyze_opts);
    if (*report) return cmd_report(report_dir);
  } catch (const UsageError &e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitUsage;
  } catch (const Error &e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    if (e.code() == ErrorCode::UnknownPreset) {
      std::fprintf(stderr, "presets:");
      for (const auto &n : preset_names()) std::fprintf(stderr, " %s", n.c_str());
      std::fprintf(stderr, "\n");
    }
    return usage_code(e.code()) ? kExitUsage : kExitRuntime;
  } catch (const std::exception &e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitRuntime;
  }
  return kExitUsage;
}
