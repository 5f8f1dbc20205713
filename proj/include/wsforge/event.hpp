#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "wsforge/frame.hpp"

namespace wsforge {

/// Application message carried as one JSON-object Text message:
/// {"e": name, "d": payload, "c": counter}. Unknown keys are ignored.
struct EventEnvelope {
  std::string e;
  nlohmann::json d;
  std::optional<std::int64_t> c;
};

std::string encode_event(const EventEnvelope &ev);

/// nullopt unless `text` is a JSON object with a string "e".
std::optional<EventEnvelope> decode_event(std::string_view text);

/// Snapshot of a worker's counters.
struct WorkerStats {
  int worker_index = 0;
  std::uint64_t active_conns = 0;
  std::uint64_t pings_received = 0;
  std::uint64_t pongs_sent = 0;
  std::uint64_t files_sent = 0;
  std::uint64_t drops = 0;
  std::uint64_t unknown_events = 0;
  std::uint64_t msgs_in = 0;
  std::uint64_t msgs_out = 0;

  [[nodiscard]] std::string to_line() const;
  static WorkerStats from_line(std::string_view line);
};

/// Counters shared between the event loop and whoever samples them.
struct WorkerCounters {
  std::atomic<std::uint64_t> active_conns{0};
  std::atomic<std::uint64_t> pings_received{0};
  std::atomic<std::uint64_t> pongs_sent{0};
  std::atomic<std::uint64_t> files_sent{0};
  std::atomic<std::uint64_t> drops{0};
  std::atomic<std::uint64_t> unknown_events{0};
  std::atomic<std::uint64_t> msgs_in{0};
  std::atomic<std::uint64_t> msgs_out{0};

  [[nodiscard]] WorkerStats snapshot(int index) const;
};

/// Named payloads served by "getfile". Names of the form gen-<bytes>.bin are
/// synthesised on first use so large-file scenarios need no fixtures.
class FileTable {
 public:
  static constexpr std::size_t kMaxGenerated = std::size_t{16} << 20;

  void load_directory(const std::filesystem::path &dir);
  void put(std::string name, Bytes content) { files_[std::move(name)] = std::move(content); }
  const Bytes *find(const std::string &name);

 private:
  std::map<std::string, Bytes> files_;
};

std::filesystem::path default_files_dir();

/// Binary reply layout: [u32 BE name length][name][content].
Bytes encode_file_reply(std::string_view name, ByteView content);

struct FileReply {
  std::string name;
  Bytes content;
};
std::optional<FileReply> decode_file_reply(ByteView data);

struct WorkerState {
  int index = 0;
  std::size_t max_event_bytes = 64 * 1024;
  WorkerCounters counters;
  FileTable files;
};

struct EventOutcome {
  std::vector<Message> replies;
  std::optional<std::uint16_t> close;
  /// Ping counted; the caller forwards it to the store.
  bool ping = false;
};

/// Worker application protocol: "ping" answers {"e":"pong","c":<pings>},
/// "getfile" answers with the named file, anything else is counted and dropped.
EventOutcome handle_event(WorkerState &state, const Message &msg);

}  // namespace wsforge
