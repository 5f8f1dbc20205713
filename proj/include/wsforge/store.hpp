#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>

namespace wsforge {

/// In-memory counters behind the store process's line protocol.
class CounterStore {
 public:
  std::int64_t incr(const std::string &key) { return ++counters_[key]; }
  [[nodiscard]] std::int64_t get(const std::string &key) const;
  [[nodiscard]] std::int64_t sum(std::string_view prefix) const;

  /// One request line ("INCR k", "GET k", "SUM prefix", trailing newline
  /// optional) to one reply line ("<n>\n", or "-ERR\n").
  std::string handle_line(std::string_view line);

 private:
  std::map<std::string, std::int64_t, std::less<>> counters_;
};

struct StoreOptions {
  std::uint16_t port = 0;
  std::string control_name;
};

/// Blocks serving the store protocol until SHUTDOWN or SIGTERM.
int run_store(const StoreOptions &options);

}  // namespace wsforge
