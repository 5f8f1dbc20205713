#include "wsforge/event.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "wsforge/net.hpp"

namespace wsforge {

std::string encode_event(const EventEnvelope &ev) {
  nlohmann::json j;
  j["e"] = ev.e;
  if (!ev.d.is_null()) j["d"] = ev.d;
  if (ev.c) j["c"] = *ev.c;
  return j.dump();
}

std::optional<EventEnvelope> decode_event(std::string_view text) {
  auto j = nlohmann::json::parse(text.begin(), text.end(), nullptr, false);
  if (j.is_discarded() || !j.is_object()) return std::nullopt;
  const auto e = j.find("e");
  if (e == j.end() || !e->is_string()) return std::nullopt;
  EventEnvelope ev;
  ev.e = e->get<std::string>();
  if (auto d = j.find("d"); d != j.end()) ev.d = *d;
  if (auto c = j.find("c"); c != j.end() && c->is_number_integer()) ev.c = c->get<std::int64_t>();
  return ev;
}

std::string WorkerStats::to_line() const {
  std::ostringstream os;
  os << "worker=" << worker_index << " active_conns=" << active_conns << " pings_received=" << pings_received
     << " pongs_sent=" << pongs_sent << " files_sent=" << files_sent << " drops=" << drops
     << " unknown_events=" << unknown_events << " msgs_in=" << msgs_in << " msgs_out=" << msgs_out;
  return os.str();
}

WorkerStats WorkerStats::from_line(std::string_view line) {
  const auto kv = parse_kv_line(line);
  auto num = [&](const char *key) -> std::uint64_t {
    const auto it = kv.find(key);
    return it == kv.end() ? 0 : std::stoull(it->second);
  };
  WorkerStats s;
  s.worker_index = static_cast<int>(num("worker"));
  s.active_conns = num("active_conns");
  s.pings_received = num("pings_received");
  s.pongs_sent = num("pongs_sent");
  s.files_sent = num("files_sent");
  s.drops = num("drops");
  s.unknown_events = num("unknown_events");
  s.msgs_in = num("msgs_in");
  s.msgs_out = num("msgs_out");
  return s;
}

WorkerStats WorkerCounters::snapshot(int index) const {
  WorkerStats s;
  s.worker_index = index;
  s.active_conns = active_conns.load();
  s.pings_received = pings_received.load();
  s.pongs_sent = pongs_sent.load();
  s.files_sent = files_sent.load();
  s.drops = drops.load();
  s.unknown_events = unknown_events.load();
  s.msgs_in = msgs_in.load();
  s.msgs_out = msgs_out.load();
  return s;
}

void FileTable::load_directory(const std::filesystem::path &dir) {
  std::error_code ec;
  for (const auto &entry : std::filesystem::directory_iterator(dir, ec)) {
    if (!entry.is_regular_file()) continue;
    std::ifstream in(entry.path(), std::ios::binary);
    Bytes content((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    files_[entry.path().filename().string()] = std::move(content);
  }
}

const Bytes *FileTable::find(const std::string &name) {
  if (auto it = files_.find(name); it != files_.end()) return &it->second;
  // gen-<N>.bin
  if (name.starts_with("gen-") && name.ends_with(".bin")) {
    std::size_t n = 0;
    const char *first = name.data() + 4;
    const char *last = name.data() + name.size() - 4;
    const auto [p, ec] = std::from_chars(first, last, n);
    if (ec == std::errc() && p == last && n <= kMaxGenerated) {
      Bytes content(n);
      for (std::size_t i = 0; i < n; ++i) content[i] = static_cast<std::uint8_t>('a' + i % 26);
      return &(files_[name] = std::move(content));
    }
  }
  return nullptr;
}

std::filesystem::path default_files_dir() { return std::filesystem::path(WSFORGE_SOURCE_DIR) / "share" / "files"; }

Bytes encode_file_reply(std::string_view name, ByteView content) {
  Bytes out;
  out.reserve(4 + name.size() + content.size());
  put_be32(out, static_cast<std::uint32_t>(name.size()));
  out.insert(out.end(), name.begin(), name.end());
  out.insert(out.end(), content.begin(), content.end());
  return out;
}

std::optional<FileReply> decode_file_reply(ByteView data) {
  if (data.size() < 4) return std::nullopt;
  const auto len = static_cast<std::size_t>(get_be(data.first(4)));
  if (data.size() - 4 < len) return std::nullopt;
  FileReply r;
  r.name = std::string(as_chars(data.subspan(4, len)));
  r.content.assign(data.begin() + 4 + static_cast<std::ptrdiff_t>(len), data.end());
  return r;
}

EventOutcome handle_event(WorkerState &state, const Message &msg) {
  EventOutcome out;
  state.counters.msgs_in.fetch_add(1, std::memory_order_relaxed);
  if (msg.data.size() > state.max_event_bytes) {
    out.close = close_code::kMessageTooBig;
    return out;
  }
  std::optional<EventEnvelope> ev;
  if (msg.kind == MessageKind::Text) ev = decode_event(as_chars(msg.data));
  if (!ev) {
    state.counters.unknown_events.fetch_add(1, std::memory_order_relaxed);
    return out;
  }

  if (ev->e == "ping") {
    const auto count = state.counters.pings_received.fetch_add(1, std::memory_order_relaxed) + 1;
    out.ping = true;
    const auto text = encode_event({"pong", nullptr, static_cast<std::int64_t>(count)});
    out.replies.push_back({MessageKind::Text, to_bytes(text)});
    state.counters.pongs_sent.fetch_add(1, std::memory_order_relaxed);
  } else if (ev->e == "getfile" && ev->d.is_string()) {
    const auto name = ev->d.get<std::string>();
    if (const Bytes *content = state.files.find(name)) {
      out.replies.push_back({MessageKind::Binary, encode_file_reply(name, *content)});
      state.counters.files_sent.fetch_add(1, std::memory_order_relaxed);
    } else {
      out.replies.push_back({MessageKind::Text, to_bytes(encode_event({"nofile", name, std::nullopt}))});
    }
  } else {
    state.counters.unknown_events.fetch_add(1, std::memory_order_relaxed);
  }
  state.counters.msgs_out.fetch_add(out.replies.size(), std::memory_order_relaxed);
  return out;
}

}  // namespace wsforge
