#pragma once

#include <chrono>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "wsforge/bytes.hpp"
#include "wsforge/frame.hpp"

namespace wsforge {

// Envelope: repeated [u32 big-endian length][bytes].
inline constexpr std::size_t kEnvelopePrefix = 4;

struct BatchConfig {
  std::size_t flush_threshold = 1400;
  std::chrono::milliseconds max_delay{50};
};

Bytes encode_envelope(std::span<const Bytes> entries);

/// Throws TruncatedEnvelope or TrailingGarbage.
std::vector<Bytes> unbatch(ByteView payload);

/// Bytes saved by sending `msg_sizes` as one envelope instead of one frame
/// each. Negative when the length prefixes cost more than the saved headers.
std::int64_t batching_savings(std::span<const std::size_t> msg_sizes, bool masked);

/// Single-owner queue of small messages for one connection.
class Batcher {
 public:
  using Clock = std::chrono::steady_clock;

  explicit Batcher(BatchConfig config = {}) : config_(config) {}

  /// Queues `msg`; returns the flushed envelope when the pending envelope
  /// reaches the threshold or the oldest entry is older than max_delay.
  std::optional<Message> enqueue(ByteView msg, Clock::time_point now = Clock::now());

  /// Age check for callers driving a timer.
  std::optional<Message> poll(Clock::time_point now = Clock::now());

  /// One Binary message holding every queued entry, or nullopt when empty.
  std::optional<Message> flush();

  [[nodiscard]] std::size_t pending_count() const noexcept { return entries_.size(); }
  [[nodiscard]] std::size_t pending_wire_bytes() const noexcept { return pending_bytes_; }
  [[nodiscard]] std::optional<Clock::time_point> oldest() const noexcept { return oldest_; }

 private:
  BatchConfig config_;
  std::vector<Bytes> entries_;
  std::size_t pending_bytes_ = 0;
  std::optional<Clock::time_point> oldest_;
};

}  // namespace wsforge
