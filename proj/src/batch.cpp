#include "wsforge/batch.hpp"

#include <limits>

#include "wsforge/error.hpp"

namespace wsforge {

Bytes encode_envelope(std::span<const Bytes> entries) {
  std::size_t total = 0;
  for (const auto &e : entries) total += kEnvelopePrefix + e.size();
  Bytes out;
  out.reserve(total);
  for (const auto &e : entries) {
    put_be32(out, static_cast<std::uint32_t>(e.size()));
    out.insert(out.end(), e.begin(), e.end());
  }
  return out;
}

std::vector<Bytes> unbatch(ByteView payload) {
  std::vector<Bytes> out;
  std::size_t pos = 0;
  while (pos < payload.size()) {
    if (payload.size() - pos < kEnvelopePrefix) {
      throw Error(ErrorCode::TruncatedEnvelope, "length prefix cut at offset " + std::to_string(pos));
    }
    const auto len = static_cast<std::size_t>(get_be(payload.subspan(pos, kEnvelopePrefix)));
    pos += kEnvelopePrefix;
    if (payload.size() - pos < len) {
      throw Error(ErrorCode::TruncatedEnvelope, "entry of " + std::to_string(len) + " bytes cut short");
    }
    out.emplace_back(payload.begin() + static_cast<std::ptrdiff_t>(pos),
                     payload.begin() + static_cast<std::ptrdiff_t>(pos + len));
    pos += len;
  }
  // A flushed envelope always carries at least one entry.
  if (out.empty()) throw Error(ErrorCode::TruncatedEnvelope, "empty envelope");
  return out;
}

std::int64_t batching_savings(std::span<const std::size_t> msg_sizes, bool masked) {
  if (msg_sizes.empty()) throw Error(ErrorCode::DegenerateInput, "no messages");
  std::uint64_t individual = 0;
  std::uint64_t envelope = 0;
  for (auto size : msg_sizes) {
    individual += frame_overhead(size, masked) + size;
    envelope += kEnvelopePrefix + size;
  }
  const std::uint64_t batched = frame_overhead(envelope, masked) + envelope;
  return static_cast<std::int64_t>(individual) - static_cast<std::int64_t>(batched);
}

std::optional<Message> Batcher::enqueue(ByteView msg, Clock::time_point now) {
  if (msg.size() > std::numeric_limits<std::uint32_t>::max()) {
    throw Error(ErrorCode::ProtocolViolation, "batched entry exceeds 32-bit length");
  }
  if (!oldest_) oldest_ = now;
  entries_.emplace_back(msg.begin(), msg.end());
  pending_bytes_ += kEnvelopePrefix + msg.size();
  if (pending_bytes_ >= config_.flush_threshold || now - *oldest_ >= config_.max_delay) return flush();
  return std::nullopt;
}

std::optional<Message> Batcher::poll(Clock::time_point now) {
  if (oldest_ && now - *oldest_ >= config_.max_delay) return flush();
  return std::nullopt;
}

std::optional<Message> Batcher::flush() {
  if (entries_.empty()) return std::nullopt;
  Message msg{MessageKind::Binary, encode_envelope(entries_)};
  entries_.clear();
  pending_bytes_ = 0;
  oldest_.reset();
  return msg;
}

}  // namespace wsforge
