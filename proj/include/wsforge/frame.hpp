#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string_view>
#include <vector>

#include "wsforge/bytes.hpp"

namespace wsforge {

enum class Opcode : std::uint8_t {
  Continuation = 0x0,
  Text = 0x1,
  Binary = 0x2,
  Close = 0x8,
  Ping = 0x9,
  Pong = 0xA,
};

constexpr bool is_control(Opcode op) noexcept { return static_cast<std::uint8_t>(op) >= 0x8; }

using MaskKey = std::array<std::uint8_t, 4>;

inline constexpr std::size_t kMaxControlPayload = 125;
inline constexpr std::size_t kDefaultMaxPayload = std::size_t{16} << 20;

/// Close status codes used by the cluster.
namespace close_code {
inline constexpr std::uint16_t kNormal = 1000;
inline constexpr std::uint16_t kGoingAway = 1001;
inline constexpr std::uint16_t kProtocolError = 1002;
inline constexpr std::uint16_t kInvalidPayload = 1007;
inline constexpr std::uint16_t kMessageTooBig = 1009;
inline constexpr std::uint16_t kTryAgainLater = 1013;
}  // namespace close_code

struct Frame {
  bool fin = true;
  std::array<bool, 3> rsv{};
  Opcode opcode = Opcode::Text;
  std::optional<MaskKey> mask_key;
  Bytes payload;

  bool operator==(const Frame &) const = default;
};

enum class MessageKind { Text, Binary };

struct Message {
  MessageKind kind = MessageKind::Text;
  Bytes data;

  bool operator==(const Message &) const = default;
};

struct DecodedFrame {
  Frame frame;
  std::size_t consumed = 0;
};

/// Serialises `frame` in RFC 6455 layout. Masked frames carry the key after
/// the length field and an XOR-masked payload.
Bytes encode_frame(const Frame &frame);

/// Appends the encoding of `frame` to `out`; avoids a temporary on hot paths.
void encode_frame_into(const Frame &frame, Bytes &out);

/// Decodes one frame from the front of `input`. Returns nullopt when `input`
/// is a strict prefix of a frame (NeedMoreData). Never reads past `consumed`.
/// The returned payload is unmasked; `mask_key` keeps the key seen on the wire.
std::optional<DecodedFrame> decode_frame(ByteView input, std::size_t max_payload = kDefaultMaxPayload);

/// XOR with key[(offset + i) % 4]. In place so large payloads are not copied.
void apply_mask_inplace(std::span<std::uint8_t> data, MaskKey key, std::size_t offset = 0) noexcept;

Bytes apply_mask(ByteView payload, MaskKey key);

/// Header bytes (base + extended length + mask key) for a payload of `payload_len`.
constexpr std::size_t frame_overhead(std::uint64_t payload_len, bool masked) noexcept {
  std::size_t header = payload_len <= 125 ? 2 : payload_len <= 0xFFFF ? 4 : 10;
  return masked ? header + 4 : header;
}

std::vector<Frame> fragment_message(const Message &msg, std::size_t max_fragment);

bool is_valid_utf8(ByteView data) noexcept;

Frame make_close_frame(std::uint16_t code, std::string_view reason = {});

/// Status code from a Close payload; nullopt for an empty payload.
std::optional<std::uint16_t> close_status(const Frame &close);

/// Collects data frames into messages. Control frames must be handled by the
/// caller and never reach push().
class Reassembler {
 public:
  explicit Reassembler(std::size_t max_message = kDefaultMaxPayload) : max_message_(max_message) {}

  /// Returns the completed message once the final fragment arrives.
  std::optional<Message> push(Frame frame);

  [[nodiscard]] bool in_progress() const noexcept { return started_; }

 private:
  std::size_t max_message_;
  bool started_ = false;
  MessageKind kind_ = MessageKind::Text;
  Bytes buffer_;
};

Message reassemble(std::span<const Frame> frames);

/// Deterministic mask-key source so benchmark runs are reproducible.
class MaskGenerator {
 public:
  explicit MaskGenerator(std::uint64_t seed) : engine_(seed) {}

  MaskKey next() {
    auto v = static_cast<std::uint32_t>(engine_());
    return {static_cast<std::uint8_t>(v >> 24), static_cast<std::uint8_t>(v >> 16),
            static_cast<std::uint8_t>(v >> 8), static_cast<std::uint8_t>(v)};
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace wsforge
