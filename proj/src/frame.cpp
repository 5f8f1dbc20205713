#include "wsforge/frame.hpp"

#include <algorithm>

#include "wsforge/error.hpp"

namespace wsforge {
namespace {

bool known_opcode(std::uint8_t op) noexcept {
  switch (op) {
    case 0x0: case 0x1: case 0x2: case 0x8: case 0x9: case 0xA: return true;
    default: return false;
  }
}

void check_encodable(const Frame &frame) {
  if (frame.rsv[0] || frame.rsv[1] || frame.rsv[2]) {
    throw Error(ErrorCode::ProtocolViolation, "rsv bits require a negotiated extension");
  }
  if (is_control(frame.opcode)) {
    if (frame.payload.size() > kMaxControlPayload) {
      throw Error(ErrorCode::ControlFrameTooLong, "control payload of " + std::to_string(frame.payload.size()) + " bytes");
    }
    if (!frame.fin) throw Error(ErrorCode::ProtocolViolation, "control frames cannot be fragmented");
  }
  if (frame.opcode == Opcode::Text && frame.fin && !is_valid_utf8(frame.payload)) {
    throw Error(ErrorCode::InvalidUtf8, "text frame payload");
  }
}

}  // namespace

void encode_frame_into(const Frame &frame, Bytes &out) {
  check_encodable(frame);
  const std::uint64_t len = frame.payload.size();
  const std::size_t start = out.size();
  out.reserve(start + frame_overhead(len, frame.mask_key.has_value()) + len);

  out.push_back(static_cast<std::uint8_t>((frame.fin ? 0x80 : 0x00) | static_cast<std::uint8_t>(frame.opcode)));
  const std::uint8_t mask_bit = frame.mask_key ? 0x80 : 0x00;
  if (len <= 125) {
    out.push_back(static_cast<std::uint8_t>(mask_bit | len));
  } else if (len <= 0xFFFF) {
    out.push_back(mask_bit | 126);
    put_be16(out, static_cast<std::uint16_t>(len));
  } else {
    out.push_back(mask_bit | 127);
    put_be64(out, len);
  }
  if (frame.mask_key) out.insert(out.end(), frame.mask_key->begin(), frame.mask_key->end());

  const std::size_t payload_at = out.size();
  out.insert(out.end(), frame.payload.begin(), frame.payload.end());
  if (frame.mask_key) apply_mask_inplace(std::span(out).subspan(payload_at), *frame.mask_key);
}

Bytes encode_frame(const Frame &frame) {
  Bytes out;
  encode_frame_into(frame, out);
  return out;
}

std::optional<DecodedFrame> decode_frame(ByteView input, std::size_t max_payload) {
  if (input.size() < 2) return std::nullopt;

  const std::uint8_t b0 = input[0];
  const std::uint8_t b1 = input[1];
  if (b0 & 0x70) throw Error(ErrorCode::ProtocolViolation, "rsv bits set");
  const std::uint8_t op = b0 & 0x0F;
  if (!known_opcode(op)) throw Error(ErrorCode::ProtocolViolation, "unknown opcode " + std::to_string(op));

  Frame frame;
  frame.fin = (b0 & 0x80) != 0;
  frame.opcode = static_cast<Opcode>(op);
  const bool masked = (b1 & 0x80) != 0;
  const std::uint8_t len7 = b1 & 0x7F;

  std::size_t pos = 2;
  std::uint64_t len = len7;
  if (len7 == 126) {
    if (input.size() < pos + 2) return std::nullopt;
    len = get_be(input.subspan(pos, 2));
    pos += 2;
    if (len < 126) throw Error(ErrorCode::ProtocolViolation, "non-minimal 16-bit length");
  } else if (len7 == 127) {
    if (input.size() < pos + 8) return std::nullopt;
    len = get_be(input.subspan(pos, 8));
    pos += 8;
    if (len >> 63) throw Error(ErrorCode::ProtocolViolation, "64-bit length with high bit set");
    if (len <= 0xFFFF) throw Error(ErrorCode::ProtocolViolation, "non-minimal 64-bit length");
  }

  if (is_control(frame.opcode)) {
    if (len > kMaxControlPayload) throw Error(ErrorCode::ProtocolViolation, "control frame payload over 125 bytes");
    if (!frame.fin) throw Error(ErrorCode::ProtocolViolation, "fragmented control frame");
  }
  if (len > max_payload) {
    throw Error(ErrorCode::MessageTooBig, "payload of " + std::to_string(len) + " bytes exceeds cap");
  }

  if (masked) {
    if (input.size() < pos + 4) return std::nullopt;
    MaskKey key;
    std::copy_n(input.begin() + static_cast<std::ptrdiff_t>(pos), 4, key.begin());
    frame.mask_key = key;
    pos += 4;
  }
  if (input.size() - pos < len) return std::nullopt;

  const auto body = input.subspan(pos, static_cast<std::size_t>(len));
  frame.payload.assign(body.begin(), body.end());
  if (frame.mask_key) apply_mask_inplace(frame.payload, *frame.mask_key);
  return DecodedFrame{std::move(frame), pos + static_cast<std::size_t>(len)};
}

void apply_mask_inplace(std::span<std::uint8_t> data, MaskKey key, std::size_t offset) noexcept {
  for (std::size_t i = 0; i < data.size(); ++i) data[i] ^= key[(offset + i) & 3];
}

Bytes apply_mask(ByteView payload, MaskKey key) {
  Bytes out(payload.begin(), payload.end());
  apply_mask_inplace(out, key);
  return out;
}

std::vector<Frame> fragment_message(const Message &msg, std::size_t max_fragment) {
  if (max_fragment == 0) throw Error(ErrorCode::ProtocolViolation, "max_fragment must be at least 1");
  const Opcode first = msg.kind == MessageKind::Text ? Opcode::Text : Opcode::Binary;
  std::vector<Frame> frames;
  std::size_t pos = 0;
  do {
    const std::size_t n = std::min(max_fragment, msg.data.size() - pos);
    Frame f;
    f.opcode = frames.empty() ? first : Opcode::Continuation;
    f.payload.assign(msg.data.begin() + static_cast<std::ptrdiff_t>(pos),
                     msg.data.begin() + static_cast<std::ptrdiff_t>(pos + n));
    pos += n;
    f.fin = pos == msg.data.size();
    frames.push_back(std::move(f));
  } while (pos < msg.data.size());
  return frames;
}

bool is_valid_utf8(ByteView data) noexcept {
  std::size_t i = 0;
  const std::size_t n = data.size();
  while (i < n) {
    const std::uint8_t c = data[i];
    if (c < 0x80) {
      ++i;
      continue;
    }
    std::size_t extra;
    std::uint32_t cp;
    if ((c & 0xE0) == 0xC0) {
      extra = 1;
      cp = c & 0x1F;
    } else if ((c & 0xF0) == 0xE0) {
      extra = 2;
      cp = c & 0x0F;
    } else if ((c & 0xF8) == 0xF0) {
      extra = 3;
      cp = c & 0x07;
    } else {
      return false;
    }
    if (i + extra >= n) return false;
    for (std::size_t k = 1; k <= extra; ++k) {
      const std::uint8_t cc = data[i + k];
      if ((cc & 0xC0) != 0x80) return false;
      cp = (cp << 6) | (cc & 0x3F);
    }
    // overlong forms, surrogates, out of range
    if ((extra == 1 && cp < 0x80) || (extra == 2 && cp < 0x800) || (extra == 3 && cp < 0x10000)) return false;
    if (cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF)) return false;
    i += extra + 1;
  }
  return true;
}

Frame make_close_frame(std::uint16_t code, std::string_view reason) {
  Frame f;
  f.opcode = Opcode::Close;
  put_be16(f.payload, code);
  const std::size_t n = std::min(reason.size(), kMaxControlPayload - 2);
  f.payload.insert(f.payload.end(), reason.begin(), reason.begin() + static_cast<std::ptrdiff_t>(n));
  return f;
}

std::optional<std::uint16_t> close_status(const Frame &close) {
  if (close.payload.empty()) return std::nullopt;
  if (close.payload.size() < 2) throw Error(ErrorCode::ProtocolViolation, "close payload of 1 byte");
  return static_cast<std::uint16_t>(get_be(ByteView(close.payload).first(2)));
}

std::optional<Message> Reassembler::push(Frame frame) {
  if (is_control(frame.opcode)) throw Error(ErrorCode::ProtocolViolation, "control frame passed to reassembler");
  if (frame.opcode == Opcode::Continuation) {
    if (!started_) throw Error(ErrorCode::ProtocolViolation, "continuation without a message in progress");
  } else {
    if (started_) throw Error(ErrorCode::ProtocolViolation, "new data frame inside a fragmented message");
    started_ = true;
    kind_ = frame.opcode == Opcode::Text ? MessageKind::Text : MessageKind::Binary;
    buffer_.clear();
  }
  if (buffer_.size() + frame.payload.size() > max_message_) {
    throw Error(ErrorCode::MessageTooBig, "reassembled message exceeds cap");
  }
  if (buffer_.empty()) {
    buffer_ = std::move(frame.payload);
  } else {
    buffer_.insert(buffer_.end(), frame.payload.begin(), frame.payload.end());
  }
  if (!frame.fin) return std::nullopt;

  started_ = false;
  Message msg{kind_, std::move(buffer_)};
  buffer_ = {};
  if (msg.kind == MessageKind::Text && !is_valid_utf8(msg.data)) throw Error(ErrorCode::InvalidUtf8, "text message");
  return msg;
}

Message reassemble(std::span<const Frame> frames) {
  Reassembler r;
  std::optional<Message> out;
  for (const auto &f : frames) {
    if (out) throw Error(ErrorCode::ProtocolViolation, "frames after the final fragment");
    out = r.push(f);
  }
  if (!out) throw Error(ErrorCode::ProtocolViolation, "message never finished");
  return *std::move(out);
}

}  // namespace wsforge
