#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

#include "wsforge/bytes.hpp"

namespace wsforge {

using Sha1Digest = std::array<std::uint8_t, 20>;

Sha1Digest sha1(ByteView data) noexcept;

std::string base64_encode(ByteView data);

/// Strict RFC 4648 decoding with padding; nullopt on any malformed input.
std::optional<Bytes> base64_decode(std::string_view text);

}  // namespace wsforge
