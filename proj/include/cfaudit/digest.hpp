#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>

namespace cfaudit {

// Lowercase hex SHA-256 of a byte buffer. Used as the stable image id and as
// the probe cache key.
std::string sha256_hex(std::span<const std::uint8_t> bytes);
std::string sha256_hex(std::string_view text);

// Raw HMAC-SHA-256 and its hex form.
std::string hmac_sha256(std::string_view key, std::string_view message);
std::string hmac_sha256_hex(std::string_view key, std::string_view message);
std::string hex_encode(std::string_view raw);

std::string base64_encode(std::span<const std::uint8_t> bytes);

// Deterministic 64-bit seed derived from a root seed and a string key.
std::uint64_t derive_seed(std::uint64_t root, std::string_view key);

}  // namespace cfaudit
