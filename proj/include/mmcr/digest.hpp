#pragma once

#include <span>
#include <string>
#include <string_view>

namespace mmcr {

/// Lowercase hex SHA-256 of a byte string.
std::string sha256_hex(std::string_view bytes);
std::string sha256_hex(std::span<const unsigned char> bytes);

}  // namespace mmcr
