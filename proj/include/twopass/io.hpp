#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>

namespace twopass {

/// Writes `content` to a sibling temp file and renames it over `path`.
void write_atomic(const std::filesystem::path& path, std::string_view content);

std::string read_file(const std::filesystem::path& path);

/// CRC-32 (zlib polynomial).
std::uint32_t crc32(std::span<const std::byte> bytes, std::uint32_t seed = 0);
std::uint32_t crc32(std::string_view text, std::uint32_t seed = 0);

std::string hex32(std::uint32_t value);

/// Build identifier stamped into every artifact header.
std::string_view version_string();

/// Keeps large tensor buffers on the heap across training steps instead of
/// returning them to the kernel after every free.
void retain_large_allocations();

}  // namespace twopass
