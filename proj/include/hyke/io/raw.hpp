#pragma once

#include <cstdint>
#include <filesystem>
#include <json.hpp>
#include <string>
#include <vector>

namespace hyke::io {

using Json = nlohmann::json;

/// Little-endian raw arrays. The host is assumed little-endian (checked at
/// compile time).
void write_f32(const std::filesystem::path& path, const std::vector<double>& values);
void write_u32(const std::filesystem::path& path, const std::vector<std::uint32_t>& values);
void write_u8(const std::filesystem::path& path, const std::vector<std::uint8_t>& values);

/// Reads exactly `count` elements; throws DataError on size mismatch.
std::vector<double> read_f32(const std::filesystem::path& path, std::size_t count);
std::vector<std::uint32_t> read_u32(const std::filesystem::path& path, std::size_t count);
std::vector<std::uint8_t> read_u8(const std::filesystem::path& path, std::size_t count);

/// `<file>.json` next to a raw array.
std::filesystem::path sidecar_path(const std::filesystem::path& raw);
void write_json(const std::filesystem::path& path, const Json& j);
Json read_json(const std::filesystem::path& path);

/// Shape recorded in a sidecar; throws DataError if absent or different from `expected`.
std::vector<std::size_t> sidecar_shape(const Json& sidecar, const std::filesystem::path& where);
void expect_shape(const Json& sidecar, const std::vector<std::size_t>& expected, const std::filesystem::path& where);

/// 64-bit FNV-1a of a file's bytes, as 16 lowercase hex digits.
std::string fnv1a_file(const std::filesystem::path& path);

/// Creates `dir` (and parents); throws DataError when that fails.
void ensure_directory(const std::filesystem::path& dir);

}  // namespace hyke::io
