#include "hyke/io/raw.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "hyke/error.hpp"

namespace hyke::io {

static_assert(std::endian::native == std::endian::little, "raw array I/O assumes a little-endian host");

namespace {

template <typename T>
void write_raw(const std::filesystem::path& path, const std::vector<T>& values) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(T)));
  if (!out) throw DataError("write failed: " + path.string());
}

template <typename T>
std::vector<T> read_raw(const std::filesystem::path& path, std::size_t count) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw DataError("cannot open " + path.string());
  const auto bytes = static_cast<std::size_t>(in.tellg());
  if (bytes != count * sizeof(T)) {
    throw DataError(path.string() + ": expected " + std::to_string(count * sizeof(T)) + " bytes, found " +
                    std::to_string(bytes));
  }
  in.seekg(0);
  std::vector<T> v(count);
  in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(bytes));
  if (!in) throw DataError("read failed: " + path.string());
  return v;
}

}  // namespace

void write_f32(const std::filesystem::path& path, const std::vector<double>& values) {
  std::vector<float> f(values.begin(), values.end());
  write_raw(path, f);
}

void write_u32(const std::filesystem::path& path, const std::vector<std::uint32_t>& values) { write_raw(path, values); }
void write_u8(const std::filesystem::path& path, const std::vector<std::uint8_t>& values) { write_raw(path, values); }

std::vector<double> read_f32(const std::filesystem::path& path, std::size_t count) {
  const auto f = read_raw<float>(path, count);
  return {f.begin(), f.end()};
}

std::vector<std::uint32_t> read_u32(const std::filesystem::path& path, std::size_t count) {
  return read_raw<std::uint32_t>(path, count);
}

std::vector<std::uint8_t> read_u8(const std::filesystem::path& path, std::size_t count) {
  return read_raw<std::uint8_t>(path, count);
}

std::filesystem::path sidecar_path(const std::filesystem::path& raw) {
  auto p = raw;
  p += ".json";
  return p;
}

void write_json(const std::filesystem::path& path, const Json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  out << j.dump(2) << '\n';
  if (!out) throw DataError("write failed: " + path.string());
}

Json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  try {
    return Json::parse(in);
  } catch (const Json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

std::vector<std::size_t> sidecar_shape(const Json& sidecar, const std::filesystem::path& where) {
  try {
    return sidecar.at("shape").get<std::vector<std::size_t>>();
  } catch (const Json::exception& e) {
    throw DataError(where.string() + ": bad or missing shape (" + e.what() + ")");
  }
}

void expect_shape(const Json& sidecar, const std::vector<std::size_t>& expected, const std::filesystem::path& where) {
  if (sidecar_shape(sidecar, where) != expected) {
    throw DataError(where.string() + ": shape " + Json(sidecar.at("shape")).dump() + " does not match expected " +
                    Json(expected).dump());
  }
}

std::string fnv1a_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::uint64_t h = 0xcbf29ce484222325ULL;
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof buf);
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 0x100000001b3ULL;
    }
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

void ensure_directory(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec || !std::filesystem::is_directory(dir)) {
    throw DataError("cannot create directory " + dir.string() + (ec ? ": " + ec.message() : ""));
  }
}

}  // namespace hyke::io
