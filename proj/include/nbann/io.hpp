#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "nbann/common.hpp"

namespace nbann::io {

// Little-endian scalar encoding, independent of host byte order.
template <typename T>
void write_le(std::ostream& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t,
                               std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint16_t>>;
  auto bits = std::bit_cast<U>(value);
  std::array<char, sizeof(T)> buf{};
  for (std::size_t i = 0; i < sizeof(T); ++i) buf[i] = static_cast<char>((bits >> (8 * i)) & 0xff);
  out.write(buf.data(), buf.size());
}

template <typename T>
bool read_le(std::istream& in, T& value) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t,
                               std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint16_t>>;
  std::array<unsigned char, sizeof(T)> buf{};
  if (!in.read(reinterpret_cast<char*>(buf.data()), buf.size())) return false;
  U bits = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) bits |= static_cast<U>(buf[i]) << (8 * i);
  value = std::bit_cast<T>(bits);
  return true;
}

inline void write_magic(std::ostream& out, const char (&magic)[5]) { out.write(magic, 4); }

inline void expect_magic(std::istream& in, const char (&magic)[5], const std::string& what) {
  char buf[4] = {};
  if (!in.read(buf, 4) || std::memcmp(buf, magic, 4) != 0)
    throw ValidationError(what + ": bad magic, expected \"" + std::string(magic, 4) + "\"");
}

inline std::ifstream open_in(const std::filesystem::path& path, bool binary = false) {
  std::ifstream in(path, binary ? std::ios::binary : std::ios::in);
  if (!in) throw ValidationError("cannot open '" + path.string() + "' for reading");
  return in;
}

inline std::ofstream open_out(const std::filesystem::path& path, bool binary = false) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, binary ? std::ios::binary | std::ios::trunc : std::ios::trunc);
  if (!out) throw RuntimeError("cannot open '" + path.string() + "' for writing");
  return out;
}

inline std::string read_file(const std::filesystem::path& path) {
  auto in = open_in(path, true);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// One entry per line; trailing empty line ignored.
inline std::vector<std::string> read_lines(const std::filesystem::path& path) {
  auto in = open_in(path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

inline void write_lines(const std::filesystem::path& path, const std::vector<std::string>& lines) {
  auto out = open_out(path);
  for (const auto& l : lines) out << l << '\n';
}

}  // namespace nbann::io
