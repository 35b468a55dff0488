#pragma once

// Little-endian scalar serialization helpers for the on-disk formats.

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <string_view>

#include "kadapt/error.hpp"

namespace kadapt::io {

template <typename U>
void write_le(std::ostream& out, U value) {
  static_assert(std::is_trivially_copyable_v<U>);
  std::array<unsigned char, sizeof(U)> bytes;
  std::memcpy(bytes.data(), &value, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  out.write(reinterpret_cast<const char*>(bytes.data()), sizeof(U));
}

template <typename U>
U read_le(std::istream& in, std::string_view what) {
  std::array<unsigned char, sizeof(U)> bytes;
  if (!in.read(reinterpret_cast<char*>(bytes.data()), sizeof(U)))
    fail(ErrorKind::Format, "truncated input while reading " + std::string(what));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  U value;
  std::memcpy(&value, bytes.data(), sizeof(U));
  return value;
}

inline void write_magic(std::ostream& out, std::string_view magic) { out.write(magic.data(), magic.size()); }

inline void expect_magic(std::istream& in, std::string_view magic) {
  std::string got(magic.size(), '\0');
  if (!in.read(got.data(), static_cast<std::streamsize>(got.size())) || got != magic)
    fail(ErrorKind::Format, "bad magic, expected " + std::string(magic));
}

inline std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::Io, "cannot open " + path.string() + " for writing");
  return out;
}

inline std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::Io, "cannot open " + path.string());
  return in;
}

inline void expect_eof(std::istream& in, const std::string& what) {
  if (in.peek() != std::char_traits<char>::eof()) fail(ErrorKind::Format, "trailing bytes after " + what);
}

}  // namespace kadapt::io
