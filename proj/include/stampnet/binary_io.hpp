#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <string_view>

#include "stampnet/errors.hpp"

namespace stampnet::io {

// Little-endian primitive codecs shared by the tensor, dataset and checkpoint
// formats. Big-endian reads exist only for the IDX headers.

template <typename T>
T byteswap(T v) {
  std::array<unsigned char, sizeof(T)> bytes;
  std::memcpy(bytes.data(), &v, sizeof(T));
  std::reverse(bytes.begin(), bytes.end());
  std::memcpy(&v, bytes.data(), sizeof(T));
  return v;
}

template <typename T>
void write_le(std::ostream& out, T v) {
  if constexpr (std::endian::native == std::endian::big) v = byteswap(v);
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

inline std::string offset_suffix(std::istream& in) {
  in.clear();
  const auto pos = in.tellg();
  return pos < 0 ? std::string{} : " at byte offset " + std::to_string(static_cast<long long>(pos));
}

template <typename T>
T read_le(std::istream& in, std::string_view what) {
  const auto start = in.tellg();
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (in.gcount() != static_cast<std::streamsize>(sizeof(T))) {
    throw FormatError("truncated input while reading " + std::string(what) +
                      (start < 0 ? std::string{}
                                 : " at byte offset " +
                                       std::to_string(static_cast<long long>(start))));
  }
  if constexpr (std::endian::native == std::endian::big) v = byteswap(v);
  return v;
}

template <typename T>
T read_be(std::istream& in, std::string_view what) {
  T v = read_le<T>(in, what);
  if constexpr (std::endian::native == std::endian::little) v = byteswap(v);
  return v;
}

inline void write_magic(std::ostream& out, std::string_view magic) {
  out.write(magic.data(), static_cast<std::streamsize>(magic.size()));
}

inline void expect_magic(std::istream& in, std::string_view magic) {
  const auto start = in.tellg();
  std::string got(magic.size(), '\0');
  in.read(got.data(), static_cast<std::streamsize>(magic.size()));
  if (in.gcount() != static_cast<std::streamsize>(magic.size()) || got != magic) {
    throw FormatError("expected magic \"" + std::string(magic) + "\"" +
                      (start < 0 ? std::string{}
                                 : " at byte offset " +
                                       std::to_string(static_cast<long long>(start))));
  }
}

}  // namespace stampnet::io
