// SPDX-License-Identifier: Apache-2.0
//
// Little-endian readers/writers for the weight, perturbation and dataset
// files. Values are encoded byte by byte so the layout does not depend on
// host endianness.
#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <string_view>

#include "qattack/errors.hpp"

namespace qattack::io {

inline void write_u32(std::ostream& os, std::uint32_t v) {
  const std::array<char, 4> b{static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                              static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  os.write(b.data(), 4);
}

inline void write_i32(std::ostream& os, std::int32_t v) { write_u32(os, static_cast<std::uint32_t>(v)); }

inline void write_f32(std::ostream& os, float v) { write_u32(os, std::bit_cast<std::uint32_t>(v)); }

inline void write_f32s(std::ostream& os, std::span<const float> values) {
  for (float v : values) write_f32(os, v);
}

inline void write_magic(std::ostream& os, std::string_view magic) { os.write(magic.data(), 4); }

/// Reads from a stream, raising TruncationError on short reads.
class Reader {
 public:
  Reader(std::istream& is, std::string what) : is_(is), what_(std::move(what)) {}

  void expect_magic(std::string_view magic) {
    std::array<char, 4> b{};
    read_raw(b.data(), 4);
    if (std::string_view(b.data(), 4) != magic) {
      throw MagicError(what_ + ": bad magic, expected \"" + std::string(magic) + "\"");
    }
  }

  std::uint32_t u32() {
    std::array<unsigned char, 4> b{};
    read_raw(reinterpret_cast<char*>(b.data()), 4);
    return std::uint32_t{b[0]} | (std::uint32_t{b[1]} << 8) | (std::uint32_t{b[2]} << 16) |
           (std::uint32_t{b[3]} << 24);
  }

  std::int32_t i32() { return static_cast<std::int32_t>(u32()); }

  float f32() { return std::bit_cast<float>(u32()); }

  void f32s(std::span<float> out) {
    for (float& v : out) v = f32();
  }

  /// True when the stream has no bytes left.
  bool at_end() { return is_.peek() == std::char_traits<char>::eof(); }

 private:
  void read_raw(char* dst, std::size_t n) {
    is_.read(dst, static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is_.gcount()) != n) throw TruncationError(what_ + ": file truncated");
  }

  std::istream& is_;
  std::string what_;
};

}  // namespace qattack::io
