#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <vector>

#include "spade/errors.hpp"

namespace spade::io {

// Little-endian f32 streams shared by the volume, bank and checkpoint formats.

inline std::uint32_t to_le(std::uint32_t x) {
  if constexpr (std::endian::native == std::endian::little) {
    return x;
  } else {
    return ((x & 0xffu) << 24) | ((x & 0xff00u) << 8) | ((x >> 8) & 0xff00u) | (x >> 24);
  }
}

inline std::uint64_t to_le(std::uint64_t x) {
  if constexpr (std::endian::native == std::endian::little) {
    return x;
  } else {
    return (std::uint64_t{to_le(static_cast<std::uint32_t>(x))} << 32) |
           to_le(static_cast<std::uint32_t>(x >> 32));
  }
}

inline void write_u64(std::ostream& os, std::uint64_t x) {
  const std::uint64_t bits = to_le(x);
  os.write(reinterpret_cast<const char*>(&bits), 8);
  if (!os) throw DataError("write failed");
}

inline std::uint64_t read_u64(std::istream& is) {
  std::uint64_t bits = 0;
  is.read(reinterpret_cast<char*>(&bits), 8);
  if (is.gcount() != 8) throw DataError("truncated binary payload");
  return to_le(bits);
}

inline void write_f64(std::ostream& os, double x) { write_u64(os, std::bit_cast<std::uint64_t>(x)); }
inline double read_f64(std::istream& is) { return std::bit_cast<double>(read_u64(is)); }

inline void write_f32(std::ostream& os, std::span<const float> values) {
  std::vector<char> buf(values.size() * 4);
  for (std::size_t i = 0; i < values.size(); ++i) {
    std::uint32_t bits = to_le(std::bit_cast<std::uint32_t>(values[i]));
    std::memcpy(buf.data() + 4 * i, &bits, 4);
  }
  os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!os) throw DataError("write failed");
}

inline void read_f32(std::istream& is, std::span<float> out) {
  std::vector<char> buf(out.size() * 4);
  is.read(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (static_cast<std::size_t>(is.gcount()) != buf.size()) {
    throw DataError("truncated binary payload");
  }
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::uint32_t bits;
    std::memcpy(&bits, buf.data() + 4 * i, 4);
    out[i] = std::bit_cast<float>(to_le(bits));
  }
}

}  // namespace spade::io
