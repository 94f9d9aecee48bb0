#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>

namespace setcls::binary {

// Fixed-width little-endian encoding, independent of host byte order.

inline void put_u32(std::ostream& os, std::uint32_t v) {
  std::array<char, 4> b;
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xffu);
  os.write(b.data(), b.size());
}

inline void put_u64(std::ostream& os, std::uint64_t v) {
  std::array<char, 8> b;
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xffu);
  os.write(b.data(), b.size());
}

inline void put_f64(std::ostream& os, double v) { put_u64(os, std::bit_cast<std::uint64_t>(v)); }

inline void put_bytes(std::ostream& os, const std::string& s) {
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline void read_exact(std::istream& is, char* dst, std::size_t n, const char* what) {
  is.read(dst, static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(is.gcount()) != n) {
    throw std::runtime_error(std::string("truncated input while reading ") + what);
  }
}

inline std::uint32_t get_u32(std::istream& is, const char* what) {
  std::array<unsigned char, 4> b;
  read_exact(is, reinterpret_cast<char*>(b.data()), b.size(), what);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

inline std::uint64_t get_u64(std::istream& is, const char* what) {
  std::array<unsigned char, 8> b;
  read_exact(is, reinterpret_cast<char*>(b.data()), b.size(), what);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

inline double get_f64(std::istream& is, const char* what) {
  return std::bit_cast<double>(get_u64(is, what));
}

inline std::string get_bytes(std::istream& is, std::size_t n, const char* what) {
  std::string s(n, '\0');
  read_exact(is, s.data(), n, what);
  return s;
}

inline void expect_magic(std::istream& is, const std::string& magic) {
  const std::string got = get_bytes(is, magic.size(), "magic");
  if (got != magic) throw std::runtime_error("bad magic: expected '" + magic + "'");
}

}  // namespace setcls::binary
