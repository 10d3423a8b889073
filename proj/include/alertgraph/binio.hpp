#pragma once

#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

// Little-endian binary stream helpers for the versioned file formats.
// The build targets little-endian hosts; payloads are raw f64/uint words.

namespace alertgraph::binio {

inline void put_bytes(std::ostream& out, const void* p, std::size_t n) {
  out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

inline void get_bytes(std::istream& in, void* p, std::size_t n) {
  in.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (!in) throw std::runtime_error("truncated binary stream");
}

template <class T>
void put(std::ostream& out, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  put_bytes(out, &v, sizeof(T));
}

template <class T>
T get(std::istream& in) {
  static_assert(std::is_trivially_copyable_v<T>);
  T v;
  get_bytes(in, &v, sizeof(T));
  return v;
}

inline void put_string(std::ostream& out, const std::string& s) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  put_bytes(out, s.data(), s.size());
}

inline std::string get_string(std::istream& in) {
  auto n = get<std::uint32_t>(in);
  std::string s(n, '\0');
  if (n) get_bytes(in, s.data(), n);
  return s;
}

inline void put_f64s(std::ostream& out, const std::vector<double>& v) {
  put<std::uint64_t>(out, v.size());
  if (!v.empty()) put_bytes(out, v.data(), v.size() * sizeof(double));
}

inline std::vector<double> get_f64s(std::istream& in) {
  auto n = get<std::uint64_t>(in);
  std::vector<double> v(n);
  if (n) get_bytes(in, v.data(), n * sizeof(double));
  return v;
}

inline void expect_magic(std::istream& in, const char (&magic)[5], const std::string& what) {
  char buf[4];
  get_bytes(in, buf, 4);
  if (std::memcmp(buf, magic, 4) != 0) throw std::runtime_error("bad magic for " + what);
}

}  // namespace alertgraph::binio
