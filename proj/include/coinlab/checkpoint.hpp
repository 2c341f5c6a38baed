#pragma once

// Flat binary container for named tensors. Layout: magic "CLT1", entry count
// (u64), then per entry: name length (u64), name bytes, rows (u64), cols
// (u64), row-major f64 data, all little-endian. A JSON manifest with names,
// shapes, dtype, and content digests is written alongside.

#include <cstdint>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "coinlab/errors.hpp"
#include "coinlab/mat.hpp"

namespace coinlab {

struct NamedTensor {
  std::string name;
  Mat value;
};

namespace detail {

inline void write_u64(std::ostream& os, uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline uint64_t read_u64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
  return v;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const std::vector<NamedTensor>& tensors) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw InvalidConfig("cannot open checkpoint for writing: " + path);
  os.write("CLT1", 4);
  detail::write_u64(os, tensors.size());
  for (const auto& t : tensors) {
    detail::write_u64(os, t.name.size());
    os.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    detail::write_u64(os, static_cast<uint64_t>(t.value.rows));
    detail::write_u64(os, static_cast<uint64_t>(t.value.cols));
    os.write(reinterpret_cast<const char*>(t.value.a.data()),
             static_cast<std::streamsize>(t.value.a.size() * sizeof(double)));
  }
  if (!os) throw InvalidConfig("checkpoint write failed: " + path);
}

inline std::vector<NamedTensor> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InvalidConfig("cannot open checkpoint: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::string(magic, 4) != "CLT1")
    throw InvalidConfig("bad checkpoint magic: " + path);
  const uint64_t n = detail::read_u64(is);
  std::vector<NamedTensor> out;
  out.reserve(n);
  for (uint64_t k = 0; k < n; ++k) {
    const uint64_t name_len = detail::read_u64(is);
    std::string name(name_len, '\0');
    is.read(name.data(), static_cast<std::streamsize>(name_len));
    const uint64_t rows = detail::read_u64(is);
    const uint64_t cols = detail::read_u64(is);
    Mat m(static_cast<int64_t>(rows), static_cast<int64_t>(cols));
    is.read(reinterpret_cast<char*>(m.a.data()),
            static_cast<std::streamsize>(m.a.size() * sizeof(double)));
    if (!is) throw InvalidConfig("truncated checkpoint: " + path);
    out.push_back({std::move(name), std::move(m)});
  }
  return out;
}

// Digest over entry names, shapes, and data; order-sensitive.
inline uint64_t checkpoint_digest(const std::vector<NamedTensor>& tensors) {
  uint64_t h = 0xCBF29CE484222325ull;
  auto mix = [&h](const void* p, size_t n) {
    const unsigned char* b = static_cast<const unsigned char*>(p);
    for (size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001B3ull;
    }
  };
  for (const auto& t : tensors) {
    mix(t.name.data(), t.name.size());
    const int64_t dims[2] = {t.value.rows, t.value.cols};
    mix(dims, sizeof(dims));
    mix(t.value.a.data(), t.value.a.size() * sizeof(double));
  }
  return h;
}

inline std::string hex64(uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[i] = digits[v & 0xF];
    v >>= 4;
  }
  return s;
}

}  // namespace coinlab
