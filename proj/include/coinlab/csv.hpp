#pragma once

// Deterministic CSV emission. Doubles use shortest round-trip formatting so
// files are byte-identical across runs and platforms with IEEE doubles.

#include <charconv>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "coinlab/errors.hpp"

namespace coinlab {

inline std::string num_str(double v) {
  char buf[40];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline std::string num_str(int64_t v) {
  char buf[24];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

namespace detail {
inline std::string csv_field(double v) { return num_str(v); }
inline std::string csv_field(int64_t v) { return num_str(v); }
inline std::string csv_field(int v) { return num_str(static_cast<int64_t>(v)); }
inline std::string csv_field(size_t v) { return num_str(static_cast<int64_t>(v)); }
inline std::string csv_field(const std::string& s) { return s; }
inline std::string csv_field(const char* s) { return s; }
}  // namespace detail

class CsvWriter {
 public:
  CsvWriter(const std::string& path, const std::vector<std::string>& header) : out_(path) {
    if (!out_) throw InvalidConfig("cannot open csv for writing: " + path);
    for (size_t i = 0; i < header.size(); ++i) {
      if (i) out_ << ',';
      out_ << header[i];
    }
    out_ << '\n';
  }

  template <typename... Args>
  void row(const Args&... args) {
    bool first = true;
    ((out_ << (first ? "" : ","), out_ << detail::csv_field(args), first = false), ...);
    out_ << '\n';
  }

  void close() { out_.close(); }

 private:
  std::ofstream out_;
};

}  // namespace coinlab
