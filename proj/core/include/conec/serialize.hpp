#pragma once

// Little-endian binary encoding used by backbone and engine checkpoints.

#include <cstdint>
#include <istream>
#include <ostream>
#include <string>
#include <string_view>

#include "conec/numkit.hpp"

namespace conec {

class BinaryWriter {
 public:
  explicit BinaryWriter(std::ostream& out) : out_(out) {}

  void magic(std::string_view tag);
  void u64(std::uint64_t v);
  void f64(double v);
  void boolean(bool v) { u64(v ? 1 : 0); }
  void string(std::string_view s);
  void vector(const Vector& v);
  void matrix(const Matrix& m);

 private:
  std::ostream& out_;
};

class BinaryReader {
 public:
  explicit BinaryReader(std::istream& in) : in_(in) {}

  /// Throws FormatError unless the next bytes equal `tag`.
  void expect_magic(std::string_view tag);
  std::uint64_t u64();
  double f64();
  bool boolean() { return u64() != 0; }
  std::string string();
  Vector vector();
  Matrix matrix();

 private:
  void read_bytes(char* dst, std::size_t n);
  std::istream& in_;
};

}  // namespace conec
