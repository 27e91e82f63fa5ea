#include "conec/serialize.hpp"

#include <array>
#include <bit>
#include <cstring>

#include "conec/errors.hpp"

namespace conec {

namespace {

constexpr std::uint64_t kMaxLength = std::uint64_t{1} << 32;

std::array<char, 8> to_le(std::uint64_t v) {
  std::array<char, 8> bytes{};
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xffu);
  return bytes;
}

std::uint64_t from_le(const std::array<char, 8>& bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i)
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[i])) << (8 * i);
  return v;
}

}  // namespace

void BinaryWriter::magic(std::string_view tag) { out_.write(tag.data(), tag.size()); }

void BinaryWriter::u64(std::uint64_t v) {
  const auto bytes = to_le(v);
  out_.write(bytes.data(), bytes.size());
}

void BinaryWriter::f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

void BinaryWriter::string(std::string_view s) {
  u64(s.size());
  out_.write(s.data(), s.size());
}

void BinaryWriter::vector(const Vector& v) {
  u64(v.size());
  for (double x : v) f64(x);
}

void BinaryWriter::matrix(const Matrix& m) {
  u64(m.rows());
  u64(m.cols());
  for (double x : m.values()) f64(x);
}

void BinaryReader::read_bytes(char* dst, std::size_t n) {
  in_.read(dst, static_cast<std::streamsize>(n));
  if (in_.gcount() != static_cast<std::streamsize>(n)) throw FormatError("unexpected end of file");
}

void BinaryReader::expect_magic(std::string_view tag) {
  std::string got(tag.size(), '\0');
  read_bytes(got.data(), got.size());
  if (got != tag) throw FormatError("bad magic: expected " + std::string(tag));
}

std::uint64_t BinaryReader::u64() {
  std::array<char, 8> bytes{};
  read_bytes(bytes.data(), bytes.size());
  return from_le(bytes);
}

double BinaryReader::f64() { return std::bit_cast<double>(u64()); }

std::string BinaryReader::string() {
  const std::uint64_t n = u64();
  if (n > kMaxLength) throw FormatError("string length out of range");
  std::string s(n, '\0');
  read_bytes(s.data(), n);
  return s;
}

Vector BinaryReader::vector() {
  const std::uint64_t n = u64();
  if (n > kMaxLength) throw FormatError("vector length out of range");
  Vector v(n);
  for (double& x : v) x = f64();
  return v;
}

Matrix BinaryReader::matrix() {
  const std::uint64_t r = u64(), c = u64();
  if (r * c > kMaxLength) throw FormatError("matrix size out of range");
  Matrix m(r, c);
  for (double& x : m.values()) x = f64();
  return m;
}

}  // namespace conec
