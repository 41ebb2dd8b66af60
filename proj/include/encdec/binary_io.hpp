#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace encdec {

// Little-endian byte sink used by every on-disk format in the project.
class ByteWriter {
 public:
  void u8(std::uint8_t v) { bytes_.push_back(v); }
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void f32(float v);
  void f64(double v);
  void varint(std::uint64_t v);  // LEB128
  void raw(std::span<const std::uint8_t> data);
  void str(std::string_view s) { raw({reinterpret_cast<const std::uint8_t*>(s.data()), s.size()}); }

  const std::vector<std::uint8_t>& bytes() const { return bytes_; }
  std::size_t size() const { return bytes_.size(); }

 private:
  std::vector<std::uint8_t> bytes_;
};

// Bounds-checked reader; every failure is a FormatError naming the offset
// and the expected vs available byte counts.
class ByteReader {
 public:
  ByteReader(std::span<const std::uint8_t> data, std::string what)
      : data_(data), what_(std::move(what)) {}

  std::uint8_t u8();
  std::uint32_t u32();
  std::uint64_t u64();
  float f32();
  double f64();
  std::uint64_t varint();
  std::span<const std::uint8_t> raw(std::size_t n);
  std::string str(std::size_t n);

  std::size_t offset() const { return offset_; }
  std::size_t remaining() const { return data_.size() - offset_; }
  [[noreturn]] void fail(const std::string& message) const;

 private:
  void need(std::size_t n) const;

  std::span<const std::uint8_t> data_;
  std::string what_;
  std::size_t offset_ = 0;
};

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

// CRC-32 (IEEE 802.3 polynomial, as in zlib/PNG).
std::uint32_t crc32(std::span<const std::uint8_t> data);

}  // namespace encdec
