#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace supergseg {

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view bytes);

std::string base64_encode(std::string_view bytes);
/// Throws ParseError naming the offset of the first invalid character.
std::string base64_decode(std::string_view text);

/// Little-endian f32 packing of a double array (values rounded to nearest float).
std::string pack_f32(std::span<const double> values);
std::vector<double> unpack_f32(std::string_view bytes);
std::string pack_f64(std::span<const double> values);
std::vector<double> unpack_f64(std::string_view bytes);
std::string pack_i32(std::span<const int> values);
std::vector<int> unpack_i32(std::string_view bytes);

/// Appends / reads little-endian scalars.
class ByteWriter {
 public:
  void u32(std::uint32_t v);
  void i32(std::int32_t v) { u32(static_cast<std::uint32_t>(v)); }
  void f32(float v);
  void raw(std::string_view bytes) { out_.append(bytes); }
  const std::string& bytes() const { return out_; }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string_view bytes) : bytes_(bytes) {}
  std::uint32_t u32();
  std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
  float f32();
  std::string_view raw(std::size_t n);
  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n) const;
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace supergseg
