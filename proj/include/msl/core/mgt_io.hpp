#pragma once

#include "msl/core/tensor.hpp"

#include <filesystem>
#include <span>
#include <string>

namespace msl {

// ".mgt" tensor file: "MGT1", u32 ndim, ndim x u32 dims, little-endian f32
// payload in row-major order.
std::string encode_mgt(const Shape& shape, std::span<const float> values);
Tensor<float> decode_mgt(std::string_view bytes);

void save_mgt(const std::filesystem::path& path, const Tensor<float>& tensor);
Tensor<float> load_mgt(const std::filesystem::path& path);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view bytes);

namespace le {

void put_u16(std::string& out, std::uint16_t v);
void put_u32(std::string& out, std::uint32_t v);
void put_f32(std::string& out, float v);

// Bounds-checked little-endian reader over a byte buffer.
class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}
  std::uint16_t u16();
  std::uint32_t u32();
  float f32();
  std::string_view take(std::size_t n);
  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace le

}  // namespace msl
