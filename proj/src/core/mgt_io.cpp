#include "msl/core/mgt_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace msl {

namespace le {

void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>(v >> 8));
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f32(std::string& out, float v) { put_u32(out, std::bit_cast<std::uint32_t>(v)); }

std::string_view Reader::take(std::size_t n) {
  if (bytes_.size() - pos_ < n) throw std::runtime_error("truncated binary data");
  auto view = bytes_.substr(pos_, n);
  pos_ += n;
  return view;
}

std::uint16_t Reader::u16() {
  auto b = take(2);
  return static_cast<std::uint16_t>(static_cast<unsigned char>(b[0]) |
                                    (static_cast<unsigned char>(b[1]) << 8));
}

std::uint32_t Reader::u32() {
  auto b = take(4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(b[i])) << (8 * i);
  return v;
}

float Reader::f32() { return std::bit_cast<float>(u32()); }

}  // namespace le

std::string encode_mgt(const Shape& shape, std::span<const float> values) {
  if (static_cast<Index>(values.size()) != numel(shape)) {
    throw ShapeError("encode_mgt: shape " + to_string(shape) + " does not match payload");
  }
  std::string out = "MGT1";
  out.reserve(8 + 4 * shape.size() + 4 * values.size());
  le::put_u32(out, static_cast<std::uint32_t>(shape.size()));
  for (Index d : shape) le::put_u32(out, static_cast<std::uint32_t>(d));
  for (float v : values) le::put_f32(out, v);
  return out;
}

Tensor<float> decode_mgt(std::string_view bytes) {
  le::Reader r(bytes);
  if (r.take(4) != "MGT1") throw std::runtime_error("not an MGT1 tensor file (bad magic)");
  const std::uint32_t ndim = r.u32();
  if (ndim > 16) throw std::runtime_error("MGT1: implausible rank " + std::to_string(ndim));
  Shape shape;
  for (std::uint32_t i = 0; i < ndim; ++i) shape.push_back(r.u32());
  Tensor<float>::Storage values(numel(shape));
  for (Index i = 0; i < values.size(); ++i) values[i] = r.f32();
  if (!r.done()) throw std::runtime_error("MGT1: trailing bytes after payload");
  return Tensor<float>(shape, std::move(values));
}

void save_mgt(const std::filesystem::path& path, const Tensor<float>& tensor) {
  write_file(path, encode_mgt(tensor.shape(), {tensor.data(), static_cast<std::size_t>(tensor.size())}));
}

Tensor<float> load_mgt(const std::filesystem::path& path) {
  try {
    return decode_mgt(read_file(path));
  } catch (const std::runtime_error& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

}  // namespace msl
