#include "msl/service/inference.hpp"

#include "msl/core/mgt_io.hpp"

#include <png.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <stdexcept>

namespace msl::service {

ModalitySelection parse_modalities(const std::string& text) {
  ModalitySelection sel{false, false};
  std::istringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    if (item == "ct") sel.ct = true;
    else if (item == "mri") sel.mri = true;
    else if (!item.empty()) throw std::invalid_argument("unknown modality '" + item + "' (expected ct, mri)");
  }
  return sel;
}

Tensor<float> case_representation(const model::MslModel<float>& model, const training::Case& c,
                                  ModalitySelection use) {
  const bool ct = use.ct && c.has_ct();
  const bool mri = use.mri && c.has_mri();
  if (!ct && !mri) throw MissingModalityError("no sensory data: both modalities missing or deselected");
  const Index n = model.config().image_size;
  for (const ImageF* img : {ct ? &c.ct_input : nullptr, mri ? &c.mri_input : nullptr}) {
    if (img && (img->rows() != n || img->cols() != n)) {
      throw std::invalid_argument("case image is " + std::to_string(img->rows()) + "x" + std::to_string(img->cols()) +
                                  ", model expects " + std::to_string(n) + "x" + std::to_string(n));
    }
  }
  NoGradGuard guard;
  return model
      .represent(ct ? physics::image_to_tensor(c.ct_input) : Tensor<float>(),
                 mri ? physics::image_to_tensor(c.mri_input) : Tensor<float>())
      .rep.detach();
}

Tensor<float> lambda_map_tensor(const ImageF& map, Index rep_size) {
  if (map.rows() != map.cols() || map.rows() == 0 || map.rows() % rep_size != 0) {
    throw std::invalid_argument("lambda map must be square with a side that is a multiple of " +
                                std::to_string(rep_size) + ", got " + std::to_string(map.rows()) + "x" +
                                std::to_string(map.cols()));
  }
  if (!map.allFinite() || (map < 0.0f).any() || (map > 1.0f).any()) {
    throw std::invalid_argument("lambda outside [0, 1]");
  }
  const Index f = map.rows() / rep_size;
  Tensor<float>::Storage v(rep_size * rep_size);
  for (Index i = 0; i < rep_size; ++i) {
    for (Index j = 0; j < rep_size; ++j) {
      v[i * rep_size + j] =
          f == 1 ? map(i, j) : static_cast<float>(map.block(i * f, j * f, f, f).cast<double>().mean());
    }
  }
  return Tensor<float>(Shape{1, 1, rep_size, rep_size}, std::move(v));
}

ImageF decode_image(const model::MslModel<float>& model, const Tensor<float>& rep, const Tensor<float>& lambda) {
  NoGradGuard guard;
  return physics::tensor_to_image(model.decode(rep, lambda));
}

ImageF decode_image(const model::MslModel<float>& model, const Tensor<float>& rep, double lambda) {
  return decode_image(model, rep, model::lambda_scalar<float>(1, lambda));
}

std::vector<std::uint8_t> quantize(const ImageF& image) {
  std::vector<std::uint8_t> out(static_cast<std::size_t>(image.size()));
  for (Index i = 0; i < image.size(); ++i) {
    const float v = std::isnan(image.data()[i]) ? 0.0f : std::clamp(image.data()[i], 0.0f, 1.0f);
    out[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
  }
  return out;
}

namespace {

void png_write_to_string(png_structp png, png_bytep data, png_size_t length) {
  auto* out = static_cast<std::string*>(png_get_io_ptr(png));
  out->append(reinterpret_cast<const char*>(data), length);
}

void png_flush_noop(png_structp) {}

}  // namespace

std::string encode_png_gray(const std::vector<std::uint8_t>& pixels, Index height, Index width) {
  if (static_cast<Index>(pixels.size()) != height * width || height <= 0 || width <= 0) {
    throw std::invalid_argument("encode_png: pixel count does not match dimensions");
  }
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw std::runtime_error("png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw std::runtime_error("png_create_info_struct failed");
  }
  std::string out;
  std::vector<png_bytep> rows(static_cast<std::size_t>(height));
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("PNG encoding failed");
  }
  png_set_write_fn(png, &out, png_write_to_string, png_flush_noop);
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8, PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_set_compression_level(png, 6);
  png_write_info(png, info);
  for (Index r = 0; r < height; ++r) {
    rows[static_cast<std::size_t>(r)] = const_cast<png_bytep>(pixels.data() + r * width);
  }
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return out;
}

std::string encode_png(const ImageF& image) {
  return encode_png_gray(quantize(image), image.rows(), image.cols());
}

std::string image_mgt(const ImageF& image) {
  return encode_mgt(Shape{image.rows(), image.cols()}, std::span<const float>(image.data(), image.size()));
}

ImageF image_from_tensor(const Tensor<float>& t) {
  if (t.ndim() == 2) return Eigen::Map<const ImageF>(t.data(), t.dim(0), t.dim(1));
  if (t.ndim() == 4 && t.dim(0) == 1 && t.dim(1) == 1) return physics::tensor_to_image(t);
  throw ShapeError("expected a [H, W] or [1, 1, H, W] tensor, got " + to_string(t.shape()));
}

std::string lambda_stem(double lambda) {
  if (lambda == 0.0) return "msl_ct";
  if (lambda == 1.0) return "msl_mri";
  char buf[64];
  std::snprintf(buf, sizeof buf, "msl_lambda_%.4f", lambda);
  return buf;
}

namespace {
constexpr char kB64[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
}

std::string base64_encode(std::string_view bytes) {
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 2 < bytes.size(); i += 3) {
    const auto n = (static_cast<unsigned char>(bytes[i]) << 16) | (static_cast<unsigned char>(bytes[i + 1]) << 8) |
                   static_cast<unsigned char>(bytes[i + 2]);
    out += {kB64[(n >> 18) & 63], kB64[(n >> 12) & 63], kB64[(n >> 6) & 63], kB64[n & 63]};
  }
  if (i + 1 == bytes.size()) {
    const auto n = static_cast<unsigned char>(bytes[i]) << 16;
    out += {kB64[(n >> 18) & 63], kB64[(n >> 12) & 63], '=', '='};
  } else if (i + 2 == bytes.size()) {
    const auto n = (static_cast<unsigned char>(bytes[i]) << 16) | (static_cast<unsigned char>(bytes[i + 1]) << 8);
    out += {kB64[(n >> 18) & 63], kB64[(n >> 12) & 63], kB64[(n >> 6) & 63], '='};
  }
  return out;
}

std::string base64_decode(std::string_view text) {
  std::array<int, 256> lookup;
  lookup.fill(-1);
  for (int i = 0; i < 64; ++i) lookup[static_cast<unsigned char>(kB64[i])] = i;
  if (text.size() % 4 != 0) throw std::invalid_argument("base64: length not a multiple of 4");
  std::string out;
  for (std::size_t i = 0; i < text.size(); i += 4) {
    int v[4];
    int pad = 0;
    for (int k = 0; k < 4; ++k) {
      const char ch = text[i + k];
      if (ch == '=' && i + 4 == text.size() && k >= 2) {
        v[k] = 0;
        ++pad;
        continue;
      }
      if (pad > 0) throw std::invalid_argument("base64: data after padding");
      v[k] = lookup[static_cast<unsigned char>(ch)];
      if (v[k] < 0) throw std::invalid_argument("base64: invalid character");
    }
    const int n = (v[0] << 18) | (v[1] << 12) | (v[2] << 6) | v[3];
    out += static_cast<char>((n >> 16) & 255);
    if (pad < 2) out += static_cast<char>((n >> 8) & 255);
    if (pad < 1) out += static_cast<char>(n & 255);
  }
  return out;
}

}  // namespace msl::service
