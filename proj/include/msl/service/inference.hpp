#pragma once

#include "msl/model/model.hpp"
#include "msl/training/data.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace msl::service {

using physics::ImageF;

struct ModalitySelection {
  bool ct = true;
  bool mri = true;
};

// Parses "ct", "mri", "ct,mri" (any order).
ModalitySelection parse_modalities(const std::string& text);

class MissingModalityError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Multi-sensor representation [1, C, h, w] of one case from the selected and
// available modalities; throws MissingModalityError when none remain.
Tensor<float> case_representation(const model::MslModel<float>& model, const training::Case& c,
                                  ModalitySelection use = {});

// Lambda maps are accepted at representation resolution or at any integer
// multiple of it (area-averaged down). Returns [1, 1, h, w].
Tensor<float> lambda_map_tensor(const ImageF& map, Index rep_size);

ImageF decode_image(const model::MslModel<float>& model, const Tensor<float>& rep, const Tensor<float>& lambda);
ImageF decode_image(const model::MslModel<float>& model, const Tensor<float>& rep, double lambda);

// Clamp to [0, 1], scale by 255, round half away from zero.
std::vector<std::uint8_t> quantize(const ImageF& image);
// 8-bit grayscale PNG of quantize(image) (or of raw bytes, row-major).
std::string encode_png(const ImageF& image);
std::string encode_png_gray(const std::vector<std::uint8_t>& pixels, Index height, Index width);
// ".mgt" bytes of an image as a [H, W] tensor.
std::string image_mgt(const ImageF& image);
ImageF image_from_tensor(const Tensor<float>& t);

// File stem for a global lambda: msl_ct (0), msl_mri (1), else msl_lambda_<value>.
std::string lambda_stem(double lambda);

std::string base64_encode(std::string_view bytes);
std::string base64_decode(std::string_view text);

}  // namespace msl::service
