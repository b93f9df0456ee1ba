#pragma once

#include "msl/core/ops.hpp"
#include "msl/core/tensor.hpp"

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace msl::model {

enum class Modality { CT, MRI };

// Fixed slot order for token groups; also the concatenation order.
enum class Group : int { IntraCT = 0, InterCT2MRI = 1, InterMRI2CT = 2, IntraMRI = 3 };
inline constexpr int kGroupCount = 4;
const char* group_name(Group g);

struct ModelConfig {
  Index image_size = 64;
  double width = 0.25;
  int patch = 4;
  Index model_dim = 256;
  int heads = 1;
  int blocks = 2;
  int mlp_ratio = 4;
  Index embed_dim = 64;
  int encoder_res_blocks = 3;
  int decoder_res_blocks = 3;
  std::uint64_t seed = 0;

  // Channel count for a full-scale width, scaled by `width`.
  Index channels(int full_width) const;
  Index feature_size() const { return image_size / 4; }
  Index tokens_per_group() const;
  Index token_dim() const;

  void validate() const;
  std::string to_text() const;
  static ModelConfig from_text(const std::string& text);
  bool operator==(const ModelConfig&) const = default;
};

template <typename S>
struct NamedParam {
  std::string name;
  Tensor<S> tensor;
};

template <typename S>
struct Linear {
  Tensor<S> weight;  // [in, out]
  Tensor<S> bias;    // [out]
  Tensor<S> operator()(const Tensor<S>& x) const;
};

template <typename S>
struct Conv {
  Tensor<S> weight;
  Tensor<S> bias;
  int stride = 1;
  int pad = 0;
  int output_pad = 0;
  bool transposed = false;
  Tensor<S> operator()(const Tensor<S>& x) const;
};

template <typename S>
struct LayerNorm {
  Tensor<S> gamma;
  Tensor<S> beta;
  Tensor<S> operator()(const Tensor<S>& x) const;
};

// Per-channel (x - mean) / (std + eps) over the spatial axes of NCHW.
inline constexpr double kNormEps = 1e-5;
template <typename S>
Tensor<S> instance_norm(const Tensor<S>& x);

// Hybridization parameter: [N, 1, 1, 1] for a global lambda, [N, 1, h, w]
// at representation resolution for a spatial map.
template <typename S>
Tensor<S> lambda_scalar(Index batch, double value);
template <typename S>
void check_lambda(const Tensor<S>& lambda);

// CIN affine maps for one modulated layer.
template <typename S>
struct CinLayer {
  Linear<S> gamma;
  Linear<S> beta;
};

// gamma(s), beta(s) with s = f_s(lambda) evaluated per position of `lambda`,
// each shaped [N, C, h, w] (h = w = 1 for a global lambda).
template <typename S>
std::pair<Tensor<S>, Tensor<S>> cin_affine(const Linear<S>& embed, const CinLayer<S>& layer,
                                           const Tensor<S>& lambda);
// Conditional instance norm; spatial lambda maps are bilinearly resized to x.
template <typename S>
Tensor<S> cin(const Tensor<S>& x, const Linear<S>& embed, const CinLayer<S>& layer,
              const Tensor<S>& lambda);

template <typename S>
struct TokenGroups {
  std::array<Tensor<S>, kGroupCount> groups;  // [N, G, token_dim] or undefined

  bool has(Group g) const { return groups[static_cast<int>(g)].defined(); }
  const Tensor<S>& operator[](Group g) const { return groups[static_cast<int>(g)]; }
  Tensor<S>& operator[](Group g) { return groups[static_cast<int>(g)]; }
};

template <typename S>
struct SlotInput {
  Group group;
  Tensor<S> tokens;  // [N, G, model_dim]
};

// Softmax matrices [N * heads, T, T] per block, recorded on request.
template <typename S>
struct AttentionTrace {
  std::vector<Tensor<S>> weights;
};

template <typename S>
struct Representation {
  TokenGroups<S> groups;
  Tensor<S> rep;  // MultiSensorRep [N, C, h, w]
};

template <typename S>
class MslModel {
 public:
  explicit MslModel(ModelConfig config);

  const ModelConfig& config() const { return config_; }
  const std::vector<NamedParam<S>>& parameters() const { return params_; }
  std::vector<Tensor<S>> parameter_tensors() const;
  const Tensor<S>* find(const std::string& name) const;
  // Copies values by name; throws on missing names or shape mismatches.
  void load_values(const std::vector<NamedParam<S>>& values);

  // Back-transformed image [N, 1, H, W] -> feature map [N, C, H/4, W/4].
  Tensor<S> encode(Modality modality, const Tensor<S>& image) const;
  // Feature map -> [N, G, model_dim].
  Tensor<S> tokenize(const Tensor<S>& features) const;
  // Either argument may be undefined, not both.
  TokenGroups<S> interact(const Tensor<S>& ct_tokens, const Tensor<S>& mri_tokens,
                          AttentionTrace<S>* trace = nullptr) const;
  // Runs the transformer on groups given in any order; each keeps its slot.
  TokenGroups<S> interact_slots(std::span<const SlotInput<S>> inputs,
                                AttentionTrace<S>* trace = nullptr) const;
  // (f_enhanced_CT, f_enhanced_MRI); single-modality groups fill the missing side.
  std::pair<Tensor<S>, Tensor<S>> enhance(const TokenGroups<S>& groups) const;
  // Sum of the enhanced features, upsampled to the representation.
  Tensor<S> compose(const TokenGroups<S>& groups) const;
  Tensor<S> decode(const Tensor<S>& rep, const Tensor<S>& lambda) const;

  // encode -> tokenize -> interact -> compose; either image may be undefined.
  Representation<S> represent(const Tensor<S>& ct_image, const Tensor<S>& mri_image) const;
  // Same, from precomputed feature maps.
  Representation<S> represent_features(const Tensor<S>& f_ct, const Tensor<S>& f_mri) const;
  Tensor<S> forward(const Tensor<S>& ct_image, const Tensor<S>& mri_image,
                    const Tensor<S>& lambda) const;

  // Copy of this model at another precision.
  template <typename T>
  MslModel<T> cast() const {
    MslModel<T> out(config_);
    std::vector<NamedParam<T>> values;
    for (const auto& p : params_) values.push_back({p.name, p.tensor.template cast<T>()});
    out.load_values(values);
    return out;
  }

  const Linear<S>& lambda_embedding() const { return embed_; }
  const CinLayer<S>& cin_layer(std::size_t i) const { return cin_layers_.at(i); }
  std::size_t cin_layer_count() const { return cin_layers_.size(); }

 private:
  struct ResBlock {
    Conv<S> a, b;
  };
  struct Encoder {
    Conv<S> stem, down1, down2;
    std::vector<ResBlock> res;
  };
  struct Block {
    LayerNorm<S> ln1, ln2;
    Linear<S> q, k, v, proj, fc1, fc2;
  };

  Tensor<S> attention(const Block& block, const Tensor<S>& x, AttentionTrace<S>* trace) const;

  enum class Init { Uniform, Normal, Constant };
  Tensor<S> add_param(const std::string& name, Shape shape, Init init, double scale);
  Linear<S> make_linear(const std::string& name, Index in, Index out);
  Conv<S> make_conv(const std::string& name, Index in, Index out, int k, int stride, int pad);
  Conv<S> make_conv_t(const std::string& name, Index in, Index out, int k, int stride, int pad,
                      int output_pad);
  LayerNorm<S> make_layer_norm(const std::string& name, Index dim);

  ModelConfig config_;
  std::vector<NamedParam<S>> params_;
  std::uint64_t init_counter_ = 0;

  Encoder enc_ct_, enc_mri_;
  Linear<S> token_proj_, token_out_;
  Tensor<S> cls_token_, pos_embed_;
  std::vector<Block> blocks_;
  LayerNorm<S> final_norm_;
  Conv<S> up1_, up2_;
  Linear<S> embed_;
  std::vector<ResBlock> dec_res_;
  Conv<S> dec_up1_, dec_up2_, dec_out_;
  std::vector<CinLayer<S>> cin_layers_;
};

extern template class MslModel<float>;
extern template class MslModel<double>;

}  // namespace msl::model
