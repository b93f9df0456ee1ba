#include "msl/model/model.hpp"

#include "msl/core/random.hpp"

#include <cmath>
#include <map>
#include <sstream>
#include <stdexcept>

namespace msl::model {

const char* group_name(Group g) {
  switch (g) {
    case Group::IntraCT: return "intra_CT";
    case Group::InterCT2MRI: return "inter_CT2MRI";
    case Group::InterMRI2CT: return "inter_MRI2CT";
    case Group::IntraMRI: return "intra_MRI";
  }
  return "?";
}

Index ModelConfig::channels(int full_width) const {
  return std::max<Index>(1, static_cast<Index>(std::lround(full_width * width)));
}

Index ModelConfig::tokens_per_group() const {
  const Index g = feature_size() / patch;
  return g * g;
}

Index ModelConfig::token_dim() const { return channels(256) * patch * patch; }

void ModelConfig::validate() const {
  if (image_size <= 0 || image_size % 16 != 0) {
    throw std::invalid_argument("model config: image_size must be a positive multiple of 16");
  }
  if (!(width > 0)) throw std::invalid_argument("model config: width must be positive");
  // Two stride-2 upsampling blocks restore one patch's extent.
  if (patch != 4) throw std::invalid_argument("model config: patch must be 4");
  if (heads < 1 || model_dim % heads != 0) {
    throw std::invalid_argument("model config: model_dim must be divisible by heads");
  }
  if (blocks < 1 || mlp_ratio < 1 || embed_dim < 1 || encoder_res_blocks < 0 || decoder_res_blocks < 0) {
    throw std::invalid_argument("model config: block counts and widths must be positive");
  }
}

std::string ModelConfig::to_text() const {
  std::ostringstream out;
  out.precision(17);
  out << "image_size = " << image_size << "\n"
      << "width = " << width << "\n"
      << "patch = " << patch << "\n"
      << "model_dim = " << model_dim << "\n"
      << "heads = " << heads << "\n"
      << "blocks = " << blocks << "\n"
      << "mlp_ratio = " << mlp_ratio << "\n"
      << "embed_dim = " << embed_dim << "\n"
      << "encoder_res_blocks = " << encoder_res_blocks << "\n"
      << "decoder_res_blocks = " << decoder_res_blocks << "\n"
      << "seed = " << seed << "\n";
  return out.str();
}

ModelConfig ModelConfig::from_text(const std::string& text) {
  ModelConfig c;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      if (line.find_first_not_of(" \t\r") != std::string::npos) {
        throw std::invalid_argument("model config: malformed line '" + line + "'");
      }
      continue;
    }
    std::istringstream key_in(line.substr(0, eq));
    std::string key;
    key_in >> key;
    std::istringstream v(line.substr(eq + 1));
    bool ok = true;
    if (key == "image_size") ok = static_cast<bool>(v >> c.image_size);
    else if (key == "width") ok = static_cast<bool>(v >> c.width);
    else if (key == "patch") ok = static_cast<bool>(v >> c.patch);
    else if (key == "model_dim") ok = static_cast<bool>(v >> c.model_dim);
    else if (key == "heads") ok = static_cast<bool>(v >> c.heads);
    else if (key == "blocks") ok = static_cast<bool>(v >> c.blocks);
    else if (key == "mlp_ratio") ok = static_cast<bool>(v >> c.mlp_ratio);
    else if (key == "embed_dim") ok = static_cast<bool>(v >> c.embed_dim);
    else if (key == "encoder_res_blocks") ok = static_cast<bool>(v >> c.encoder_res_blocks);
    else if (key == "decoder_res_blocks") ok = static_cast<bool>(v >> c.decoder_res_blocks);
    else if (key == "seed") ok = static_cast<bool>(v >> c.seed);
    else throw std::invalid_argument("model config: unknown key '" + key + "'");
    if (!ok) throw std::invalid_argument("model config: bad value for '" + key + "'");
  }
  c.validate();
  return c;
}

template <typename S>
Tensor<S> Linear<S>::operator()(const Tensor<S>& x) const {
  return add(matmul(x, weight), bias);
}

template <typename S>
Tensor<S> Conv<S>::operator()(const Tensor<S>& x) const {
  return transposed ? conv_transpose2d(x, weight, bias, stride, pad, output_pad)
                    : conv2d(x, weight, bias, stride, pad);
}

template <typename S>
Tensor<S> LayerNorm<S>::operator()(const Tensor<S>& x) const {
  const int last = x.ndim() - 1;
  const Tensor<S> centered = sub(x, mean(x, {last}, true));
  const Tensor<S> var = mean(square(centered), {last}, true);
  const Tensor<S> normed = div(centered, sqrt(add_scalar(var, static_cast<S>(kNormEps))));
  return add(mul(normed, gamma), beta);
}

template <typename S>
Tensor<S> instance_norm(const Tensor<S>& x) {
  return div(sub(x, channel_mean(x)), channel_std(x, static_cast<S>(kNormEps)));
}

template <typename S>
Tensor<S> lambda_scalar(Index batch, double value) {
  Tensor<S> t(Shape{batch, 1, 1, 1}, static_cast<S>(value));
  check_lambda(t);
  return t;
}

template <typename S>
void check_lambda(const Tensor<S>& lambda) {
  if (!lambda.defined() || lambda.ndim() != 4 || lambda.dim(1) != 1) {
    throw ShapeError("lambda must be [N, 1, h, w], got " +
                     (lambda.defined() ? to_string(lambda.shape()) : std::string("undefined")));
  }
  const auto& v = lambda.values();
  if (!(v >= S(0)).all() || !(v <= S(1)).all()) {
    throw std::invalid_argument("lambda outside [0, 1]");
  }
}

template <typename S>
std::pair<Tensor<S>, Tensor<S>> cin_affine(const Linear<S>& embed, const CinLayer<S>& layer,
                                           const Tensor<S>& lambda) {
  const Index N = lambda.dim(0), h = lambda.dim(2), w = lambda.dim(3);
  const Tensor<S> s = embed(reshape(lambda, Shape{N * h * w, 1}));
  auto spatial = [&](const Tensor<S>& rows) {
    const Index C = rows.dim(1);
    return permute(reshape(rows, Shape{N, h, w, C}), {0, 3, 1, 2});
  };
  return {spatial(layer.gamma(s)), spatial(layer.beta(s))};
}

template <typename S>
Tensor<S> cin(const Tensor<S>& x, const Linear<S>& embed, const CinLayer<S>& layer,
              const Tensor<S>& lambda) {
  const Index C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (layer.gamma.weight.dim(1) != C || layer.beta.weight.dim(1) != C) {
    throw ShapeError("cin: affine width " + std::to_string(layer.gamma.weight.dim(1)) +
                     " does not match channels " + std::to_string(C));
  }
  if (lambda.dim(0) != x.dim(0)) throw ShapeError("cin: lambda batch does not match features");
  Tensor<S> lam = lambda;
  const bool global = lambda.dim(2) == 1 && lambda.dim(3) == 1;
  if (!global && (lambda.dim(2) != H || lambda.dim(3) != W)) lam = resize_bilinear(lambda, H, W);
  const auto [gamma, beta] = cin_affine(embed, layer, lam);
  return add(mul(instance_norm(x), gamma), beta);
}

template <typename S>
MslModel<S>::MslModel(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
  const ModelConfig& c = config_;

  auto make_encoder = [&](const std::string& prefix) {
    Encoder e;
    e.stem = make_conv(prefix + ".stem", 1, c.channels(64), 7, 1, 3);
    e.down1 = make_conv(prefix + ".down1", c.channels(64), c.channels(128), 4, 2, 1);
    e.down2 = make_conv(prefix + ".down2", c.channels(128), c.channels(256), 4, 2, 1);
    for (int i = 0; i < c.encoder_res_blocks; ++i) {
      const std::string n = prefix + ".res" + std::to_string(i);
      e.res.push_back({make_conv(n + ".a", c.channels(256), c.channels(256), 3, 1, 1),
                       make_conv(n + ".b", c.channels(256), c.channels(256), 3, 1, 1)});
    }
    return e;
  };
  enc_ct_ = make_encoder("enc_ct");
  enc_mri_ = make_encoder("enc_mri");

  const Index D = c.model_dim;
  const Index slots = kGroupCount * c.tokens_per_group() + 1;
  token_proj_ = make_linear("tokens.proj", c.token_dim(), D);
  cls_token_ = add_param("tokens.cls", {1, 1, D}, Init::Normal, 0.02);
  pos_embed_ = add_param("tokens.pos", {slots, D}, Init::Normal, 0.02);
  for (int b = 0; b < c.blocks; ++b) {
    const std::string n = "block" + std::to_string(b);
    Block blk;
    blk.ln1 = make_layer_norm(n + ".ln1", D);
    blk.q = make_linear(n + ".q", D, D);
    blk.k = make_linear(n + ".k", D, D);
    blk.v = make_linear(n + ".v", D, D);
    blk.proj = make_linear(n + ".proj", D, D);
    blk.ln2 = make_layer_norm(n + ".ln2", D);
    blk.fc1 = make_linear(n + ".fc1", D, D * c.mlp_ratio);
    blk.fc2 = make_linear(n + ".fc2", D * c.mlp_ratio, D);
    blocks_.push_back(std::move(blk));
  }
  final_norm_ = make_layer_norm("tokens.norm", D);
  token_out_ = make_linear("tokens.out", D, c.token_dim());
  up1_ = make_conv_t("up1", c.token_dim(), c.channels(512), 3, 2, 1, 1);
  up2_ = make_conv_t("up2", c.channels(512), c.channels(256), 3, 2, 1, 1);

  embed_ = make_linear("dec.embed", 1, c.embed_dim);
  auto make_cin = [&](const std::string& n, Index channels) {
    // Zero weights and unit scale: the untrained decoder is a plain instance-norm decoder.
    CinLayer<S> l;
    l.gamma.weight = add_param(n + ".gamma.w", {c.embed_dim, channels}, Init::Constant, 0.0);
    l.gamma.bias = add_param(n + ".gamma.b", {channels}, Init::Constant, 1.0);
    l.beta.weight = add_param(n + ".beta.w", {c.embed_dim, channels}, Init::Constant, 0.0);
    l.beta.bias = add_param(n + ".beta.b", {channels}, Init::Constant, 0.0);
    cin_layers_.push_back(l);
  };
  const Index R = c.channels(256);
  for (int i = 0; i < c.decoder_res_blocks; ++i) {
    const std::string n = "dec.res" + std::to_string(i);
    dec_res_.push_back({make_conv(n + ".a", R, R, 3, 1, 1), make_conv(n + ".b", R, R, 3, 1, 1)});
    make_cin(n + ".cin_a", R);
    make_cin(n + ".cin_b", R);
  }
  dec_up1_ = make_conv_t("dec.up1", R, c.channels(128), 3, 2, 1, 1);
  make_cin("dec.up1.cin", c.channels(128));
  dec_up2_ = make_conv_t("dec.up2", c.channels(128), c.channels(64), 3, 2, 1, 1);
  make_cin("dec.up2.cin", c.channels(64));
  dec_out_ = make_conv("dec.out", c.channels(64), 1, 7, 1, 3);
}

template <typename S>
Tensor<S> MslModel<S>::add_param(const std::string& name, Shape shape, Init init, double scale) {
  Rng rng(mix_seed(config_.seed, init_counter_++));
  typename Tensor<S>::Storage v(numel(shape));
  for (Index i = 0; i < v.size(); ++i) {
    switch (init) {
      case Init::Uniform: v[i] = static_cast<S>(rng.uniform(-scale, scale)); break;
      case Init::Normal: v[i] = static_cast<S>(scale * rng.normal()); break;
      case Init::Constant: v[i] = static_cast<S>(scale); break;
    }
  }
  Tensor<S> t(std::move(shape), std::move(v));
  t.mark_parameter();
  params_.push_back({name, t});
  return t;
}

// Kaiming-uniform for ReLU fan-in, zero biases.
template <typename S>
Linear<S> MslModel<S>::make_linear(const std::string& name, Index in, Index out) {
  Linear<S> l;
  l.weight = add_param(name + ".w", {in, out}, Init::Uniform, std::sqrt(6.0 / static_cast<double>(in)));
  l.bias = add_param(name + ".b", {out}, Init::Constant, 0.0);
  return l;
}

template <typename S>
Conv<S> MslModel<S>::make_conv(const std::string& name, Index in, Index out, int k, int stride,
                               int pad) {
  Conv<S> c;
  const double fan_in = static_cast<double>(in * k * k);
  c.weight = add_param(name + ".w", {out, in, k, k}, Init::Uniform, std::sqrt(6.0 / fan_in));
  c.bias = add_param(name + ".b", {out}, Init::Constant, 0.0);
  c.stride = stride;
  c.pad = pad;
  return c;
}

template <typename S>
Conv<S> MslModel<S>::make_conv_t(const std::string& name, Index in, Index out, int k, int stride,
                                 int pad, int output_pad) {
  Conv<S> c;
  const double fan_in = static_cast<double>(in * k * k);
  c.weight = add_param(name + ".w", {in, out, k, k}, Init::Uniform, std::sqrt(6.0 / fan_in));
  c.bias = add_param(name + ".b", {out}, Init::Constant, 0.0);
  c.stride = stride;
  c.pad = pad;
  c.output_pad = output_pad;
  c.transposed = true;
  return c;
}

template <typename S>
LayerNorm<S> MslModel<S>::make_layer_norm(const std::string& name, Index dim) {
  return {add_param(name + ".g", {dim}, Init::Constant, 1.0),
          add_param(name + ".b", {dim}, Init::Constant, 0.0)};
}

template <typename S>
std::vector<Tensor<S>> MslModel<S>::parameter_tensors() const {
  std::vector<Tensor<S>> out;
  for (const auto& p : params_) out.push_back(p.tensor);
  return out;
}

template <typename S>
const Tensor<S>* MslModel<S>::find(const std::string& name) const {
  for (const auto& p : params_)
    if (p.name == name) return &p.tensor;
  return nullptr;
}

template <typename S>
void MslModel<S>::load_values(const std::vector<NamedParam<S>>& values) {
  std::map<std::string, const Tensor<S>*> by_name;
  for (const auto& v : values) by_name[v.name] = &v.tensor;
  for (auto& p : params_) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) throw std::invalid_argument("missing parameter '" + p.name + "'");
    if (it->second->shape() != p.tensor.shape()) {
      throw ShapeError("parameter '" + p.name + "': expected " + to_string(p.tensor.shape()) +
                       ", got " + to_string(it->second->shape()));
    }
    p.tensor.mutable_values() = it->second->values();
  }
}

template <typename S>
Tensor<S> MslModel<S>::encode(Modality modality, const Tensor<S>& image) const {
  const Index n = config_.image_size;
  if (!image.defined() || image.ndim() != 4 || image.dim(1) != 1 || image.dim(2) != n || image.dim(3) != n) {
    throw ShapeError("encode: expected [N, 1, " + std::to_string(n) + ", " + std::to_string(n) + "], got " +
                     (image.defined() ? to_string(image.shape()) : std::string("undefined")));
  }
  const Encoder& e = modality == Modality::CT ? enc_ct_ : enc_mri_;
  Tensor<S> x = relu(instance_norm(e.stem(image)));
  x = relu(instance_norm(e.down1(x)));
  x = relu(instance_norm(e.down2(x)));
  for (const ResBlock& r : e.res) {
    x = add(x, instance_norm(r.b(relu(instance_norm(r.a(x))))));
  }
  return x;
}

template <typename S>
Tensor<S> MslModel<S>::tokenize(const Tensor<S>& features) const {
  if (features.ndim() != 4 || features.dim(2) % config_.patch != 0 || features.dim(3) % config_.patch != 0) {
    throw ShapeError("tokenize: spatial dims of " + to_string(features.shape()) +
                     " not divisible by patch " + std::to_string(config_.patch));
  }
  return token_proj_(patchify(features, config_.patch));
}

template <typename S>
Tensor<S> MslModel<S>::attention(const Block& blk, const Tensor<S>& x, AttentionTrace<S>* trace) const {
  const Index N = x.dim(0), T = x.dim(1), D = x.dim(2);
  const Index H = config_.heads, dh = D / H;
  auto heads = [&](const Tensor<S>& t) {
    return reshape(permute(reshape(t, Shape{N, T, H, dh}), {0, 2, 1, 3}), Shape{N * H, T, dh});
  };
  const Tensor<S> q = heads(blk.q(x)), k = heads(blk.k(x)), v = heads(blk.v(x));
  const Tensor<S> scores = scale(matmul(q, transpose(k)), static_cast<S>(1.0 / std::sqrt(double(dh))));
  const Tensor<S> att = softmax(scores, -1);
  if (trace) trace->weights.push_back(att);
  const Tensor<S> o = reshape(permute(reshape(matmul(att, v), Shape{N, H, T, dh}), {0, 2, 1, 3}),
                              Shape{N, T, D});
  return blk.proj(o);
}

template <typename S>
TokenGroups<S> MslModel<S>::interact(const Tensor<S>& ct_tokens, const Tensor<S>& mri_tokens,
                                     AttentionTrace<S>* trace) const {
  if (!ct_tokens.defined() && !mri_tokens.defined()) {
    throw std::invalid_argument("cross-domain interaction needs at least one modality");
  }
  std::vector<SlotInput<S>> inputs;
  if (ct_tokens.defined()) {
    inputs.push_back({Group::IntraCT, ct_tokens});
    inputs.push_back({Group::InterCT2MRI, ct_tokens});
  }
  if (mri_tokens.defined()) {
    inputs.push_back({Group::InterMRI2CT, mri_tokens});
    inputs.push_back({Group::IntraMRI, mri_tokens});
  }
  return interact_slots(inputs, trace);
}

template <typename S>
TokenGroups<S> MslModel<S>::interact_slots(std::span<const SlotInput<S>> inputs,
                                           AttentionTrace<S>* trace) const {
  if (inputs.empty()) throw std::invalid_argument("cross-domain interaction needs at least one modality");
  const Index G = config_.tokens_per_group(), D = config_.model_dim;
  const Index N = inputs.front().tokens.dim(0);
  std::vector<Tensor<S>> seq;
  seq.push_back(add(Tensor<S>(Shape{N, 1, D}), add(cls_token_, slice(pos_embed_, 0, 0, 1))));
  for (const SlotInput<S>& in : inputs) {
    if (in.tokens.shape() != Shape{N, G, D}) {
      throw ShapeError(std::string("interact: group ") + group_name(in.group) + " expected " +
                       to_string(Shape{N, G, D}) + ", got " + to_string(in.tokens.shape()));
    }
    const Index slot = 1 + static_cast<Index>(in.group) * G;
    seq.push_back(add(in.tokens, slice(pos_embed_, 0, slot, G)));
  }
  Tensor<S> x = concat<S>(seq, 1);
  for (const Block& blk : blocks_) {
    x = add(x, attention(blk, blk.ln1(x), trace));
    x = add(x, blk.fc2(relu(blk.fc1(blk.ln2(x)))));
  }
  x = final_norm_(x);

  TokenGroups<S> out;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    Tensor<S>& slot = out[inputs[i].group];
    if (slot.defined()) throw std::invalid_argument("interact: duplicate token group");
    slot = token_out_(slice(x, 1, 1 + static_cast<Index>(i) * G, G));
  }
  return out;
}

template <typename S>
std::pair<Tensor<S>, Tensor<S>> MslModel<S>::enhance(const TokenGroups<S>& g) const {
  const bool has_ct = g.has(Group::IntraCT) && g.has(Group::InterCT2MRI);
  const bool has_mri = g.has(Group::IntraMRI) && g.has(Group::InterMRI2CT);
  if (has_ct && has_mri) {
    return {add(g[Group::IntraCT], g[Group::InterMRI2CT]), add(g[Group::IntraMRI], g[Group::InterCT2MRI])};
  }
  if (has_mri) return {g[Group::InterMRI2CT], g[Group::IntraMRI]};
  if (has_ct) return {g[Group::IntraCT], g[Group::InterCT2MRI]};
  throw std::invalid_argument("compose: no complete modality group pair");
}

template <typename S>
Tensor<S> MslModel<S>::compose(const TokenGroups<S>& g) const {
  const auto [enh_ct, enh_mri] = enhance(g);
  const Tensor<S> fused = add(enh_ct, enh_mri);
  const Index N = fused.dim(0), C = fused.dim(2);
  const Index side = config_.feature_size() / config_.patch;
  Tensor<S> x = reshape(permute(fused, {0, 2, 1}), Shape{N, C, side, side});
  x = relu(instance_norm(up1_(x)));
  return relu(instance_norm(up2_(x)));
}

template <typename S>
Tensor<S> MslModel<S>::decode(const Tensor<S>& rep, const Tensor<S>& lambda) const {
  check_lambda(lambda);
  const Index f = config_.feature_size();
  if (rep.ndim() != 4 || rep.dim(2) != f || rep.dim(3) != f) {
    throw ShapeError("decode: representation shape " + to_string(rep.shape()));
  }
  const bool global = lambda.dim(2) == 1 && lambda.dim(3) == 1;
  if (!global && (lambda.dim(2) != f || lambda.dim(3) != f)) {
    throw ShapeError("decode: lambda map must be " + std::to_string(f) + "x" + std::to_string(f) +
                     ", got " + to_string(lambda.shape()));
  }
  std::size_t li = 0;
  Tensor<S> x = rep;
  for (const ResBlock& r : dec_res_) {
    Tensor<S> h = relu(cin(r.a(x), embed_, cin_layers_[li], lambda));
    h = cin(r.b(h), embed_, cin_layers_[li + 1], lambda);
    x = add(x, h);
    li += 2;
  }
  x = relu(cin(dec_up1_(x), embed_, cin_layers_[li++], lambda));
  x = relu(cin(dec_up2_(x), embed_, cin_layers_[li++], lambda));
  return dec_out_(x);
}

template <typename S>
Representation<S> MslModel<S>::represent_features(const Tensor<S>& f_ct, const Tensor<S>& f_mri) const {
  if (!f_ct.defined() && !f_mri.defined()) {
    throw std::invalid_argument("forward needs at least one of CT or MRI input");
  }
  Representation<S> r;
  r.groups = interact(f_ct.defined() ? tokenize(f_ct) : Tensor<S>(),
                      f_mri.defined() ? tokenize(f_mri) : Tensor<S>());
  r.rep = compose(r.groups);
  return r;
}

template <typename S>
Representation<S> MslModel<S>::represent(const Tensor<S>& ct_image, const Tensor<S>& mri_image) const {
  if (!ct_image.defined() && !mri_image.defined()) {
    throw std::invalid_argument("forward needs at least one of CT or MRI input");
  }
  return represent_features(ct_image.defined() ? encode(Modality::CT, ct_image) : Tensor<S>(),
                            mri_image.defined() ? encode(Modality::MRI, mri_image) : Tensor<S>());
}

template <typename S>
Tensor<S> MslModel<S>::forward(const Tensor<S>& ct_image, const Tensor<S>& mri_image,
                               const Tensor<S>& lambda) const {
  return decode(represent(ct_image, mri_image).rep, lambda);
}

#define MSL_INSTANTIATE_MODEL(S)                                                               \
  template struct Linear<S>;                                                                   \
  template struct Conv<S>;                                                                     \
  template struct LayerNorm<S>;                                                                \
  template Tensor<S> instance_norm(const Tensor<S>&);                                          \
  template Tensor<S> lambda_scalar<S>(Index, double);                                          \
  template void check_lambda(const Tensor<S>&);                                                \
  template std::pair<Tensor<S>, Tensor<S>> cin_affine(const Linear<S>&, const CinLayer<S>&,    \
                                                      const Tensor<S>&);                       \
  template Tensor<S> cin(const Tensor<S>&, const Linear<S>&, const CinLayer<S>&, const Tensor<S>&); \
  template class MslModel<S>;

MSL_INSTANTIATE_MODEL(float)
MSL_INSTANTIATE_MODEL(double)

#undef MSL_INSTANTIATE_MODEL

}  // namespace msl::model
