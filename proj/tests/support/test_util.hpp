#pragma once

#include "msl/core/ops.hpp"
#include "msl/core/random.hpp"
#include "msl/model/model.hpp"

#include <unistd.h>

#include <filesystem>
#include <string>

namespace msl::testing {

template <typename S>
Tensor<S> random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Rng rng(seed);
  typename Tensor<S>::Storage v(numel(shape));
  for (Index i = 0; i < v.size(); ++i) v[i] = static_cast<S>(rng.uniform(lo, hi));
  return Tensor<S>(std::move(shape), std::move(v));
}

// Random values bounded away from zero (keeps relu/abs kinks out of finite differences).
template <typename S>
Tensor<S> random_off_zero(Shape shape, std::uint64_t seed, double margin = 0.05) {
  Rng rng(seed);
  typename Tensor<S>::Storage v(numel(shape));
  for (Index i = 0; i < v.size(); ++i) {
    const double mag = rng.uniform(margin, 1.0);
    v[i] = static_cast<S>(rng.uniform() < 0.5 ? -mag : mag);
  }
  return Tensor<S>(std::move(shape), std::move(v));
}

// Scalarizes an arbitrary tensor with fixed random weights so every output
// coordinate contributes to the checked gradient.
template <typename S>
Tensor<S> weighted_sum(const Tensor<S>& y, std::uint64_t seed) {
  return reduce_sum(mul(y, random_tensor<S>(y.shape(), seed)));
}

// Small enough for finite differences over the whole model.
inline model::ModelConfig tiny_config() {
  model::ModelConfig c;
  c.image_size = 16;
  c.width = 0.0625;  // channels 4, 8, 16, 32
  c.model_dim = 8;
  c.heads = 2;
  c.embed_dim = 4;
  c.encoder_res_blocks = 1;
  c.decoder_res_blocks = 1;
  c.seed = 3;
  return c;
}

// Randomizes every parameter so identity-initialized pieces (CIN heads, norms)
// do not hide mistakes.
template <typename S>
void scramble(model::MslModel<S>& m, std::uint64_t seed, double amplitude = 0.3) {
  std::vector<model::NamedParam<S>> values;
  for (const auto& p : m.parameters()) {
    Tensor<double> r = random_tensor<double>(p.tensor.shape(), seed++, -amplitude, amplitude);
    values.push_back({p.name, add(p.tensor, r.template cast<S>()).detach()});
  }
  m.load_values(values);
}

}  // namespace msl::testing

namespace msl::testing {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::uint64_t counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("msl_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace msl::testing
