#include "msl/training/trainer.hpp"

#include "msl/core/mgt_io.hpp"
#include "msl/core/random.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace msl::training {

using model::Modality;

namespace {

template <typename T>
void parse_value(const std::string& key, const std::string& text, T& out) {
  std::istringstream in(text);
  T v{};
  std::string rest;
  if (!(in >> v) || (in >> rest)) throw std::invalid_argument("train config: bad value for '" + key + "'");
  out = v;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

void TrainConfig::validate() const {
  model.validate();
  auto require = [](bool ok, const char* what) {
    if (!ok) throw std::invalid_argument(std::string("train config: ") + what);
  };
  require(iterations >= 0, "iterations must be >= 0");
  require(batch_size >= 1, "batch_size must be >= 1");
  require(learning_rate >= 0, "learning_rate must be >= 0");
  require(lr_decay > 0 && lr_decay <= 1, "lr_decay must be in (0, 1]");
  require(lr_decay_period >= 1, "lr_decay_period must be >= 1");
  require(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1, "betas must be in [0, 1)");
  require(weight_decay >= 0, "weight_decay must be >= 0");
  require(views >= 1, "views must be >= 1");
  require(rate > 0 && rate <= 1, "rate must be in (0, 1]");
  require(train_pairs >= 1, "train_pairs must be >= 1");
  require(heldout_pairs >= 0, "heldout_pairs must be >= 0");
  require(batch_size <= train_pairs, "batch_size exceeds train_pairs");
  require(weights.fusion >= 0 && weights.aux >= 0 && weights.aux_feat >= 0, "loss weights must be >= 0");
  require(checkpoint_every >= 0, "checkpoint_every must be >= 0");
  require(keep_checkpoints >= 1, "keep_checkpoints must be >= 1");
}

std::string TrainConfig::to_text() const {
  std::ostringstream out;
  out.precision(17);
  out << model.to_text() << "iterations = " << iterations << "\n"
      << "batch_size = " << batch_size << "\n"
      << "learning_rate = " << learning_rate << "\n"
      << "lr_decay = " << lr_decay << "\n"
      << "lr_decay_period = " << lr_decay_period << "\n"
      << "beta1 = " << beta1 << "\n"
      << "beta2 = " << beta2 << "\n"
      << "weight_decay = " << weight_decay << "\n"
      << "data_seed = " << data_seed << "\n"
      << "views = " << views << "\n"
      << "rate = " << rate << "\n"
      << "center_fraction = " << center_fraction << "\n"
      << "train_pairs = " << train_pairs << "\n"
      << "heldout_pairs = " << heldout_pairs << "\n"
      << "phi_f = " << weights.fusion << "\n"
      << "phi_a = " << weights.aux << "\n"
      << "phi_e = " << weights.aux_feat << "\n"
      << "checkpoint_every = " << checkpoint_every << "\n"
      << "keep_checkpoints = " << keep_checkpoints << "\n"
      << "data_dir = " << data_dir << "\n";
  return out.str();
}

TrainConfig TrainConfig::from_text(const std::string& text) {
  TrainConfig c;
  std::string model_text;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    const std::string raw = line;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      if (!trim(line).empty()) throw std::invalid_argument("train config: malformed line '" + raw + "'");
      continue;
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key == "iterations") parse_value(key, value, c.iterations);
    else if (key == "batch_size") parse_value(key, value, c.batch_size);
    else if (key == "learning_rate") parse_value(key, value, c.learning_rate);
    else if (key == "lr_decay") parse_value(key, value, c.lr_decay);
    else if (key == "lr_decay_period") parse_value(key, value, c.lr_decay_period);
    else if (key == "beta1") parse_value(key, value, c.beta1);
    else if (key == "beta2") parse_value(key, value, c.beta2);
    else if (key == "weight_decay") parse_value(key, value, c.weight_decay);
    else if (key == "data_seed") parse_value(key, value, c.data_seed);
    else if (key == "views") parse_value(key, value, c.views);
    else if (key == "rate") parse_value(key, value, c.rate);
    else if (key == "center_fraction") parse_value(key, value, c.center_fraction);
    else if (key == "train_pairs") parse_value(key, value, c.train_pairs);
    else if (key == "heldout_pairs") parse_value(key, value, c.heldout_pairs);
    else if (key == "phi_f") parse_value(key, value, c.weights.fusion);
    else if (key == "phi_a") parse_value(key, value, c.weights.aux);
    else if (key == "phi_e") parse_value(key, value, c.weights.aux_feat);
    else if (key == "checkpoint_every") parse_value(key, value, c.checkpoint_every);
    else if (key == "keep_checkpoints") parse_value(key, value, c.keep_checkpoints);
    else if (key == "data_dir") c.data_dir = value;
    else model_text += key + " = " + value + "\n";
  }
  c.model = model::ModelConfig::from_text(model_text);
  c.validate();
  return c;
}

TrainConfig TrainConfig::load(const std::filesystem::path& path) {
  return from_text(read_file(path));
}

double scheduled_lr(const TrainConfig& config, std::int64_t iteration) {
  return config.learning_rate * std::pow(config.lr_decay, static_cast<double>(iteration / config.lr_decay_period));
}

std::vector<Index> batch_indices(std::uint64_t seed, std::int64_t iteration, Index dataset_size,
                                 int batch_size) {
  if (batch_size > dataset_size) throw std::invalid_argument("batch size exceeds dataset size");
  std::vector<Index> order(static_cast<std::size_t>(dataset_size));
  std::iota(order.begin(), order.end(), Index{0});
  Rng rng(mix_seed(mix_seed(seed, 0x7261696eull), static_cast<std::uint64_t>(iteration)));
  for (int i = 0; i < batch_size; ++i) {
    const auto j = i + static_cast<Index>(rng.below(static_cast<std::uint64_t>(dataset_size - i)));
    std::swap(order[i], order[j]);
  }
  order.resize(static_cast<std::size_t>(batch_size));
  return order;
}

Modality aux_modality(std::int64_t iteration) {
  return iteration % 2 == 0 ? Modality::MRI : Modality::CT;
}

template <typename S>
Batch<S> make_batch(std::span<const Case> cases, std::span<const Index> indices) {
  if (indices.empty()) throw std::invalid_argument("make_batch: empty batch");
  const Index n = static_cast<Index>(indices.size());
  const Index h = cases[indices[0]].ct_input.rows(), w = cases[indices[0]].ct_input.cols();
  auto stack = [&](auto pick) {
    typename Tensor<S>::Storage v(n * h * w);
    for (Index i = 0; i < n; ++i) {
      const ImageF& img = pick(cases[indices[i]]);
      if (img.rows() != h || img.cols() != w) throw ShapeError("make_batch: cases differ in size");
      v.segment(i * h * w, h * w) = Eigen::Map<const Eigen::ArrayXf>(img.data(), h * w).template cast<S>();
    }
    return Tensor<S>(Shape{n, 1, h, w}, std::move(v));
  };
  Batch<S> b;
  b.ct_input = stack([](const Case& c) -> const ImageF& { return c.ct_input; });
  b.mri_input = stack([](const Case& c) -> const ImageF& { return c.mri_input; });
  b.ct_gt = stack([](const Case& c) -> const ImageF& { return c.pair.ct_gt; });
  b.mri_gt = stack([](const Case& c) -> const ImageF& { return c.pair.mri_gt; });
  return b;
}

template <typename S>
StepOutputs<S> compute_losses(const model::MslModel<S>& model, const Batch<S>& batch, Modality aux,
                              const LossWeights& weights) {
  const Index n = batch.ct_input.dim(0);
  const Tensor<S> f_ct = model.encode(Modality::CT, batch.ct_input);
  const Tensor<S> f_mri = model.encode(Modality::MRI, batch.mri_input);
  const auto full = model.represent_features(f_ct, f_mri);
  const auto l0 = model::lambda_scalar<S>(n, 0.0);
  const auto l1 = model::lambda_scalar<S>(n, 1.0);
  const auto lmid = model::lambda_scalar<S>(n, 0.5);
  const Tensor<S> x_ct = model.decode(full.rep, l0);
  const Tensor<S> x_mri = model.decode(full.rep, l1);
  const Tensor<S> x_mid = model.decode(full.rep, lmid);

  const auto single = aux == Modality::CT ? model.represent_features(f_ct, Tensor<S>())
                                          : model.represent_features(Tensor<S>(), f_mri);
  const Tensor<S> aux_ct = model.decode(single.rep, l0);
  const Tensor<S> aux_mri = model.decode(single.rep, l1);

  StepOutputs<S> out;
  out.terms.rec = loss_rec(x_ct, x_mri, batch.ct_gt, batch.mri_gt);
  out.terms.fusion = loss_fusion(x_ct, x_mri, x_mid);
  out.terms.aux = loss_aux(aux_ct, aux_mri, batch.ct_gt, batch.mri_gt);
  out.terms.aux_feat = loss_aux_feat(full.groups);
  out.total = total_loss(out.terms, weights);
  return out;
}

std::string curve_line(const LossRecord& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%lld,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g", static_cast<long long>(r.iteration), r.rec,
                r.fusion, r.aux, r.aux_feat, r.total, r.lr);
  return buf;
}

Trainer::Trainer(TrainConfig config, std::vector<Case> cases)
    : config_(std::move(config)), cases_(std::move(cases)), model_(config_.model) {
  config_.validate();
  if (static_cast<Index>(cases_.size()) < config_.batch_size) {
    throw std::invalid_argument("trainer: fewer cases than batch_size");
  }
  adam_.learning_rate = config_.learning_rate;
  adam_.beta1 = config_.beta1;
  adam_.beta2 = config_.beta2;
  adam_.weight_decay = config_.weight_decay;
}

namespace {

constexpr const char* kTrainConfigKey = "train_config";
constexpr const char* kIterationKey = "iteration";
constexpr const char* kAdamStepKey = "adam_step";

const std::string& require_meta(const model::Checkpoint& c, const std::string& key) {
  auto it = c.metadata.find(key);
  if (it == c.metadata.end()) throw std::runtime_error("checkpoint has no '" + key + "' record; not a training checkpoint");
  return it->second;
}

}  // namespace

Trainer::Trainer(const model::Checkpoint& checkpoint, std::vector<Case> cases)
    : Trainer(TrainConfig::from_text(require_meta(checkpoint, kTrainConfigKey)), std::move(cases)) {
  model_ = model::model_from_checkpoint(checkpoint);
  iteration_ = std::stoll(require_meta(checkpoint, kIterationKey));
  adam_.step = std::stoll(require_meta(checkpoint, kAdamStepKey));
  if (adam_.step > 0) {
    for (const auto& p : model_.parameters()) {
      const Tensor<float>* m = checkpoint.find("adam.m:" + p.name);
      const Tensor<float>* v = checkpoint.find("adam.v:" + p.name);
      if (!m || !v) throw std::runtime_error("checkpoint lacks optimizer state for " + p.name);
      adam_.first_moment.push_back(m->values());
      adam_.second_moment.push_back(v->values());
    }
  }
}

LossRecord Trainer::step() {
  const auto idx = batch_indices(config_.data_seed, iteration_, static_cast<Index>(cases_.size()), config_.batch_size);
  const auto batch = make_batch<float>(cases_, idx);
  auto params = model_.parameter_tensors();
  for (auto& p : params) p.zero_grad();

  const auto out = compute_losses(model_, batch, aux_modality(iteration_), config_.weights);
  LossRecord r;
  r.iteration = iteration_;
  r.rec = out.terms.rec.item();
  r.fusion = out.terms.fusion.item();
  r.aux = out.terms.aux.item();
  r.aux_feat = out.terms.aux_feat.item();
  r.total = out.total.item();
  r.lr = scheduled_lr(config_, iteration_);
  if (!std::isfinite(r.total)) {
    throw NonFiniteError("non-finite loss at iteration " + std::to_string(iteration_) + ": " + curve_line(r));
  }
  out.total.backward();
  adam_.learning_rate = r.lr;
  adam_step<float>(params, adam_);
  ++iteration_;
  return r;
}

model::Checkpoint Trainer::checkpoint() const {
  model::Checkpoint c = model::make_checkpoint(model_);
  c.metadata[kTrainConfigKey] = config_.to_text();
  c.metadata[kIterationKey] = std::to_string(iteration_);
  c.metadata[kAdamStepKey] = std::to_string(adam_.step);
  if (adam_.step > 0) {
    const auto& params = model_.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) {
      c.tensors.push_back({"adam.m:" + params[i].name, Tensor<float>(params[i].tensor.shape(), adam_.first_moment[i])});
      c.tensors.push_back({"adam.v:" + params[i].name, Tensor<float>(params[i].tensor.shape(), adam_.second_moment[i])});
    }
  }
  return c;
}

namespace {

std::vector<Case> load_split(const TrainConfig& config, const char* split, Index first, int count) {
  if (config.data_dir.empty()) {
    return synthesize_cases(config.data_seed, first, count, config.model.image_size, config.sensors());
  }
  const auto dirs = list_case_dirs(std::filesystem::path(config.data_dir) / split);
  if (static_cast<int>(dirs.size()) < count) {
    throw std::runtime_error(std::string("data directory has ") + std::to_string(dirs.size()) + " " + split +
                             " cases, config asks for " + std::to_string(count));
  }
  std::vector<Case> out;
  for (int i = 0; i < count; ++i) out.push_back(load_case(dirs[static_cast<std::size_t>(i)]));
  return out;
}

}  // namespace

std::vector<Case> training_cases(const TrainConfig& config) {
  return load_split(config, "train", 0, config.train_pairs);
}

std::vector<Case> heldout_cases(const TrainConfig& config) {
  return load_split(config, "test", config.train_pairs, config.heldout_pairs);
}

TrainResult train(Trainer& trainer, const std::filesystem::path& out_dir,
                  const std::function<void(const LossRecord&)>& on_step) {
  const TrainConfig& cfg = trainer.config();
  std::filesystem::create_directories(out_dir);
  const auto curve_path = out_dir / "curve.csv";
  const bool fresh = trainer.iteration() == 0 || !std::filesystem::exists(curve_path);
  std::ofstream curve(curve_path, fresh ? std::ios::trunc : std::ios::app);
  if (!curve) throw std::runtime_error("cannot write " + curve_path.string());
  if (fresh) curve << kCurveHeader << "\n";

  TrainResult result;
  std::vector<std::filesystem::path> kept;
  while (trainer.iteration() < cfg.iterations) {
    const LossRecord r = trainer.step();
    curve << curve_line(r) << "\n";
    result.curve.push_back(r);
    if (on_step) on_step(r);
    if (cfg.checkpoint_every > 0 && trainer.iteration() % cfg.checkpoint_every == 0) {
      char name[32];
      std::snprintf(name, sizeof name, "ckpt_%06lld.mslc", static_cast<long long>(trainer.iteration()));
      curve.flush();
      model::save_checkpoint(out_dir / name, trainer.checkpoint());
      kept.push_back(out_dir / name);
      while (static_cast<int>(kept.size()) > cfg.keep_checkpoints) {
        std::filesystem::remove(kept.front());
        kept.erase(kept.begin());
      }
    }
  }
  curve.flush();
  result.final_checkpoint = out_dir / "model.mslc";
  model::save_checkpoint(result.final_checkpoint, trainer.checkpoint());
  return result;
}

template Batch<float> make_batch<float>(std::span<const Case>, std::span<const Index>);
template Batch<double> make_batch<double>(std::span<const Case>, std::span<const Index>);
template StepOutputs<float> compute_losses(const model::MslModel<float>&, const Batch<float>&, Modality,
                                           const LossWeights&);
template StepOutputs<double> compute_losses(const model::MslModel<double>&, const Batch<double>&, Modality,
                                            const LossWeights&);

}  // namespace msl::training
