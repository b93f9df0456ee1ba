#pragma once

#include "msl/core/adam.hpp"
#include "msl/model/checkpoint.hpp"
#include "msl/model/model.hpp"
#include "msl/training/data.hpp"
#include "msl/training/losses.hpp"

#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace msl::training {

struct TrainConfig {
  model::ModelConfig model;
  int iterations = 2000;
  int batch_size = 4;
  double learning_rate = 2e-4;
  double lr_decay = 0.5;
  int lr_decay_period = 10000;
  double beta1 = 0.5;
  double beta2 = 0.99;
  double weight_decay = 1e-4;
  // Phantom synthesis and batch order; model.seed drives weight init.
  std::uint64_t data_seed = 0;
  int views = 64;
  double rate = 0.25;
  double center_fraction = 0.08;
  int train_pairs = 8;
  int heldout_pairs = 2;
  LossWeights weights;
  int checkpoint_every = 500;
  int keep_checkpoints = 3;
  // Directory written by gen-data; empty means synthesize from data_seed.
  std::string data_dir;

  SensorConfig sensors() const { return {views, rate, center_fraction}; }
  void validate() const;
  // "key = value" lines; model keys share the same file.
  std::string to_text() const;
  static TrainConfig from_text(const std::string& text);
  static TrainConfig load(const std::filesystem::path& path);
};

double scheduled_lr(const TrainConfig& config, std::int64_t iteration);

// Distinct case indices for one iteration, derived from (seed, iteration) only.
std::vector<Index> batch_indices(std::uint64_t seed, std::int64_t iteration, Index dataset_size,
                                 int batch_size);
// Modality kept by the auxiliary single-modality pass: MRI on even iterations, CT on odd.
model::Modality aux_modality(std::int64_t iteration);

template <typename S>
struct Batch {
  Tensor<S> ct_input, mri_input, ct_gt, mri_gt;  // [N, 1, H, W]
};

template <typename S>
Batch<S> make_batch(std::span<const Case> cases, std::span<const Index> indices);

template <typename S>
struct StepOutputs {
  LossTerms<S> terms;
  Tensor<S> total;
};

// Full pass (lambda 0, 1, 0.5), auxiliary pass keeping `aux` only, and the weighted objective.
template <typename S>
StepOutputs<S> compute_losses(const model::MslModel<S>& model, const Batch<S>& batch,
                              model::Modality aux, const LossWeights& weights);

struct LossRecord {
  std::int64_t iteration = 0;
  double rec = 0, fusion = 0, aux = 0, aux_feat = 0, total = 0, lr = 0;
};

inline constexpr const char* kCurveHeader = "iteration,loss_rec,loss_fusion,loss_aux,loss_aux_feat,total,lr";
std::string curve_line(const LossRecord& r);

class Trainer {
 public:
  Trainer(TrainConfig config, std::vector<Case> cases);
  // Restores weights, optimizer moments and the iteration counter.
  Trainer(const model::Checkpoint& checkpoint, std::vector<Case> cases);

  const TrainConfig& config() const { return config_; }
  const model::MslModel<float>& model() const { return model_; }
  const AdamState<float>& optimizer() const { return adam_; }
  std::int64_t iteration() const { return iteration_; }
  std::span<const Case> cases() const { return cases_; }

  // One optimization step; throws NonFiniteError on a non-finite loss.
  LossRecord step();
  model::Checkpoint checkpoint() const;

 private:
  TrainConfig config_;
  std::vector<Case> cases_;
  model::MslModel<float> model_;
  AdamState<float> adam_;
  std::int64_t iteration_ = 0;
};

// Training cases named by the config: loaded from data_dir/train or synthesized.
std::vector<Case> training_cases(const TrainConfig& config);
std::vector<Case> heldout_cases(const TrainConfig& config);

struct TrainResult {
  std::filesystem::path final_checkpoint;
  std::vector<LossRecord> curve;
};

// Runs until config.iterations into out_dir: ckpt_<iter>.mslc every checkpoint_every
// iterations (newest keep_checkpoints retained), model.mslc and curve.csv.
TrainResult train(Trainer& trainer, const std::filesystem::path& out_dir,
                  const std::function<void(const LossRecord&)>& on_step = {});

}  // namespace msl::training
