#pragma once

#include "msl/physics/physics.hpp"

#include <cstdint>
#include <filesystem>
#include <vector>

namespace msl::training {

using physics::ImageF;

// CT and MRI renderings of one ellipse-composite anatomy.
struct PhantomPair {
  ImageF ct_gt;
  ImageF mri_gt;
  std::uint64_t seed = 0;
};

// Skull ring, soft-tissue interior, internal ellipses and an optional lesion.
// CT weights the ring bright and tissue faint; MRI inverts that emphasis and
// brightens the lesion. Both share the same support and lie in [0, 1].
PhantomPair gen_phantom_pair(std::uint64_t seed, Index size = 64);

struct SensorConfig {
  int views = 64;
  double rate = 0.25;
  double center_fraction = 0.08;
};

struct SensorData {
  physics::Sinogram<float> sinogram;
  physics::KSpace<float> kspace;  // masked
};

SensorData simulate_sensors(const PhantomPair& pair, const SensorConfig& config, std::uint64_t seed);

// A training/evaluation sample: ground truth, sensory data and the analytic
// back-transforms fed to the encoders.
struct Case {
  PhantomPair pair;
  SensorData sensors;
  ImageF ct_input;   // FBP of the sinogram
  ImageF mri_input;  // zero-filled reconstruction of the k-space

  bool has_ct() const { return ct_input.size() > 0; }
  bool has_mri() const { return mri_input.size() > 0; }
  bool has_ground_truth() const { return pair.ct_gt.size() > 0 && pair.mri_gt.size() > 0; }
};

// Back-transforms whichever sensory data is present.
Case make_case(PhantomPair pair, SensorData sensors);
// Pair i of a dataset uses seed mix_seed(seed, i); its mask seed is derived from the pair seed.
Case synthesize_case(std::uint64_t seed, Index index, Index size, const SensorConfig& config);
std::vector<Case> synthesize_cases(std::uint64_t seed, Index first, Index count, Index size,
                                   const SensorConfig& config);

// Case directory: ct_gt.mgt, mri_gt.mgt, sinogram.mgt + angles.mgt, kspace.mgt + mask.mgt.
// Either modality and the ground truth may be absent. A CT-only case without
// ground truth takes the largest image size its detector row covers.
void save_case(const std::filesystem::path& dir, const Case& c);
Case load_case(const std::filesystem::path& dir);
// Sorted subdirectories of `root` holding a case.
std::vector<std::filesystem::path> list_case_dirs(const std::filesystem::path& root);

}  // namespace msl::training
