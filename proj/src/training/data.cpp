#include "msl/training/data.hpp"

#include "msl/core/mgt_io.hpp"
#include "msl/core/random.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace msl::training {

namespace {

struct Ellipse {
  double cx, cy, ax, ay, rot;

  bool contains(double x, double y) const {
    const double dx = x - cx, dy = y - cy;
    const double c = std::cos(rot), s = std::sin(rot);
    const double u = (dx * c + dy * s) / ax;
    const double v = (-dx * s + dy * c) / ay;
    return u * u + v * v <= 1.0;
  }
};

struct Region {
  Ellipse shape;
  double ct, mri;
};

}  // namespace

PhantomPair gen_phantom_pair(std::uint64_t seed, Index size) {
  if (size < 8) throw std::invalid_argument("phantom size must be at least 8");
  Rng rng(seed);
  const double half = static_cast<double>(size) / 2.0;

  const double cx = rng.uniform(-0.04, 0.04) * half, cy = rng.uniform(-0.04, 0.04) * half;
  const double rot = rng.uniform(-0.3, 0.3);
  const double ax = rng.uniform(0.78, 0.9) * half, ay = rng.uniform(0.68, 0.84) * half;
  const double ring = rng.uniform(0.07, 0.11) * half;
  const Ellipse head{cx, cy, ax, ay, rot};
  const Ellipse brain{cx, cy, ax - ring, ay - ring, rot};

  const double tissue_ct = rng.uniform(0.2, 0.3);
  const double tissue_mri = rng.uniform(0.45, 0.6);
  std::vector<Region> regions;
  const int inner = 3 + static_cast<int>(rng.below(3));
  for (int i = 0; i < inner; ++i) {
    const double r = std::sqrt(rng.uniform()) * 0.55;
    const double a = rng.uniform(0, 2 * std::numbers::pi);
    Ellipse e{cx + r * (ax - ring) * std::cos(a), cy + r * (ay - ring) * std::sin(a),
              rng.uniform(0.08, 0.3) * half, rng.uniform(0.06, 0.22) * half, rng.uniform(0, std::numbers::pi)};
    regions.push_back({e, tissue_ct + rng.uniform(-0.1, 0.15), rng.uniform(0.15, 0.85)});
  }
  if (rng.uniform() < 0.5) {
    const double r = std::sqrt(rng.uniform()) * 0.5;
    const double a = rng.uniform(0, 2 * std::numbers::pi);
    const double radius = rng.uniform(0.05, 0.12) * half;
    regions.push_back({{cx + r * (ax - ring) * std::cos(a), cy + r * (ay - ring) * std::sin(a), radius, radius, 0},
                       tissue_ct + 0.06, 0.95});
  }
  const double skull_ct = rng.uniform(0.85, 1.0);
  const double skull_mri = rng.uniform(0.08, 0.15);

  PhantomPair p;
  p.seed = seed;
  p.ct_gt = ImageF::Zero(size, size);
  p.mri_gt = ImageF::Zero(size, size);
  const int ss = 4;
  const double c0 = (static_cast<double>(size) - 1) / 2.0;
  for (Index i = 0; i < size; ++i)
    for (Index j = 0; j < size; ++j) {
      double ct = 0, mri = 0;
      for (int a = 0; a < ss; ++a)
        for (int b = 0; b < ss; ++b) {
          const double y = i - c0 + (a + 0.5) / ss - 0.5;
          const double x = j - c0 + (b + 0.5) / ss - 0.5;
          if (!head.contains(x, y)) continue;
          if (!brain.contains(x, y)) {
            ct += skull_ct;
            mri += skull_mri;
            continue;
          }
          double vc = tissue_ct, vm = tissue_mri;
          for (const Region& r : regions) {
            if (r.shape.contains(x, y)) {
              vc = r.ct;
              vm = r.mri;
            }
          }
          ct += vc;
          mri += vm;
        }
      p.ct_gt(i, j) = static_cast<float>(std::clamp(ct / (ss * ss), 0.0, 1.0));
      p.mri_gt(i, j) = static_cast<float>(std::clamp(mri / (ss * ss), 0.0, 1.0));
    }
  return p;
}

SensorData simulate_sensors(const PhantomPair& pair, const SensorConfig& config, std::uint64_t seed) {
  if (config.views < 1) throw std::invalid_argument("simulate_sensors: views must be >= 1");
  SensorData s;
  const auto angles = physics::uniform_angles(config.views);
  s.sinogram = physics::radon_forward<float>(pair.ct_gt, angles);
  const auto mask = physics::make_mask(pair.mri_gt.rows(), config.rate, config.center_fraction, seed);
  s.kspace = physics::apply_mask(physics::fft2(pair.mri_gt), mask);
  return s;
}

Case make_case(PhantomPair pair, SensorData sensors) {
  Case c;
  if (sensors.sinogram.values.size() > 0) c.ct_input = physics::fbp(sensors.sinogram);
  if (sensors.kspace.values.size() > 0) c.mri_input = physics::zero_filled_recon(sensors.kspace);
  c.pair = std::move(pair);
  c.sensors = std::move(sensors);
  return c;
}

Case synthesize_case(std::uint64_t seed, Index index, Index size, const SensorConfig& config) {
  const std::uint64_t pair_seed = mix_seed(seed, static_cast<std::uint64_t>(index));
  PhantomPair pair = gen_phantom_pair(pair_seed, size);
  SensorData sensors = simulate_sensors(pair, config, mix_seed(pair_seed, 1));
  return make_case(std::move(pair), std::move(sensors));
}

std::vector<Case> synthesize_cases(std::uint64_t seed, Index first, Index count, Index size,
                                   const SensorConfig& config) {
  std::vector<Case> out;
  for (Index i = first; i < first + count; ++i) out.push_back(synthesize_case(seed, i, size, config));
  return out;
}

namespace {

Tensor<float> image_tensor(const ImageF& img) {
  return Tensor<float>(Shape{img.rows(), img.cols()},
                       Eigen::Map<const Tensor<float>::Storage>(img.data(), img.size()));
}

ImageF tensor_image(const Tensor<float>& t, const std::filesystem::path& file) {
  if (t.ndim() != 2) throw std::runtime_error(file.string() + ": expected a 2-D image tensor");
  return Eigen::Map<const ImageF>(t.data(), t.dim(0), t.dim(1));
}

}  // namespace

void save_case(const std::filesystem::path& dir, const Case& c) {
  std::filesystem::create_directories(dir);
  if (c.pair.ct_gt.size() > 0) save_mgt(dir / "ct_gt.mgt", image_tensor(c.pair.ct_gt));
  if (c.pair.mri_gt.size() > 0) save_mgt(dir / "mri_gt.mgt", image_tensor(c.pair.mri_gt));
  if (c.has_ct()) {
    save_mgt(dir / "sinogram.mgt", physics::sinogram_to_tensor(c.sensors.sinogram));
    save_mgt(dir / "angles.mgt", physics::angles_to_tensor(c.sensors.sinogram));
  }
  if (c.has_mri()) {
    save_mgt(dir / "kspace.mgt", physics::kspace_to_tensor(c.sensors.kspace));
    save_mgt(dir / "mask.mgt", physics::mask_to_tensor(c.sensors.kspace.mask));
  }
}

Case load_case(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw std::runtime_error("case directory not found: " + dir.string());
  PhantomPair pair;
  if (std::filesystem::exists(dir / "ct_gt.mgt")) pair.ct_gt = tensor_image(load_mgt(dir / "ct_gt.mgt"), dir / "ct_gt.mgt");
  if (std::filesystem::exists(dir / "mri_gt.mgt")) pair.mri_gt = tensor_image(load_mgt(dir / "mri_gt.mgt"), dir / "mri_gt.mgt");
  SensorData s;
  const bool has_kspace = std::filesystem::exists(dir / "kspace.mgt");
  const bool has_sinogram = std::filesystem::exists(dir / "sinogram.mgt");
  if (!has_kspace && !has_sinogram) throw std::runtime_error("case has neither sinogram.mgt nor kspace.mgt: " + dir.string());
  if (has_kspace) s.kspace = physics::kspace_from_tensor(load_mgt(dir / "kspace.mgt"), load_mgt(dir / "mask.mgt"));
  if (has_sinogram) {
    const Tensor<float> values = load_mgt(dir / "sinogram.mgt");
    Index size = has_kspace ? s.kspace.values.rows() : std::max(pair.ct_gt.rows(), pair.mri_gt.rows());
    if (size == 0 && values.ndim() == 2) {
      // Largest image whose diagonal the detector row still covers.
      while (physics::min_detectors(size + 1) <= values.dim(1)) ++size;
    }
    s.sinogram = physics::sinogram_from_tensor(values, load_mgt(dir / "angles.mgt"), size);
  }
  return make_case(std::move(pair), std::move(s));
}

std::vector<std::filesystem::path> list_case_dirs(const std::filesystem::path& root) {
  std::vector<std::filesystem::path> out;
  if (!std::filesystem::is_directory(root)) throw std::runtime_error("data directory not found: " + root.string());
  for (const auto& e : std::filesystem::directory_iterator(root)) {
    if (e.is_directory() && (std::filesystem::exists(e.path() / "kspace.mgt") ||
                             std::filesystem::exists(e.path() / "sinogram.mgt"))) {
      out.push_back(e.path());
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace msl::training
