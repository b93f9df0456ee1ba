#include <doctest.h>

#include "msl/core/mgt_io.hpp"
#include "msl/training/trainer.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

using namespace msl;
using namespace msl::training;
using msl::model::Group;
using msl::model::Modality;
using msl::testing::random_tensor;
using msl::testing::tiny_config;
using TF = Tensor<float>;
using TD = Tensor<double>;

namespace {

TrainConfig tiny_train_config() {
  TrainConfig c;
  c.model = tiny_config();
  c.iterations = 4;
  c.batch_size = 2;
  c.train_pairs = 4;
  c.heldout_pairs = 1;
  c.views = 24;
  c.learning_rate = 1e-3;
  c.checkpoint_every = 0;
  return c;
}

std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("msl_training_" + name);
  std::filesystem::remove_all(dir);
  return dir;
}

bool same_parameters(const model::MslModel<float>& a, const model::MslModel<float>& b) {
  const auto& pa = a.parameters();
  const auto& pb = b.parameters();
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    if (pa[i].name != pb[i].name || !(pa[i].tensor.values() == pb[i].tensor.values()).all()) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("phantom pairs are seeded, aligned and bounded") {
  const auto a = gen_phantom_pair(11);
  const auto b = gen_phantom_pair(11);
  CHECK((a.ct_gt == b.ct_gt).all());
  CHECK((a.mri_gt == b.mri_gt).all());
  CHECK_FALSE((gen_phantom_pair(12).ct_gt == a.ct_gt).all());

  CHECK(a.ct_gt.minCoeff() >= 0.0f);
  CHECK(a.ct_gt.maxCoeff() <= 1.0f);
  CHECK(a.mri_gt.minCoeff() >= 0.0f);
  CHECK(a.mri_gt.maxCoeff() <= 1.0f);
  CHECK(((a.ct_gt > 0) == (a.mri_gt > 0)).all());
  CHECK((a.ct_gt > 0).count() > 64 * 64 / 3);
}

TEST_CASE("ct and mri renderings are correlated but distinct") {
  double lo = 1, hi = -1;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto p = gen_phantom_pair(seed);
    const Eigen::ArrayXd x = Eigen::Map<const Eigen::ArrayXf>(p.ct_gt.data(), p.ct_gt.size()).cast<double>();
    const Eigen::ArrayXd y = Eigen::Map<const Eigen::ArrayXf>(p.mri_gt.data(), p.mri_gt.size()).cast<double>();
    const Eigen::ArrayXd dx = x - x.mean(), dy = y - y.mean();
    const double r = (dx * dy).sum() / std::sqrt((dx * dx).sum() * (dy * dy).sum());
    lo = std::min(lo, r);
    hi = std::max(hi, r);
  }
  CHECK(lo > 0.0);
  CHECK(hi < 1.0);
}

TEST_CASE("default sampling configuration") {
  const auto pair = gen_phantom_pair(5);
  const auto s = simulate_sensors(pair, {64, 0.25, 0.08}, 9);
  CHECK(s.sinogram.views() == 64);
  CHECK(s.sinogram.detectors() == physics::min_detectors(64));
  CHECK(s.kspace.mask.kept() == 16);
  const auto again = simulate_sensors(pair, {64, 0.25, 0.08}, 9);
  CHECK((again.sinogram.values == s.sinogram.values).all());
  CHECK((again.kspace.values == s.kspace.values).all());
  CHECK_THROWS_AS(simulate_sensors(pair, {0, 0.25, 0.08}, 9), std::invalid_argument);
  CHECK_THROWS(simulate_sensors(pair, {64, 0.0, 0.08}, 9));
}

TEST_CASE("dense sampling is near lossless") {
  const auto pair = gen_phantom_pair(5);
  const auto c = make_case(pair, simulate_sensors(pair, {360, 1.0, 0.08}, 1));
  CHECK((c.mri_input - pair.mri_gt).abs().maxCoeff() < 1e-5);
  const auto sparse = make_case(pair, simulate_sensors(pair, {64, 1.0, 0.08}, 1));
  const double dense_err = (c.ct_input - pair.ct_gt).abs().mean();
  CHECK(dense_err < 0.03);
  CHECK(dense_err < (sparse.ct_input - pair.ct_gt).abs().mean());
}

TEST_CASE("case directories round-trip") {
  const auto dir = scratch_dir("case");
  const auto c = synthesize_case(3, 2, 32, {16, 0.25, 0.08});
  save_case(dir / "pair_0000", c);
  const auto back = load_case(dir / "pair_0000");
  CHECK((back.pair.ct_gt == c.pair.ct_gt).all());
  CHECK((back.pair.mri_gt == c.pair.mri_gt).all());
  CHECK((back.ct_input == c.ct_input).all());
  CHECK((back.mri_input == c.mri_input).all());
  CHECK(back.sensors.sinogram.angles_deg == c.sensors.sinogram.angles_deg);
  CHECK(back.sensors.kspace.mask.keep == c.sensors.kspace.mask.keep);
  CHECK(list_case_dirs(dir).size() == 1);
  CHECK_THROWS(load_case(dir / "missing"));
  std::filesystem::remove_all(dir);
}

TEST_CASE("reconstruction and auxiliary losses") {
  const TD gt_ct = random_tensor<double>({1, 1, 8, 8}, 1, 0, 1);
  const TD gt_mri = random_tensor<double>({1, 1, 8, 8}, 2, 0, 1);
  CHECK(loss_rec(gt_ct, gt_mri, gt_ct, gt_mri).item() == 0.0);
  CHECK(loss_aux(gt_ct, gt_mri, gt_ct, gt_mri).item() == 0.0);
  CHECK(loss_rec(add_scalar(gt_ct, 0.3), gt_mri, gt_ct, gt_mri).item() == doctest::Approx(0.3).epsilon(1e-12));

  for (std::uint64_t seed = 10; seed < 15; ++seed) {
    const TD x_ct = random_tensor<double>({1, 1, 8, 8}, seed);
    const TD x_mri = random_tensor<double>({1, 1, 8, 8}, seed + 100);
    const double expect = oracle::mae(x_ct, gt_ct) + oracle::mae(x_mri, gt_mri);
    CHECK(std::fabs(loss_rec(x_ct, x_mri, gt_ct, gt_mri).item() - expect) < 1e-6);
    CHECK(loss_aux(x_ct, x_mri, gt_ct, gt_mri).item() == loss_rec(x_ct, x_mri, gt_ct, gt_mri).item());
  }
}

TEST_CASE("fusion loss") {
  const TD x = random_tensor<double>({1, 1, 8, 8}, 3);
  CHECK(loss_fusion(x, x, x).item() == 0.0);

  const double a = 0.2, b = 0.9, m = (a + b) / 2;
  const TD ca({1, 1, 8, 8}, a), cb({1, 1, 8, 8}, b), cm({1, 1, 8, 8}, m);
  CHECK(loss_fusion(ca, cb, cm).item() == doctest::Approx(0.5 * ((a - m) * (a - m) + (b - m) * (b - m))));

  for (std::uint64_t seed = 20; seed < 25; ++seed) {
    const TD p = random_tensor<double>({1, 1, 8, 8}, seed);
    const TD q = random_tensor<double>({1, 1, 8, 8}, seed + 1);
    const TD r = random_tensor<double>({1, 1, 8, 8}, seed + 2);
    CHECK(std::fabs(loss_fusion(p, q, r).item() - 0.5 * (oracle::mse(p, r) + oracle::mse(q, r))) < 1e-6);
  }
}

TEST_CASE("auxiliary feature loss") {
  model::TokenGroups<double> g;
  g[Group::IntraCT] = random_tensor<double>({2, 4, 8}, 1);
  g[Group::InterMRI2CT] = g[Group::IntraCT];
  g[Group::IntraMRI] = random_tensor<double>({2, 4, 8}, 2);
  g[Group::InterCT2MRI] = g[Group::IntraMRI];
  CHECK(loss_aux_feat(g).item() == 0.0);

  g[Group::InterCT2MRI] = add_scalar(g[Group::IntraMRI], -0.25);
  CHECK(loss_aux_feat(g).item() == doctest::Approx(0.25).epsilon(1e-12));

  g[Group::InterMRI2CT] = random_tensor<double>({2, 4, 8}, 3);
  g[Group::InterCT2MRI] = random_tensor<double>({2, 4, 8}, 4);
  const double expect = oracle::mae(g[Group::IntraCT], g[Group::InterMRI2CT]) +
                        oracle::mae(g[Group::IntraMRI], g[Group::InterCT2MRI]);
  CHECK(std::fabs(loss_aux_feat(g).item() - expect) < 1e-6);

  g[Group::IntraCT] = TD();
  CHECK_THROWS_AS(loss_aux_feat(g), std::invalid_argument);
}

TEST_CASE("total loss weighting") {
  auto parts = [](double r, double f, double a, double e) {
    return LossTerms<double>{TD::scalar(r), TD::scalar(f), TD::scalar(a), TD::scalar(e)};
  };
  const LossWeights w;
  CHECK(total_loss(parts(0, 0, 0, 0), w).item() == 0.0);
  // L_rec + 1.0 + 1.0 + 0.5
  CHECK(total_loss(parts(1, 1, 1, 1), w).item() == doctest::Approx(3.5));
  const double base = total_loss(parts(0.3, 0.4, 0.5, 0.6), w).item();
  CHECK(total_loss(parts(1.3, 0.4, 0.5, 0.6), w).item() - base == doctest::Approx(1.0));
  CHECK(total_loss(parts(0.3, 1.4, 0.5, 0.6), w).item() - base == doctest::Approx(w.fusion));
  CHECK(total_loss(parts(0.3, 0.4, 1.5, 0.6), w).item() - base == doctest::Approx(w.aux));
  CHECK(total_loss(parts(0.3, 0.4, 0.5, 1.6), w).item() - base == doctest::Approx(w.aux_feat));
}

TEST_CASE("learning rate schedule") {
  TrainConfig c;
  CHECK(scheduled_lr(c, 0) == 2e-4);
  CHECK(scheduled_lr(c, 9999) == 2e-4);
  CHECK(scheduled_lr(c, 10000) == doctest::Approx(1e-4).epsilon(1e-15));
  CHECK(scheduled_lr(c, 25000) == doctest::Approx(5e-5).epsilon(1e-15));
}

TEST_CASE("batches and auxiliary alternation") {
  for (int it = 0; it < 20; ++it) {
    const auto idx = batch_indices(0, it, 8, 4);
    CHECK(std::set<Index>(idx.begin(), idx.end()).size() == 4);
    for (Index i : idx) CHECK((i >= 0 && i < 8));
    CHECK(idx == batch_indices(0, it, 8, 4));
  }
  CHECK(batch_indices(0, 0, 8, 4) != batch_indices(0, 1, 8, 4));
  CHECK_THROWS(batch_indices(0, 0, 3, 4));
  CHECK(aux_modality(0) == Modality::MRI);
  CHECK(aux_modality(1) == Modality::CT);
  CHECK(aux_modality(10000) == Modality::MRI);
}

TEST_CASE("train config text") {
  TrainConfig c = tiny_train_config();
  c.data_dir = "/tmp/some data";
  c.weights.aux_feat = 0.25;
  const auto back = TrainConfig::from_text(c.to_text());
  CHECK(back.to_text() == c.to_text());
  CHECK(back.model == c.model);

  const auto partial = TrainConfig::from_text("iterations = 7  # short\nwidth = 0.5\n\n");
  CHECK(partial.iterations == 7);
  CHECK(partial.model.width == 0.5);
  CHECK(partial.learning_rate == 2e-4);
  CHECK_THROWS_AS(TrainConfig::from_text("bogus = 1\n"), std::invalid_argument);
  CHECK_THROWS_AS(TrainConfig::from_text("iterations = many\n"), std::invalid_argument);
  CHECK_THROWS_AS(TrainConfig::from_text("batch_size = 9\n"), std::invalid_argument);
}

TEST_CASE("train step reports a finite nonnegative breakdown") {
  const auto cfg = tiny_train_config();
  Trainer t(cfg, training_cases(cfg));
  for (int i = 0; i < 2; ++i) {
    const auto r = t.step();
    for (double v : {r.rec, r.fusion, r.aux, r.aux_feat, r.total}) {
      CHECK(std::isfinite(v));
      CHECK(v >= 0.0);
    }
    CHECK(r.total == doctest::Approx(r.rec + r.fusion + r.aux + 0.5 * r.aux_feat).epsilon(1e-5));
  }
  CHECK(t.iteration() == 2);
}

TEST_CASE("zero learning rate leaves weights unchanged") {
  auto cfg = tiny_train_config();
  cfg.learning_rate = 0.0;
  Trainer t(cfg, training_cases(cfg));
  const model::MslModel<float> before = t.model().cast<float>();
  t.step();
  t.step();
  CHECK(same_parameters(before, t.model()));
}

TEST_CASE("total loss gradient on an encoder weight") {
  const auto cfg = tiny_train_config();
  const auto cases = training_cases(cfg);
  const std::vector<Index> idx{0, 1};
  const auto batch = make_batch<double>(cases, idx);
  model::MslModel<double> m(cfg.model);

  for (const char* name : {"enc_ct.stem.w", "enc_mri.down1.w"}) {
    TD w = *m.find(name);
    for (auto& p : m.parameter_tensors()) p.zero_grad();
    compute_losses(m, batch, Modality::MRI, cfg.weights).total.backward();
    const auto analytic = w.grad();
    const double eps = 1e-6;
    double worst = 0;
    for (Index i = 0; i < w.size(); i += std::max<Index>(1, w.size() / 12)) {
      const double orig = w.values()[i];
      w.mutable_values()[i] = orig + eps;
      double up, down;
      {
        NoGradGuard g;
        up = compute_losses(m, batch, Modality::MRI, cfg.weights).total.item();
        w.mutable_values()[i] = orig - eps;
        down = compute_losses(m, batch, Modality::MRI, cfg.weights).total.item();
      }
      w.mutable_values()[i] = orig;
      const double numeric = (up - down) / (2 * eps);
      worst = std::max(worst, std::fabs(numeric - analytic[i]) / std::max(1.0, std::fabs(numeric)));
    }
    INFO(name);
    CHECK(worst < 1e-3);
  }
}

TEST_CASE("smoke run lowers the smoothed loss") {
  auto cfg = tiny_train_config();
  cfg.iterations = 50;
  Trainer t(cfg, training_cases(cfg));
  std::vector<double> totals;
  while (t.iteration() < cfg.iterations) totals.push_back(t.step().total);
  auto window = [&](std::size_t from) {
    double s = 0;
    for (std::size_t i = from; i < from + 10; ++i) s += totals[i];
    return s / 10;
  };
  CHECK(window(40) < window(0));
}

TEST_CASE("resume reproduces the next step bitwise") {
  const auto cfg = tiny_train_config();
  const auto cases = training_cases(cfg);
  Trainer a(cfg, cases);
  a.step();
  a.step();
  a.step();
  const auto saved = model::decode_checkpoint(model::encode_checkpoint(a.checkpoint()));
  Trainer b(saved, cases);
  CHECK(b.iteration() == 3);
  CHECK(same_parameters(a.model(), b.model()));

  const auto ra = a.step();
  const auto rb = b.step();
  CHECK(ra.total == rb.total);
  CHECK(same_parameters(a.model(), b.model()));
  CHECK(a.optimizer().step == b.optimizer().step);

  CHECK_THROWS(Trainer(model::make_checkpoint(a.model()), cases));
}

TEST_CASE("train writes curve and rotating checkpoints") {
  auto cfg = tiny_train_config();
  cfg.iterations = 5;
  cfg.checkpoint_every = 1;
  cfg.keep_checkpoints = 2;
  const auto dir = scratch_dir("run");
  Trainer t(cfg, training_cases(cfg));
  const auto result = train(t, dir);
  CHECK(result.curve.size() == 5);
  CHECK(std::filesystem::exists(result.final_checkpoint));
  CHECK_FALSE(std::filesystem::exists(dir / "ckpt_000003.mslc"));
  CHECK(std::filesystem::exists(dir / "ckpt_000004.mslc"));
  CHECK(std::filesystem::exists(dir / "ckpt_000005.mslc"));

  std::ifstream in(dir / "curve.csv");
  std::string line;
  std::getline(in, line);
  CHECK(line == kCurveHeader);
  int rows = 0;
  while (std::getline(in, line)) ++rows;
  CHECK(rows == 5);

  const auto loaded = model::model_from_checkpoint(model::load_checkpoint(result.final_checkpoint));
  CHECK(same_parameters(loaded, t.model()));
  std::filesystem::remove_all(dir);
}

TEST_CASE("non-finite loss aborts with a diagnostic") {
  const auto cfg = tiny_train_config();
  Trainer t(cfg, training_cases(cfg));
  TF w = *t.model().find("dec.out.b");
  w.mutable_values()[0] = std::nanf("");
  CHECK_THROWS_AS(t.step(), NonFiniteError);
}
