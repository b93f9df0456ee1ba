#include <doctest.h>

#include "msl/core/random.hpp"
#include "msl/lambda_opt/lambda_opt.hpp"
#include "msl/metrics/metrics.hpp"
#include "oracles.hpp"

#include <cmath>
#include <limits>

using namespace msl;
using namespace msl::metrics;

namespace {

ImageF random_image(Index h, Index w, std::uint64_t seed, double lo = 0.0, double hi = 1.0) {
  Rng rng(seed);
  ImageF img(h, w);
  for (Index i = 0; i < img.size(); ++i) img.data()[i] = static_cast<float>(rng.uniform(lo, hi));
  return img;
}

}  // namespace

TEST_CASE("mae, mse and psnr") {
  const ImageF x = random_image(8, 8, 1);
  CHECK(mae(x, x) == 0.0);
  CHECK(mse(x, x) == 0.0);
  CHECK(std::isinf(psnr(x, x)));
  const ImageF shifted = x + 0.125f;
  CHECK(mae(shifted, x) == doctest::Approx(0.125).epsilon(1e-6));
  CHECK(psnr(shifted, x) == doctest::Approx(10 * std::log10(1 / (0.125 * 0.125))).epsilon(1e-6));

  for (std::uint64_t seed = 2; seed < 7; ++seed) {
    const ImageF a = random_image(8, 8, seed), b = random_image(8, 8, seed + 50);
    double sa = 0, ss = 0;
    for (Index i = 0; i < 8; ++i)
      for (Index j = 0; j < 8; ++j) {
        const double d = static_cast<double>(a(i, j)) - b(i, j);
        sa += std::fabs(d);
        ss += d * d;
      }
    CHECK(std::fabs(mae(a, b) - sa / 64) < 1e-6);
    CHECK(std::fabs(mse(a, b) - ss / 64) < 1e-6);
    CHECK(mae(a, b) == mae(b, a));
    CHECK(psnr(a, b) == doctest::Approx(10 * std::log10(64 / ss)));
  }
  CHECK_THROWS_AS(mae(ImageF::Zero(4, 4), ImageF::Zero(4, 5)), ShapeError);
}

TEST_CASE("ssim") {
  const ImageF x = random_image(16, 16, 3);
  CHECK(ssim(x, x) == doctest::Approx(1.0).epsilon(1e-12));
  for (std::uint64_t seed = 4; seed < 8; ++seed) {
    const ImageF a = random_image(8, 8, seed), b = random_image(8, 8, seed + 9);
    CHECK(std::fabs(ssim(a, b) - oracle::ssim(a, b)) < 1e-4);
    CHECK(ssim(a, b) == doctest::Approx(ssim(b, a)).epsilon(1e-12));
  }
  const ImageF a = random_image(12, 10, 8), b = random_image(12, 10, 9);
  CHECK(std::fabs(ssim(a, b) - oracle::ssim(a, b)) < 1e-4);

  // Checkerboard: every 8x8 window has zero mean deviation structure mirrored by 1 - x.
  ImageF board(16, 16);
  for (Index i = 0; i < 16; ++i)
    for (Index j = 0; j < 16; ++j) board(i, j) = ((i + j) % 2) ? 0.8f : 0.2f;
  const ImageF inverted = 1.0f - board;
  CHECK(ssim(board, inverted) <= 0.0);

  // Period-4 tilings of two tiles with equal means: every 8x8 window of both
  // images has the same mean, so the luminance term is 1 and a common shift
  // leaves SSIM unchanged.
  const ImageF tile = random_image(4, 4, 10, 0.1, 0.6);
  ImageF tile_b = tile.reverse();
  std::swap(tile_b(0, 0), tile_b(2, 3));
  ImageF c(16, 16), d(16, 16);
  for (Index i = 0; i < 16; ++i)
    for (Index j = 0; j < 16; ++j) {
      c(i, j) = tile(i % 4, j % 4);
      d(i, j) = tile_b(i % 4, j % 4);
    }
  CHECK(std::fabs(ssim(c + 0.3f, d + 0.3f) - ssim(c, d)) < 1e-6);
  CHECK(ssim(c, d) < 1.0);
  CHECK_THROWS_AS(ssim(ImageF::Zero(4, 4), ImageF::Zero(4, 4)), ShapeError);
}

TEST_CASE("histogram mutual information") {
  const ImageF x = random_image(32, 32, 12);
  CHECK(mi_hist(x, x) == doctest::Approx(entropy_hist(x)).epsilon(1e-12));
  CHECK(mi_hist(x, ImageF::Constant(32, 32, 0.4f)) == 0.0);
  for (std::uint64_t seed = 13; seed < 16; ++seed) {
    const ImageF a = random_image(8, 8, seed), b = random_image(8, 8, seed + 1);
    CHECK(std::fabs(mi_hist(a, b) - oracle::mi_hist(a, b, 32)) < 1e-6);
    CHECK(mi_hist(a, b) == doctest::Approx(mi_hist(b, a)).epsilon(1e-12));
  }
  CHECK(std::fabs(mi_hist(x, x, 4) - oracle::mi_hist(x, x, 4)) < 1e-9);
}

TEST_CASE("hard and soft estimators agree on smooth images") {
  ImageF a(64, 64), b(64, 64);
  for (Index i = 0; i < 64; ++i)
    for (Index j = 0; j < 64; ++j) {
      a(i, j) = static_cast<float>(0.5 + 0.4 * std::sin(i / 9.0) * std::cos(j / 13.0));
      b(i, j) = static_cast<float>(0.5 + 0.4 * std::sin(i / 9.0 + 0.3) * std::cos(j / 11.0));
    }
  const auto ta = physics::image_to_tensor(a).cast<double>(), tb = physics::image_to_tensor(b).cast<double>();
  const double hard = mi_hist(a, b);
  // Kernel smoothing spreads the joint histogram: at one bin of bandwidth the
  // soft estimate sits below the hard one, and converges as the kernel narrows.
  CHECK(lambda_opt::soft_mi(ta, tb).item() < hard);
  const lambda_opt::SoftMIConfig narrow{32, 0.3 / 32};
  CHECK(std::fabs(lambda_opt::soft_mi(ta, tb, narrow).item() - hard) < 0.1);
}

TEST_CASE("pixel blend") {
  const ImageF ct = random_image(8, 8, 20), mri = random_image(8, 8, 21);
  CHECK((pixel_blend(ct, mri, 0.0) == ct).all());
  CHECK((pixel_blend(ct, mri, 1.0) == mri).all());
  const ImageF mid = pixel_blend(ImageF::Constant(4, 4, 0.2f), ImageF::Constant(4, 4, 0.6f), 0.5);
  CHECK(mid(0, 0) == doctest::Approx(0.4).epsilon(1e-6));
  const ImageF q1 = pixel_blend(ct, mri, 0.25), q3 = pixel_blend(ct, mri, 0.75);
  CHECK(((q1 + q3) * 0.5f - pixel_blend(ct, mri, 0.5)).abs().maxCoeff() < 1e-6);
  CHECK(q1.minCoeff() >= 0.0f);
  CHECK(q1.maxCoeff() <= 1.0f);
  CHECK_THROWS(pixel_blend(ct, mri, 1.5));
}

TEST_CASE("sweep report and csv") {
  const ImageF ct = random_image(16, 16, 30), mri = random_image(16, 16, 31);
  const auto grid = lambda_grid(11);
  CHECK(grid.size() == 11);
  CHECK(grid.front() == 0.0);
  CHECK(grid.back() == 1.0);
  std::vector<ImageF> images;
  for (double l : grid) images.push_back(pixel_blend(ct, mri, l));
  const auto report = sweep_report(grid, images, ct, mri);
  CHECK(report.rows.size() == 11);
  CHECK(report.rows.front().mae_ct == mae(ct, ct));
  CHECK(report.rows.front().ssim_mri == ssim(ct, mri));
  CHECK(report.rows.back().mi_ct == mi_hist(mri, ct));
  CHECK(report.rows.front().mae_ct < report.rows.back().mae_ct);
  CHECK(report.rows.back().mae_mri < report.rows.front().mae_mri);

  const auto text = report_csv(report);
  CHECK(text.rfind(std::string(kReportHeader) + "\n", 0) == 0);
  CHECK(parse_report_csv(text) == report);
  CHECK_THROWS(parse_report_csv("lambda,bogus\n"));

  const auto sums = sums_csv(report);
  CHECK(sums.rfind(kSumsHeader, 0) == 0);

  const std::vector<MetricReport> two{report, report};
  CHECK(average_reports(two) == report);
  const std::vector<double> unsorted{0.5, 0.0};
  const std::vector<ImageF> pair_images{ct, mri};
  CHECK_THROWS(sweep_report(unsorted, pair_images, ct, mri));
}
