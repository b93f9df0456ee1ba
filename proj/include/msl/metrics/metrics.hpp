#pragma once

#include "msl/physics/physics.hpp"

#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace msl::metrics {

using physics::ImageF;

double mae(const ImageF& a, const ImageF& b);
double mse(const ImageF& a, const ImageF& b);
// Peak 1.0; +inf for identical images. Symmetric in value, asymmetric in role
// (the second argument is treated as the reference).
double psnr(const ImageF& estimate, const ImageF& reference);

inline constexpr int kSsimWindow = 8;
inline constexpr double kSsimC1 = 0.01 * 0.01;
inline constexpr double kSsimC2 = 0.03 * 0.03;
// Mean SSIM over all 8x8 windows at stride 1 (uniform weights, population moments).
double ssim(const ImageF& a, const ImageF& b);

inline constexpr int kMiBins = 32;
// Hard-binned joint histogram MI over [0, 1] (values clamped), natural log.
double mi_hist(const ImageF& a, const ImageF& b, int bins = kMiBins);
// Hard-binned entropy over [0, 1], natural log.
double entropy_hist(const ImageF& a, int bins = kMiBins);

ImageF pixel_blend(const ImageF& ct, const ImageF& mri, double lambda);

struct MetricRow {
  double lambda = 0;
  double mae_ct = 0, ssim_ct = 0, mi_ct = 0;
  double mae_mri = 0, ssim_mri = 0, mi_mri = 0;

  bool operator==(const MetricRow&) const = default;
};

struct MetricReport {
  std::vector<MetricRow> rows;  // ascending lambda

  bool operator==(const MetricReport&) const = default;
};

// {0, 1/(n-1), ..., 1}
std::vector<double> lambda_grid(int n);

MetricRow metric_row(double lambda, const ImageF& image, const ImageF& ct_gt, const ImageF& mri_gt);
MetricReport sweep_report(std::span<const double> lambdas, std::span<const ImageF> images,
                          const ImageF& ct_gt, const ImageF& mri_gt);
// Row-wise mean of several reports over the same grid.
MetricReport average_reports(std::span<const MetricReport> reports);

inline constexpr const char* kReportHeader = "lambda,MAE_vs_CT,SSIM_vs_CT,MI_vs_CT,MAE_vs_MRI,SSIM_vs_MRI,MI_vs_MRI";
inline constexpr const char* kSumsHeader = "lambda,MAE_sum,SSIM_sum,MI_sum";

// Values printed with 17 significant digits so parsing restores them exactly.
std::string report_csv(const MetricReport& report);
// Per-lambda sums of the paired metrics (vs CT + vs MRI).
std::string sums_csv(const MetricReport& report);
MetricReport parse_report_csv(const std::string& text);

}  // namespace msl::metrics
