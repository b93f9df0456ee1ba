#include "msl/metrics/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace msl::metrics {

namespace {

void require_same(const ImageF& a, const ImageF& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(what) + ": image sizes differ (" + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                     std::to_string(b.cols()) + ")");
  }
  if (a.size() == 0) throw ShapeError(std::string(what) + ": empty image");
}

int bin_of(float v, int bins) {
  const double x = std::clamp(static_cast<double>(v), 0.0, 1.0);
  return std::min(bins - 1, static_cast<int>(x * bins));
}

}  // namespace

double mae(const ImageF& a, const ImageF& b) {
  require_same(a, b, "mae");
  return (a.cast<double>() - b.cast<double>()).abs().mean();
}

double mse(const ImageF& a, const ImageF& b) {
  require_same(a, b, "mse");
  return (a.cast<double>() - b.cast<double>()).square().mean();
}

double psnr(const ImageF& estimate, const ImageF& reference) {
  const double m = mse(estimate, reference);
  if (m == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / m);
}

double ssim(const ImageF& a, const ImageF& b) {
  require_same(a, b, "ssim");
  const Index w = kSsimWindow;
  if (a.rows() < w || a.cols() < w) throw ShapeError("ssim: image smaller than the 8x8 window");
  const Eigen::ArrayXXd x = a.cast<double>(), y = b.cast<double>();
  const double n = static_cast<double>(w * w);
  double total = 0;
  Index count = 0;
  for (Index i = 0; i + w <= x.rows(); ++i) {
    for (Index j = 0; j + w <= x.cols(); ++j) {
      const auto px = x.block(i, j, w, w);
      const auto py = y.block(i, j, w, w);
      const double mx = px.sum() / n, my = py.sum() / n;
      const double vx = (px - mx).square().sum() / n;
      const double vy = (py - my).square().sum() / n;
      const double cxy = ((px - mx) * (py - my)).sum() / n;
      total += ((2 * mx * my + kSsimC1) * (2 * cxy + kSsimC2)) /
               ((mx * mx + my * my + kSsimC1) * (vx + vy + kSsimC2));
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

double mi_hist(const ImageF& a, const ImageF& b, int bins) {
  require_same(a, b, "mi_hist");
  if (bins < 2) throw std::invalid_argument("mi_hist: bins must be >= 2");
  Eigen::ArrayXXd joint = Eigen::ArrayXXd::Zero(bins, bins);
  for (Index i = 0; i < a.size(); ++i) joint(bin_of(a.data()[i], bins), bin_of(b.data()[i], bins)) += 1.0;
  joint /= static_cast<double>(a.size());
  const Eigen::ArrayXd pa = joint.rowwise().sum(), pb = joint.colwise().sum().transpose();
  double mi = 0;
  for (int i = 0; i < bins; ++i)
    for (int j = 0; j < bins; ++j)
      if (joint(i, j) > 0) mi += joint(i, j) * std::log(joint(i, j) / (pa[i] * pb[j]));
  return std::max(0.0, mi);
}

double entropy_hist(const ImageF& a, int bins) {
  if (bins < 2) throw std::invalid_argument("entropy_hist: bins must be >= 2");
  Eigen::ArrayXd p = Eigen::ArrayXd::Zero(bins);
  for (Index i = 0; i < a.size(); ++i) p[bin_of(a.data()[i], bins)] += 1.0;
  p /= static_cast<double>(a.size());
  double h = 0;
  for (int i = 0; i < bins; ++i)
    if (p[i] > 0) h -= p[i] * std::log(p[i]);
  return h;
}

ImageF pixel_blend(const ImageF& ct, const ImageF& mri, double lambda) {
  require_same(ct, mri, "pixel_blend");
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw std::invalid_argument("pixel_blend: lambda outside [0, 1]");
  if (lambda == 0.0) return ct;
  if (lambda == 1.0) return mri;
  return ((1.0 - lambda) * ct.cast<double>() + lambda * mri.cast<double>()).cast<float>();
}

std::vector<double> lambda_grid(int n) {
  if (n < 2) throw std::invalid_argument("lambda grid needs at least 2 points");
  std::vector<double> g(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) g[i] = static_cast<double>(i) / (n - 1);
  return g;
}

MetricRow metric_row(double lambda, const ImageF& image, const ImageF& ct_gt, const ImageF& mri_gt) {
  MetricRow r;
  r.lambda = lambda;
  r.mae_ct = mae(image, ct_gt);
  r.ssim_ct = ssim(image, ct_gt);
  r.mi_ct = mi_hist(image, ct_gt);
  r.mae_mri = mae(image, mri_gt);
  r.ssim_mri = ssim(image, mri_gt);
  r.mi_mri = mi_hist(image, mri_gt);
  return r;
}

MetricReport sweep_report(std::span<const double> lambdas, std::span<const ImageF> images,
                          const ImageF& ct_gt, const ImageF& mri_gt) {
  if (lambdas.size() != images.size()) throw std::invalid_argument("sweep_report: lambda/image count mismatch");
  if (!std::is_sorted(lambdas.begin(), lambdas.end())) throw std::invalid_argument("sweep_report: lambdas must ascend");
  MetricReport report;
  for (std::size_t i = 0; i < lambdas.size(); ++i) {
    report.rows.push_back(metric_row(lambdas[i], images[i], ct_gt, mri_gt));
  }
  return report;
}

MetricReport average_reports(std::span<const MetricReport> reports) {
  if (reports.empty()) throw std::invalid_argument("average_reports: no reports");
  MetricReport out = reports[0];
  for (std::size_t k = 1; k < reports.size(); ++k) {
    if (reports[k].rows.size() != out.rows.size()) throw std::invalid_argument("average_reports: grid mismatch");
    for (std::size_t i = 0; i < out.rows.size(); ++i) {
      const MetricRow& r = reports[k].rows[i];
      if (r.lambda != out.rows[i].lambda) throw std::invalid_argument("average_reports: grid mismatch");
      MetricRow& o = out.rows[i];
      o.mae_ct += r.mae_ct;
      o.ssim_ct += r.ssim_ct;
      o.mi_ct += r.mi_ct;
      o.mae_mri += r.mae_mri;
      o.ssim_mri += r.ssim_mri;
      o.mi_mri += r.mi_mri;
    }
  }
  const double n = static_cast<double>(reports.size());
  for (MetricRow& o : out.rows) {
    o.mae_ct /= n;
    o.ssim_ct /= n;
    o.mi_ct /= n;
    o.mae_mri /= n;
    o.ssim_mri /= n;
    o.mi_mri /= n;
  }
  return out;
}

std::string report_csv(const MetricReport& report) {
  std::string out = std::string(kReportHeader) + "\n";
  char buf[512];
  for (const MetricRow& r : report.rows) {
    std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", r.lambda, r.mae_ct, r.ssim_ct,
                  r.mi_ct, r.mae_mri, r.ssim_mri, r.mi_mri);
    out += buf;
  }
  return out;
}

std::string sums_csv(const MetricReport& report) {
  std::string out = std::string(kSumsHeader) + "\n";
  char buf[256];
  for (const MetricRow& r : report.rows) {
    std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g,%.17g\n", r.lambda, r.mae_ct + r.mae_mri,
                  r.ssim_ct + r.ssim_mri, r.mi_ct + r.mi_mri);
    out += buf;
  }
  return out;
}

MetricReport parse_report_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kReportHeader) throw std::runtime_error("metric report: bad header");
  MetricReport report;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    MetricRow r;
    double* fields[] = {&r.lambda, &r.mae_ct, &r.ssim_ct, &r.mi_ct, &r.mae_mri, &r.ssim_mri, &r.mi_mri};
    std::istringstream row(line);
    std::string cell;
    for (double* f : fields) {
      if (!std::getline(row, cell, ',')) throw std::runtime_error("metric report: short row '" + line + "'");
      std::size_t used = 0;
      *f = std::stod(cell, &used);
      if (used != cell.size()) throw std::runtime_error("metric report: bad number '" + cell + "'");
    }
    if (std::getline(row, cell, ',')) throw std::runtime_error("metric report: long row '" + line + "'");
    report.rows.push_back(r);
  }
  return report;
}

}  // namespace msl::metrics
