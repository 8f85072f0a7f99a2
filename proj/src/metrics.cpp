#include "msdpn/metrics.hpp"

#include "msdpn/errors.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

namespace msdpn {

namespace {

constexpr double kDeltaBase = 1.25;

}  // namespace

void MetricAccumulator::add(const Tensor& pred, const Tensor& gt) {
  if (pred.numel() != gt.numel()) {
    throw ShapeError("metrics: prediction " + shape_str(pred.shape()) + " vs ground truth " +
                     shape_str(gt.shape()));
  }
  for (std::int64_t i = 0; i < gt.numel(); ++i) {
    const double g = gt[i];
    if (!(g > 0.0)) continue;
    const double p = pred[i];
    const double e = p - g;
    sum_sq += e * e;
    sum_abs += std::fabs(e);
    sum_rel += std::fabs(e) / g;
    ++n;
    if (p > 0.0) {
      const double ratio = std::max(p / g, g / p);
      double thr = 1.0;
      for (int k = 0; k < 3; ++k) {
        thr *= kDeltaBase;
        if (ratio < thr) ++within[k];
      }
    }
  }
}

void MetricAccumulator::merge(const MetricAccumulator& o) {
  sum_sq += o.sum_sq;
  sum_abs += o.sum_abs;
  sum_rel += o.sum_rel;
  for (int k = 0; k < 3; ++k) within[k] += o.within[k];
  n += o.n;
}

EvalReport EvalReport::from(const MetricAccumulator& acc, std::int64_t n_images) {
  if (acc.n == 0) throw std::invalid_argument("no valid ground-truth pixels");
  const double n = static_cast<double>(acc.n);
  EvalReport r;
  r.rmse_m = std::sqrt(acc.sum_sq / n);
  r.mae_m = acc.sum_abs / n;
  r.rel = acc.sum_rel / n;
  r.delta1 = 100.0 * static_cast<double>(acc.within[0]) / n;
  r.delta2 = 100.0 * static_cast<double>(acc.within[1]) / n;
  r.delta3 = 100.0 * static_cast<double>(acc.within[2]) / n;
  r.n_valid_pixels = acc.n;
  r.n_images = n_images;
  return r;
}

namespace {

EvalReport single(const Tensor& pred, const Tensor& gt) {
  MetricAccumulator acc;
  acc.add(pred, gt);
  return EvalReport::from(acc, 1);
}

}  // namespace

double rmse(const Tensor& pred, const Tensor& gt) { return single(pred, gt).rmse_m; }
double rel(const Tensor& pred, const Tensor& gt) { return single(pred, gt).rel; }

double delta(const Tensor& pred, const Tensor& gt, int n) {
  if (n < 1 || n > 3) throw std::invalid_argument("delta order must be 1, 2 or 3");
  const EvalReport r = single(pred, gt);
  return n == 1 ? r.delta1 : (n == 2 ? r.delta2 : r.delta3);
}

EvalReport pool_reports(const std::vector<MetricAccumulator>& per_image) {
  MetricAccumulator all;
  for (const auto& a : per_image) all.merge(a);
  return EvalReport::from(all, static_cast<std::int64_t>(per_image.size()));
}

std::string format_eval_row(const std::string& id, const EvalReport& r) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%s,%.6f,%.8f,%.6f,%.6f,%.6f,%lld", id.c_str(), r.rmse_m * 1000.0,
                r.rel, r.delta1, r.delta2, r.delta3, static_cast<long long>(r.n_valid_pixels));
  return buf;
}

void write_eval_csv(const std::filesystem::path& path, const std::vector<ImageReport>& rows,
                    const EvalReport& summary) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw MissingFileError(path.string());
  os << "image_id,rmse_mm,rel,delta1,delta2,delta3,n_valid\n";
  for (const auto& r : rows) os << format_eval_row(r.image_id, r.report) << '\n';
  os << format_eval_row("ALL", summary) << '\n';
}

}  // namespace msdpn
