#pragma once

#include "msdpn/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace msdpn {

/// Running sums over valid (gt > 0) pixels; merge() pools across images.
struct MetricAccumulator {
  double sum_sq = 0.0;
  double sum_abs = 0.0;
  double sum_rel = 0.0;
  std::int64_t within[3] = {0, 0, 0};  // counts for delta thresholds 1.25^n
  std::int64_t n = 0;

  void add(const Tensor& pred, const Tensor& gt);
  void merge(const MetricAccumulator& other);
};

struct EvalReport {
  double rmse_m = 0.0;
  double rel = 0.0;
  double mae_m = 0.0;
  double delta1 = 0.0;  // percentages
  double delta2 = 0.0;
  double delta3 = 0.0;
  std::int64_t n_valid_pixels = 0;
  std::int64_t n_images = 0;

  static EvalReport from(const MetricAccumulator& acc, std::int64_t n_images);
};

/// Each throws std::invalid_argument when gt has no valid pixel.
double rmse(const Tensor& pred, const Tensor& gt);
double rel(const Tensor& pred, const Tensor& gt);
/// Percentage of valid pixels with max(pred/gt, gt/pred) < 1.25^n; pred <= 0 fails.
double delta(const Tensor& pred, const Tensor& gt, int n);

struct ImageReport {
  std::string image_id;
  EvalReport report;
};

/// Pixel-pooled summary over all images. Throws if no image has a valid pixel.
EvalReport pool_reports(const std::vector<MetricAccumulator>& per_image);

/// Header image_id,rmse_mm,rel,delta1,delta2,delta3,n_valid; one row per image
/// followed by the pooled ALL row.
void write_eval_csv(const std::filesystem::path& path, const std::vector<ImageReport>& rows,
                    const EvalReport& summary);
std::string format_eval_row(const std::string& id, const EvalReport& r);

}  // namespace msdpn
