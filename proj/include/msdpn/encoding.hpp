#pragma once

#include "msdpn/geometry.hpp"
#include "msdpn/tensor.hpp"

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace msdpn {

/// H x W depth map in meters; 0 means "no measurement".
using DepthImage = Tensor;

enum class InputMode { ProjD, RefD, RgbOnly };

std::string_view to_string(InputMode mode);
InputMode parse_input_mode(std::string_view s);  // "proj-d" | "ref-d" | "rgb-only"
int input_channels(InputMode mode);

/// Network input, C x H x W: RGB in [0,1] followed by the depth channel (if any).
struct InputTensor {
  Tensor tensor;
  InputMode mode = InputMode::ProjD;

  bool uses_residual_head() const { return mode == InputMode::RefD; }
};

/// Zero image with each hit's depth written at (v, u). Throws on out-of-bounds hits.
DepthImage make_proj_d(const std::vector<PixelHit>& hits, int height, int width);

/// Fills every column that carries at least one measurement with the depth of
/// the vertically nearest measured pixel (ties go to the smaller depth).
DepthImage make_ref_d(const DepthImage& proj_d);

/// Invalidates a seeded uniform subset of valid beams so that exactly
/// ceil(keep_fraction * n_valid) stay valid.
LaserScan dropout_scan(const LaserScan& scan, double keep_fraction, std::uint64_t seed);

/// Number of beams dropout_scan keeps.
std::size_t dropout_keep_count(std::size_t n_valid, double keep_fraction);

InputTensor assemble_input(const Tensor& rgb, const DepthImage& depth_channel, InputMode mode);

struct RowStats {
  double mean_min_v = 0.0;
  double std_min_v = 0.0;  // population
  int p5 = 0;              // nearest-rank percentiles of min v
  int p95 = 0;
  std::size_t n_images = 0;
  std::size_t n_excluded = 0;  // images without any measurement
};

/// Statistics of the topmost measured row across images.
RowStats scan_row_stats(const std::vector<DepthImage>& proj_d_list);

}  // namespace msdpn
