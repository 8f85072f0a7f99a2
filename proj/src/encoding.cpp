#include "msdpn/encoding.hpp"

#include "msdpn/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

namespace msdpn {

std::string_view to_string(InputMode mode) {
  switch (mode) {
    case InputMode::ProjD: return "proj-d";
    case InputMode::RefD: return "ref-d";
    case InputMode::RgbOnly: return "rgb-only";
  }
  return "?";
}

InputMode parse_input_mode(std::string_view s) {
  if (s == "proj-d") return InputMode::ProjD;
  if (s == "ref-d") return InputMode::RefD;
  if (s == "rgb-only") return InputMode::RgbOnly;
  throw ConfigError("unknown input mode '" + std::string(s) + "'");
}

int input_channels(InputMode mode) { return mode == InputMode::RgbOnly ? 3 : 4; }

DepthImage make_proj_d(const std::vector<PixelHit>& hits, int height, int width) {
  DepthImage img({height, width});
  for (const PixelHit& h : hits) {
    if (h.u < 0 || h.u >= width || h.v < 0 || h.v >= height) {
      throw std::out_of_range("pixel hit (" + std::to_string(h.u) + "," + std::to_string(h.v) +
                              ") outside " + std::to_string(width) + "x" + std::to_string(height));
    }
    if (!(h.depth > 0.0)) throw std::invalid_argument("pixel hit with non-positive depth");
    img.at(h.v, h.u) = static_cast<float>(h.depth);
  }
  return img;
}

DepthImage make_ref_d(const DepthImage& proj_d) {
  if (proj_d.rank() != 2) throw ShapeError("make_ref_d expects an H x W image");
  const auto H = proj_d.dim(0), W = proj_d.dim(1);
  DepthImage out({H, W});
  std::vector<std::int64_t> rows;
  for (std::int64_t u = 0; u < W; ++u) {
    rows.clear();
    for (std::int64_t v = 0; v < H; ++v) {
      if (proj_d.at(v, u) > 0.0f) rows.push_back(v);
    }
    if (rows.empty()) continue;
    // Sweep with a pointer to the first measured row at or below v.
    std::size_t next = 0;
    for (std::int64_t v = 0; v < H; ++v) {
      while (next < rows.size() && rows[next] < v) ++next;
      float best;
      if (next == rows.size()) {
        best = proj_d.at(rows.back(), u);
      } else if (next == 0) {
        best = proj_d.at(rows[0], u);
      } else {
        const auto above = rows[next - 1], below = rows[next];
        const auto da = v - above, db = below - v;
        const float za = proj_d.at(above, u), zb = proj_d.at(below, u);
        best = da < db ? za : (db < da ? zb : std::min(za, zb));
      }
      out.at(v, u) = best;
    }
  }
  return out;
}

std::size_t dropout_keep_count(std::size_t n_valid, double keep_fraction) {
  if (!(keep_fraction >= 0.0 && keep_fraction <= 1.0)) {
    throw std::invalid_argument("keep_fraction must lie in [0, 1]");
  }
  // Slack absorbs representation error, e.g. 0.07 * 100 = 7.000000000000001.
  const double k = std::ceil(keep_fraction * static_cast<double>(n_valid) - 1e-9);
  return std::min(n_valid, static_cast<std::size_t>(std::max(0.0, k)));
}

LaserScan dropout_scan(const LaserScan& scan, double keep_fraction, std::uint64_t seed) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < scan.size(); ++i) {
    if (scan.valid[i]) idx.push_back(i);
  }
  const std::size_t keep = dropout_keep_count(idx.size(), keep_fraction);
  LaserScan out = scan;
  if (keep == idx.size()) return out;
  std::mt19937_64 rng(seed);
  // Partial Fisher-Yates: the first `keep` slots become the kept set.
  for (std::size_t i = 0; i < keep; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng() % (idx.size() - i));
    std::swap(idx[i], idx[j]);
  }
  for (std::size_t i = keep; i < idx.size(); ++i) out.valid[idx[i]] = false;
  return out;
}

InputTensor assemble_input(const Tensor& rgb, const DepthImage& depth_channel, InputMode mode) {
  if (rgb.rank() != 3 || rgb.dim(0) != 3) {
    throw ShapeError("rgb must be 3 x H x W, got " + shape_str(rgb.shape()));
  }
  const auto H = rgb.dim(1), W = rgb.dim(2);
  InputTensor in;
  in.mode = mode;
  if (mode == InputMode::RgbOnly) {
    in.tensor = rgb;
    return in;
  }
  if (depth_channel.shape() != Shape{H, W}) {
    throw ShapeError("depth channel " + shape_str(depth_channel.shape()) + " does not match rgb " +
                     shape_str(rgb.shape()));
  }
  in.tensor = Tensor({4, H, W});
  std::copy(rgb.data(), rgb.data() + rgb.numel(), in.tensor.data());
  std::copy(depth_channel.data(), depth_channel.data() + depth_channel.numel(),
            in.tensor.data() + rgb.numel());
  return in;
}

RowStats scan_row_stats(const std::vector<DepthImage>& proj_d_list) {
  if (proj_d_list.empty()) throw std::invalid_argument("scan_row_stats needs at least one image");
  RowStats st;
  std::vector<int> min_v;
  for (const DepthImage& img : proj_d_list) {
    if (img.rank() != 2) throw ShapeError("scan_row_stats expects H x W images");
    int found = -1;
    for (std::int64_t v = 0; v < img.dim(0) && found < 0; ++v) {
      for (std::int64_t u = 0; u < img.dim(1); ++u) {
        if (img.at(v, u) > 0.0f) {
          found = static_cast<int>(v);
          break;
        }
      }
    }
    if (found < 0) {
      ++st.n_excluded;
    } else {
      min_v.push_back(found);
    }
  }
  st.n_images = min_v.size();
  if (min_v.empty()) throw std::invalid_argument("no image carries any measurement");
  const double n = static_cast<double>(min_v.size());
  const double mean = std::accumulate(min_v.begin(), min_v.end(), 0.0) / n;
  double ss = 0.0;
  for (int v : min_v) ss += (v - mean) * (v - mean);
  st.mean_min_v = mean;
  st.std_min_v = std::sqrt(ss / n);
  std::sort(min_v.begin(), min_v.end());
  auto nearest_rank = [&](double p) {
    auto r = static_cast<std::size_t>(std::ceil(p / 100.0 * n));
    return min_v[std::clamp<std::size_t>(r, 1, min_v.size()) - 1];
  };
  st.p5 = nearest_rank(5.0);
  st.p95 = nearest_rank(95.0);
  return st;
}

}  // namespace msdpn
