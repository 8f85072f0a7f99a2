#pragma once

#include "msdpn/encoding.hpp"

#include <cstdint>
#include <filesystem>
#include <vector>

namespace msdpn {

/// 16-bit grayscale PNG in millimeters: round(depth * 1000), 0 = no measurement.
/// Values beyond 65.535 m saturate.
void write_depth_png16(const std::filesystem::path& path, const DepthImage& depth);

/// Reads a 16-bit grayscale PNG back into meters.
DepthImage read_depth_png16(const std::filesystem::path& path);

}  // namespace msdpn
