#include "msdpn/geometry.hpp"

#include "msdpn/errors.hpp"

#include <Eigen/LU>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>

namespace msdpn {

void RigidTransform::validate() const {
  const double ortho = (R.transpose() * R - Mat3::Identity()).cwiseAbs().maxCoeff();
  if (!(ortho <= 1e-5)) throw std::invalid_argument("rotation is not orthonormal");
  if (!(std::fabs(R.determinant() - 1.0) <= 1e-5)) {
    throw std::invalid_argument("rotation determinant is not +1");
  }
  if (!t.allFinite()) throw std::invalid_argument("translation is not finite");
}

RigidTransform RigidTransform::inverse() const {
  RigidTransform inv;
  inv.R = R.transpose();
  inv.t = -(inv.R * t);
  return inv;
}

RigidTransform RigidTransform::rot_z(double radians) {
  RigidTransform T;
  const double c = std::cos(radians), s = std::sin(radians);
  T.R << c, -s, 0, s, c, 0, 0, 0, 1;
  return T;
}

void Intrinsics::validate() const {
  if (!(fx > 0 && fy > 0)) throw std::invalid_argument("focal lengths must be positive");
  if (width <= 0 || height <= 0) throw std::invalid_argument("image size must be positive");
  if (!(cx >= 0 && cx < width && cy >= 0 && cy < height)) {
    throw std::invalid_argument("principal point outside the image");
  }
}

std::size_t LaserScan::valid_count() const {
  return static_cast<std::size_t>(std::count(valid.begin(), valid.end(), true));
}

void LaserScan::validate(double r_max) const {
  if (angles.size() != ranges.size() || angles.size() != valid.size()) {
    throw std::invalid_argument("scan field lengths differ");
  }
  for (std::size_t i = 1; i < angles.size(); ++i) {
    if (!(angles[i] > angles[i - 1])) throw std::invalid_argument("scan angles not increasing");
  }
  for (std::size_t i = 0; i < ranges.size(); ++i) {
    if (valid[i] && !(ranges[i] > 0.0 && ranges[i] <= r_max)) {
      throw std::invalid_argument("valid beam with range outside (0, r_max]");
    }
  }
}

std::vector<Vec3> scan_to_points(const LaserScan& scan) {
  std::vector<Vec3> pts;
  pts.reserve(scan.valid_count());
  for (std::size_t i = 0; i < scan.size(); ++i) {
    if (!scan.valid[i]) continue;
    const double r = scan.ranges[i], th = scan.angles[i];
    pts.emplace_back(r * std::cos(th), r * std::sin(th), 0.0);
  }
  return pts;
}

Vec3 transform_point(const RigidTransform& T, const Vec3& p_lidar) { return T.R * p_lidar + T.t; }

int round_pixel(double x) { return static_cast<int>(std::round(x)); }

std::optional<Projection> project_point(const Intrinsics& K, const Vec3& p) {
  const double z = p.z();
  if (!(z > kMinDepth)) return std::nullopt;
  Projection out;
  out.u = (K.fx * p.x() + K.alpha * p.y()) / z + K.cx;
  out.v = K.fy * p.y() / z + K.cy;
  out.depth = z;
  if (!std::isfinite(out.u) || !std::isfinite(out.v)) return std::nullopt;
  // Guard the int conversion before rounding.
  if (out.u < -1.0 || out.v < -1.0 || out.u > K.width + 1.0 || out.v > K.height + 1.0) {
    return std::nullopt;
  }
  const int u = round_pixel(out.u), v = round_pixel(out.v);
  if (u < 0 || u >= K.width || v < 0 || v >= K.height) return std::nullopt;
  return out;
}

Vec3 back_project(const Intrinsics& K, double u, double v, double depth) {
  const double y = (v - K.cy) / K.fy;
  const double x = (u - K.cx - K.alpha * y) / K.fx;
  return Vec3(x * depth, y * depth, depth);
}

std::vector<PixelHit> project_scan(const LaserScan& scan, const RigidTransform& T,
                                   const Intrinsics& K) {
  std::map<std::pair<int, int>, double> zbuf;  // key (v, u)
  for (const Vec3& pl : scan_to_points(scan)) {
    auto proj = project_point(K, transform_point(T, pl));
    if (!proj) continue;
    const auto key = std::make_pair(round_pixel(proj->v), round_pixel(proj->u));
    auto [it, inserted] = zbuf.emplace(key, proj->depth);
    if (!inserted && proj->depth < it->second) it->second = proj->depth;
  }
  std::vector<PixelHit> hits;
  hits.reserve(zbuf.size());
  for (const auto& [key, depth] : zbuf) hits.push_back({key.second, key.first, depth});
  return hits;
}

namespace {

constexpr const char* kScanHeader = "# msdpn-scan v1";

double parse_double(std::string_view s, const std::string& path, int line) {
  double v = 0.0;
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    throw FormatError(path + ":" + std::to_string(line) + ": bad number '" + std::string(s) + "'");
  }
  return v;
}

}  // namespace

void write_scan_csv(const std::filesystem::path& path, const LaserScan& scan) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw MissingFileError(path.string());
  os << kScanHeader << '\n';
  char buf[96];
  for (std::size_t i = 0; i < scan.size(); ++i) {
    const double r = scan.valid[i] ? scan.ranges[i] : -1.0;
    std::snprintf(buf, sizeof(buf), "%.17g,%.17g\n", scan.angles[i], r);
    os << buf;
  }
  if (!os) throw std::runtime_error("failed writing " + path.string());
}

LaserScan read_scan_csv(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw MissingFileError(path.string());
  std::string line;
  if (!std::getline(is, line)) throw FormatError(path.string() + ": empty scan file", 0);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kScanHeader) throw FormatError(path.string() + ": missing scan header", 0);
  LaserScan scan;
  int lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": expected angle,range");
    }
    const std::string sp = path.string();
    const double a = parse_double(std::string_view(line).substr(0, comma), sp, lineno);
    const double r = parse_double(std::string_view(line).substr(comma + 1), sp, lineno);
    scan.angles.push_back(a);
    scan.valid.push_back(r >= 0.0);
    scan.ranges.push_back(r >= 0.0 ? r : -1.0);
  }
  try {
    scan.validate();
  } catch (const std::invalid_argument& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  return scan;
}

}  // namespace msdpn
