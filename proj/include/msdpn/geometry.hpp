#pragma once

#include <Eigen/Core>

#include <filesystem>
#include <optional>
#include <vector>

namespace msdpn {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

/// LiDAR-to-camera extrinsic: p_cam = R * p_lidar + t.
struct RigidTransform {
  Mat3 R = Mat3::Identity();
  Vec3 t = Vec3::Zero();

  /// Throws std::invalid_argument unless R is a rotation within 1e-5.
  void validate() const;
  RigidTransform inverse() const;
  static RigidTransform rot_z(double radians);
};

struct Intrinsics {
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.0;
  double cy = 0.0;
  double alpha = 0.0;  // skew
  int width = 1;
  int height = 1;

  void validate() const;
};

struct CameraRig {
  Intrinsics K;
  RigidTransform lidar_to_camera;
};

/// Planar range scan. Beams lie in the LiDAR z=0 plane, x forward, y left.
struct LaserScan {
  std::vector<double> angles;  // rad, strictly increasing
  std::vector<double> ranges;  // m; meaningless where !valid
  std::vector<bool> valid;

  std::size_t size() const { return angles.size(); }
  std::size_t valid_count() const;
  /// Throws std::invalid_argument on violated invariants.
  void validate(double r_max = 1e9) const;
};

struct PixelHit {
  int u = 0;
  int v = 0;
  double depth = 0.0;  // z along the optical axis

  friend bool operator==(const PixelHit&, const PixelHit&) = default;
};

struct Projection {
  double u = 0.0;
  double v = 0.0;
  double depth = 0.0;
};

inline constexpr double kMinDepth = 1e-6;

std::vector<Vec3> scan_to_points(const LaserScan& scan);
Vec3 transform_point(const RigidTransform& T, const Vec3& p_lidar);

/// Pinhole projection. Empty when behind the camera or when the rounded pixel
/// falls outside the image.
std::optional<Projection> project_point(const Intrinsics& K, const Vec3& p_cam);

/// Inverse of project_point for unrounded coordinates.
Vec3 back_project(const Intrinsics& K, double u, double v, double depth);

/// Round half away from zero.
int round_pixel(double x);

/// Project all valid beams; z-buffered (nearest wins), sorted by (v, u).
std::vector<PixelHit> project_scan(const LaserScan& scan, const RigidTransform& T,
                                   const Intrinsics& K);

// Scan CSV: "# msdpn-scan v1" header, then "angle_rad,range_m" per beam,
// range -1 for invalid beams.
void write_scan_csv(const std::filesystem::path& path, const LaserScan& scan);
LaserScan read_scan_csv(const std::filesystem::path& path);

}  // namespace msdpn
