#pragma once

#include "msdpn/encoding.hpp"
#include "msdpn/geometry.hpp"
#include "msdpn/tensor.hpp"

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace msdpn {

using Albedo = std::array<double, 3>;

/// Axis-aligned box resting anywhere inside the room.
struct Box {
  Vec3 center = Vec3::Zero();
  Vec3 half = Vec3::Constant(0.5);
  Albedo albedo{0.5, 0.5, 0.5};
};

/// Closed axis-aligned room; floor at z = room_min.z().
struct Room {
  Vec3 min = Vec3(-2, -2, 0);
  Vec3 max = Vec3(2, 2, 3);
  // Faces in order -x, +x, -y, +y, floor, ceiling.
  std::array<Albedo, 6> albedo{};
};

/// Level camera: world z up, yaw about z, optical axis (cos yaw, sin yaw, 0).
struct CameraPose {
  Vec3 position = Vec3(0, 0, 1);
  double yaw = 0.0;

  /// Columns are the camera x (right), y (down), z (forward) axes in world.
  Mat3 world_from_camera() const;
};

struct Scene {
  Room room;
  std::vector<Box> boxes;
  CameraPose camera;
  RigidTransform lidar_to_camera;

  /// Throws std::logic_error when an invariant is broken.
  void validate() const;
};

/// Sensor pose in the world frame: p_world = R * p_sensor + t.
struct WorldPose {
  Mat3 R = Mat3::Identity();
  Vec3 t = Vec3::Zero();
};

WorldPose lidar_world_pose(const Scene& scene);

/// Planar LiDAR mounted 0.1 m below and 0.05 m ahead of the camera, level.
RigidTransform default_lidar_mount();

/// Intrinsics with a ~64 degree horizontal field of view.
Intrinsics default_intrinsics(int height, int width);

struct SceneConfig {
  int min_boxes = 2;
  int max_boxes = 6;
  double room_min = 4.0;  // horizontal room extent range, m
  double room_max = 8.0;
  double ceiling_min = 2.6;
  double ceiling_max = 3.2;
  double camera_height = 1.0;
  /// Camera faces a bare wall head-on: every scan hit lands on a plane
  /// parallel to the image plane.
  bool fronto_parallel = false;
  RigidTransform lidar_to_camera = default_lidar_mount();
};

Scene generate_scene(std::uint64_t seed, const SceneConfig& config = {});

struct RayHit {
  double t = 0.0;  // ray parameter
  Vec3 normal = Vec3::Zero();
  Albedo albedo{};
};

/// Nearest intersection along origin + t * dir, t > 0 (slab method for boxes).
std::optional<RayHit> cast_ray(const Scene& scene, const Vec3& origin, const Vec3& dir);

/// Per-pixel ray cast; stores the optical-axis depth, 0 on a miss.
DepthImage render_depth(const Scene& scene, const Intrinsics& K);

/// Lambertian shading of flat albedo: albedo * (ambient + (1 - ambient) * max(0, n.l)).
Tensor render_rgb(const Scene& scene, const Intrinsics& K);

inline constexpr double kAmbient = 0.2;
Vec3 light_direction();

struct ScanConfig {
  int n_beams = 1081;
  double fov_rad = 4.71238898038469;  // 270 degrees
  double r_max = 20.0;
  double noise_sigma = 0.0;  // Gaussian range noise, m
  std::uint64_t noise_seed = 0;
};

/// Evenly spaced beams over the field of view in the LiDAR z = 0 plane.
LaserScan simulate_scan(const Scene& scene, const WorldPose& lidar_pose, const ScanConfig& config);
LaserScan simulate_scan(const Scene& scene, const ScanConfig& config = {});

/// Keeps points within the elevation band, bins them by azimuth over
/// [-pi, pi), and keeps the nearest planar range per bin.
LaserScan simulate_2d_from_pointcloud(const std::vector<Vec3>& cloud,
                                      double elevation_band_rad = 0.005,
                                      double resolution_rad = 0.25 * 3.14159265358979323846 / 180.0);

struct SceneSample {
  std::string id;
  Tensor rgb;           // 3 x H x W in [0, 1]
  DepthImage gt_depth;  // H x W, m
  LaserScan scan;
  CameraRig rig;
};

SceneSample make_sample(std::uint64_t seed, int height, int width, const SceneConfig& scene_cfg = {},
                        const ScanConfig& scan_cfg = {});

}  // namespace msdpn
