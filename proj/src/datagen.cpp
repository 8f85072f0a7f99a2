#include "msdpn/datagen.hpp"

#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>
#include <stdexcept>

namespace msdpn {

namespace {

class Uniform {
 public:
  explicit Uniform(std::uint64_t seed) : rng_(seed) {}
  double operator()(double lo, double hi) {
    const double u = static_cast<double>(rng_() >> 11) * 0x1.0p-53;
    return lo + (hi - lo) * u;
  }
  int integer(int lo, int hi) {  // inclusive
    return lo + static_cast<int>(rng_() % static_cast<std::uint64_t>(hi - lo + 1));
  }
  std::mt19937_64& engine() { return rng_; }

 private:
  std::mt19937_64 rng_;
};

Albedo random_albedo(Uniform& u, double lo, double hi) {
  return {u(lo, hi), u(lo, hi), u(lo, hi)};
}

bool near_box(const Box& b, const Vec3& p, double margin) {
  return std::fabs(p.x() - b.center.x()) < b.half.x() + margin &&
         std::fabs(p.y() - b.center.y()) < b.half.y() + margin &&
         std::fabs(p.z() - b.center.z()) < b.half.z() + margin;
}

constexpr double kHitEps = 1e-9;

}  // namespace

Mat3 CameraPose::world_from_camera() const {
  const double c = std::cos(yaw), s = std::sin(yaw);
  Mat3 R;
  R.col(0) = Vec3(s, -c, 0);   // right
  R.col(1) = Vec3(0, 0, -1);   // down
  R.col(2) = Vec3(c, s, 0);    // forward
  return R;
}

void Scene::validate() const {
  const double eps = 1e-9;
  for (const Box& b : boxes) {
    if (((b.center - b.half).array() < room.min.array() - eps).any() ||
        ((b.center + b.half).array() > room.max.array() + eps).any()) {
      throw std::logic_error("box extends outside the room");
    }
    if ((b.half.array() <= 0).any()) throw std::logic_error("box with non-positive extent");
  }
  const Vec3& c = camera.position;
  if ((c.array() <= room.min.array()).any() || (c.array() >= room.max.array()).any()) {
    throw std::logic_error("camera outside the room");
  }
  for (const Box& b : boxes) {
    if (near_box(b, c, 0.0)) throw std::logic_error("camera inside a box");
  }
  if (!(lidar_to_camera.t.norm() < 0.5)) throw std::logic_error("lidar offset must be < 0.5 m");
  lidar_to_camera.validate();
}

WorldPose lidar_world_pose(const Scene& scene) {
  const Mat3 Rwc = scene.camera.world_from_camera();
  WorldPose p;
  p.R = Rwc * scene.lidar_to_camera.R;
  p.t = Rwc * scene.lidar_to_camera.t + scene.camera.position;
  return p;
}

RigidTransform default_lidar_mount() {
  RigidTransform T;
  // LiDAR x forward / y left / z up onto camera x right / y down / z forward.
  T.R << 0, -1, 0,
         0, 0, -1,
         1, 0, 0;
  T.t = Vec3(0.0, 0.1, 0.05);
  return T;
}

Intrinsics default_intrinsics(int height, int width) {
  Intrinsics K;
  K.fx = K.fy = 0.8 * width;
  K.cx = width / 2.0 - 0.5;
  K.cy = height / 2.0 - 0.5;
  K.alpha = 0.0;
  K.width = width;
  K.height = height;
  return K;
}

Scene generate_scene(std::uint64_t seed, const SceneConfig& cfg) {
  if (cfg.min_boxes < 0 || cfg.max_boxes < cfg.min_boxes) {
    throw std::invalid_argument("invalid box count range");
  }
  Uniform u(seed);
  Scene s;
  s.lidar_to_camera = cfg.lidar_to_camera;
  const double sx = u(cfg.room_min, cfg.room_max), sy = u(cfg.room_min, cfg.room_max);
  const double ceiling = u(cfg.ceiling_min, cfg.ceiling_max);
  s.room.min = Vec3(-sx / 2, -sy / 2, 0.0);
  s.room.max = Vec3(sx / 2, sy / 2, ceiling);
  for (auto& a : s.room.albedo) a = random_albedo(u, 0.35, 0.9);

  if (cfg.fronto_parallel) {
    const double dist = u(1.5, 2.5);
    s.camera.position = Vec3(sx / 2 - dist, 0.0, cfg.camera_height);
    s.camera.yaw = 0.0;
    s.validate();
    return s;
  }

  const int n_boxes = u.integer(cfg.min_boxes, cfg.max_boxes);
  for (int i = 0; i < n_boxes; ++i) {
    Box b;
    b.half = Vec3(u(0.2, 0.7), u(0.2, 0.7), 0.0);
    b.half.z() = std::min(u(0.4, 2.0), ceiling - 0.05) / 2.0;
    b.center = Vec3(u(s.room.min.x() + b.half.x(), s.room.max.x() - b.half.x()),
                    u(s.room.min.y() + b.half.y(), s.room.max.y() - b.half.y()), b.half.z());
    b.albedo = random_albedo(u, 0.1, 1.0);
    s.boxes.push_back(b);
  }
  const double margin = 0.5;
  for (int attempt = 0;; ++attempt) {
    const Vec3 c(u(s.room.min.x() + margin, s.room.max.x() - margin),
                 u(s.room.min.y() + margin, s.room.max.y() - margin), cfg.camera_height);
    const bool clear = std::none_of(s.boxes.begin(), s.boxes.end(),
                                    [&](const Box& b) { return near_box(b, c, 0.4); });
    if (clear) {
      s.camera.position = c;
      break;
    }
    if (attempt > 200) {
      // Crowded room: drop the last box and retry.
      s.boxes.pop_back();
      attempt = 0;
    }
  }
  s.camera.yaw = u(-std::numbers::pi, std::numbers::pi);
  s.validate();
  return s;
}

std::optional<RayHit> cast_ray(const Scene& scene, const Vec3& o, const Vec3& d) {
  std::optional<RayHit> best;
  // Room interior: leave through the nearest face in the direction of travel.
  for (int a = 0; a < 3; ++a) {
    if (d[a] == 0.0) continue;
    const bool positive = d[a] > 0.0;
    const double bound = positive ? scene.room.max[a] : scene.room.min[a];
    const double t = (bound - o[a]) / d[a];
    if (t > kHitEps && (!best || t < best->t)) {
      RayHit h;
      h.t = t;
      h.normal = Vec3::Zero();
      h.normal[a] = positive ? -1.0 : 1.0;
      h.albedo = scene.room.albedo[static_cast<std::size_t>(2 * a + (positive ? 1 : 0))];
      best = h;
    }
  }
  for (const Box& b : scene.boxes) {
    double t_near = -std::numeric_limits<double>::infinity();
    double t_far = std::numeric_limits<double>::infinity();
    int axis = -1;
    bool miss = false;
    for (int a = 0; a < 3 && !miss; ++a) {
      const double lo = b.center[a] - b.half[a], hi = b.center[a] + b.half[a];
      if (d[a] == 0.0) {
        if (o[a] < lo || o[a] > hi) miss = true;
        continue;
      }
      double t1 = (lo - o[a]) / d[a], t2 = (hi - o[a]) / d[a];
      if (t1 > t2) std::swap(t1, t2);
      if (t1 > t_near) {
        t_near = t1;
        axis = a;
      }
      t_far = std::min(t_far, t2);
    }
    if (miss || axis < 0 || t_near > t_far || !(t_near > kHitEps)) continue;
    if (!best || t_near < best->t) {
      RayHit h;
      h.t = t_near;
      h.normal = Vec3::Zero();
      h.normal[axis] = d[axis] > 0.0 ? -1.0 : 1.0;
      h.albedo = b.albedo;
      best = h;
    }
  }
  return best;
}

namespace {

Vec3 pixel_ray_camera(const Intrinsics& K, int u, int v) {
  const double y = (v - K.cy) / K.fy;
  const double x = (u - K.cx - K.alpha * y) / K.fx;
  return Vec3(x, y, 1.0);
}

}  // namespace

DepthImage render_depth(const Scene& scene, const Intrinsics& K) {
  K.validate();
  const Mat3 Rwc = scene.camera.world_from_camera();
  DepthImage img({K.height, K.width});
  for (int v = 0; v < K.height; ++v) {
    for (int u = 0; u < K.width; ++u) {
      // The camera-frame ray has unit z, so the hit parameter is the z depth.
      const Vec3 d = Rwc * pixel_ray_camera(K, u, v);
      if (auto hit = cast_ray(scene, scene.camera.position, d)) {
        img.at(v, u) = static_cast<float>(hit->t);
      }
    }
  }
  return img;
}

Vec3 light_direction() { return Vec3(0.4, 0.3, 0.866).normalized(); }

Tensor render_rgb(const Scene& scene, const Intrinsics& K) {
  K.validate();
  const Mat3 Rwc = scene.camera.world_from_camera();
  const Vec3 L = light_direction();
  const std::int64_t H = K.height, W = K.width;
  Tensor rgb({3, H, W});
  for (int v = 0; v < K.height; ++v) {
    for (int u = 0; u < K.width; ++u) {
      const Vec3 d = Rwc * pixel_ray_camera(K, u, v);
      auto hit = cast_ray(scene, scene.camera.position, d);
      if (!hit) continue;
      const double shade = kAmbient + (1.0 - kAmbient) * std::max(0.0, hit->normal.dot(L));
      for (int c = 0; c < 3; ++c) {
        const double val = std::clamp(hit->albedo[static_cast<std::size_t>(c)] * shade, 0.0, 1.0);
        rgb[(c * H + v) * W + u] = static_cast<float>(val);
      }
    }
  }
  return rgb;
}

LaserScan simulate_scan(const Scene& scene, const WorldPose& pose, const ScanConfig& cfg) {
  if (cfg.n_beams < 1) throw std::invalid_argument("scan needs at least one beam");
  if (!(cfg.fov_rad > 0.0) || !(cfg.r_max > 0.0)) throw std::invalid_argument("invalid scan config");
  LaserScan scan;
  std::mt19937_64 rng(cfg.noise_seed);
  std::normal_distribution<double> noise(0.0, cfg.noise_sigma > 0.0 ? cfg.noise_sigma : 1.0);
  for (int i = 0; i < cfg.n_beams; ++i) {
    const double th = cfg.n_beams == 1
                          ? 0.0
                          : -cfg.fov_rad / 2.0 + cfg.fov_rad * i / static_cast<double>(cfg.n_beams - 1);
    const Vec3 d = pose.R * Vec3(std::cos(th), std::sin(th), 0.0);
    auto hit = cast_ray(scene, pose.t, d);
    double r = hit ? hit->t : -1.0;
    if (hit && cfg.noise_sigma > 0.0) r += noise(rng);
    const bool ok = hit && r > 0.0 && r <= cfg.r_max;
    scan.angles.push_back(th);
    scan.ranges.push_back(ok ? r : -1.0);
    scan.valid.push_back(ok);
  }
  return scan;
}

LaserScan simulate_scan(const Scene& scene, const ScanConfig& cfg) {
  return simulate_scan(scene, lidar_world_pose(scene), cfg);
}

LaserScan simulate_2d_from_pointcloud(const std::vector<Vec3>& cloud, double band,
                                      double resolution) {
  if (cloud.empty()) throw std::invalid_argument("point cloud is empty");
  if (!(resolution > 0.0) || !(band >= 0.0)) throw std::invalid_argument("invalid band/resolution");
  const double two_pi = 2.0 * std::numbers::pi;
  const auto n_bins = static_cast<std::size_t>(std::llround(two_pi / resolution));
  LaserScan scan;
  scan.angles.resize(n_bins);
  scan.ranges.assign(n_bins, -1.0);
  scan.valid.assign(n_bins, false);
  for (std::size_t i = 0; i < n_bins; ++i) {
    scan.angles[i] = -std::numbers::pi + (static_cast<double>(i) + 0.5) * resolution;
  }
  for (const Vec3& p : cloud) {
    const double planar = std::hypot(p.x(), p.y());
    if (!(planar > 0.0)) continue;
    if (std::fabs(std::atan2(p.z(), planar)) > band) continue;
    const double az = std::atan2(p.y(), p.x());
    auto bin = static_cast<std::size_t>(std::floor((az + std::numbers::pi) / resolution));
    bin = std::min(bin, n_bins - 1);
    if (!scan.valid[bin] || planar < scan.ranges[bin]) {
      scan.ranges[bin] = planar;
      scan.valid[bin] = true;
    }
  }
  return scan;
}

SceneSample make_sample(std::uint64_t seed, int height, int width, const SceneConfig& scene_cfg,
                        const ScanConfig& scan_cfg) {
  const Scene scene = generate_scene(seed, scene_cfg);
  SceneSample s;
  s.rig.K = default_intrinsics(height, width);
  s.rig.lidar_to_camera = scene.lidar_to_camera;
  s.rgb = render_rgb(scene, s.rig.K);
  s.gt_depth = render_depth(scene, s.rig.K);
  ScanConfig sc = scan_cfg;
  sc.noise_seed ^= seed;
  s.scan = simulate_scan(scene, sc);
  return s;
}

}  // namespace msdpn
