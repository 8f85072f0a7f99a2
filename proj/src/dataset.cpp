#include "msdpn/dataset.hpp"

#include "msdpn/errors.hpp"
#include "msdpn/tensor_io.hpp"

#include <json.hpp>

#include <fstream>

namespace msdpn {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json load_json(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw MissingFileError(path.string());
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void save_json(const fs::path& path, const json& j) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw MissingFileError(path.string());
  os << j.dump(2) << '\n';
}

void require_file(const fs::path& p) {
  if (!fs::is_regular_file(p)) throw MissingFileError(p.string());
}

}  // namespace

void write_rig_json(const fs::path& path, const CameraRig& rig) {
  json j;
  j["intrinsics"] = {{"fx", rig.K.fx},       {"fy", rig.K.fy},         {"cx", rig.K.cx},
                     {"cy", rig.K.cy},       {"alpha", rig.K.alpha},   {"width", rig.K.width},
                     {"height", rig.K.height}};
  std::vector<double> R;
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) R.push_back(rig.lidar_to_camera.R(r, c));
  }
  j["R"] = R;
  j["t"] = {rig.lidar_to_camera.t.x(), rig.lidar_to_camera.t.y(), rig.lidar_to_camera.t.z()};
  save_json(path, j);
}

CameraRig read_rig_json(const fs::path& path) {
  const json j = load_json(path);
  CameraRig rig;
  try {
    const json& k = j.at("intrinsics");
    rig.K.fx = k.at("fx").get<double>();
    rig.K.fy = k.at("fy").get<double>();
    rig.K.cx = k.at("cx").get<double>();
    rig.K.cy = k.at("cy").get<double>();
    rig.K.alpha = k.at("alpha").get<double>();
    rig.K.width = k.at("width").get<int>();
    rig.K.height = k.at("height").get<int>();
    const auto R = j.at("R").get<std::vector<double>>();
    const auto t = j.at("t").get<std::vector<double>>();
    if (R.size() != 9 || t.size() != 3) throw FormatError(path.string() + ": R needs 9 and t 3 values");
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) rig.lidar_to_camera.R(r, c) = R[static_cast<std::size_t>(3 * r + c)];
    }
    rig.lidar_to_camera.t = Vec3(t[0], t[1], t[2]);
    rig.K.validate();
    rig.lidar_to_camera.validate();
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  } catch (const std::invalid_argument& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  return rig;
}

void write_sample(const fs::path& dir, const SceneSample& s) {
  const fs::path sd = dir / s.id;
  fs::create_directories(sd);
  write_tensor(sd / "rgb.msdt", s.rgb);
  write_tensor(sd / "depth.msdt", s.gt_depth);
  write_scan_csv(sd / "scan.csv", s.scan);
  write_rig_json(sd / "rig.json", s.rig);
}

void write_manifest(const fs::path& dir, const std::vector<std::string>& ids) {
  fs::create_directories(dir);
  json samples = json::array();
  for (const auto& id : ids) samples.push_back({{"id", id}});
  save_json(dir / "manifest.json", {{"format", "msdpn-dataset"}, {"version", 1}, {"samples", samples}});
}

void write_dataset(const fs::path& dir, const std::vector<SceneSample>& samples) {
  std::vector<std::string> ids;
  for (const auto& s : samples) {
    write_sample(dir, s);
    ids.push_back(s.id);
  }
  write_manifest(dir, ids);
}

std::vector<std::string> read_manifest(const fs::path& dir) {
  const fs::path mp = dir / "manifest.json";
  const json j = load_json(mp);
  std::vector<std::string> ids;
  try {
    if (j.at("format").get<std::string>() != "msdpn-dataset" || j.at("version").get<int>() != 1) {
      throw FormatError(mp.string() + ": not an msdpn-dataset v1 manifest");
    }
    for (const auto& s : j.at("samples")) ids.push_back(s.at("id").get<std::string>());
  } catch (const json::exception& e) {
    throw FormatError(mp.string() + ": " + e.what());
  }
  return ids;
}

SceneSample read_sample(const fs::path& dir, const std::string& id) {
  const fs::path sd = dir / id;
  for (const char* f : {"rgb.msdt", "depth.msdt", "scan.csv", "rig.json"}) require_file(sd / f);
  SceneSample s;
  s.id = id;
  s.rgb = read_tensor(sd / "rgb.msdt");
  s.gt_depth = read_tensor(sd / "depth.msdt");
  s.scan = read_scan_csv(sd / "scan.csv");
  s.rig = read_rig_json(sd / "rig.json");
  const Shape hw{s.rig.K.height, s.rig.K.width};
  if (s.gt_depth.shape() != hw || s.rgb.shape() != Shape{3, hw[0], hw[1]}) {
    throw FormatError(sd.string() + ": image shapes disagree with rig.json");
  }
  return s;
}

std::vector<SceneSample> read_dataset(const fs::path& dir) {
  std::vector<SceneSample> out;
  for (const auto& id : read_manifest(dir)) out.push_back(read_sample(dir, id));
  return out;
}

}  // namespace msdpn
