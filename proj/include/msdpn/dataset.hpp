#pragma once

#include "msdpn/datagen.hpp"

#include <filesystem>
#include <vector>

namespace msdpn {

// Dataset directory layout:
//   manifest.json                {"format": "msdpn-dataset", "version": 1, "samples": [{"id": ...}]}
//   <id>/rgb.msdt                3 x H x W
//   <id>/depth.msdt              H x W ground truth
//   <id>/scan.csv
//   <id>/rig.json                intrinsics, R (row-major 3x3), t

void write_rig_json(const std::filesystem::path& path, const CameraRig& rig);
CameraRig read_rig_json(const std::filesystem::path& path);

void write_sample(const std::filesystem::path& dataset_dir, const SceneSample& sample);
void write_manifest(const std::filesystem::path& dataset_dir, const std::vector<std::string>& ids);
void write_dataset(const std::filesystem::path& dir, const std::vector<SceneSample>& samples);

std::vector<std::string> read_manifest(const std::filesystem::path& dir);
SceneSample read_sample(const std::filesystem::path& dir, const std::string& id);
std::vector<SceneSample> read_dataset(const std::filesystem::path& dir);

}  // namespace msdpn
