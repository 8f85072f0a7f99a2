#pragma once

#include "msdpn/datagen.hpp"
#include "msdpn/nn.hpp"
#include "msdpn/train.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>

#include <json.hpp>

namespace msdpn::cli {

enum ExitCode : int { kOk = 0, kBadArgs = 1, kBadInput = 2, kInternal = 3 };

struct DataConfig {
  std::string train;  // dataset dir; empty = synthesize in memory
  std::string test;
  int synth_train = 8;
  int synth_test = 0;
  std::uint64_t synth_seed = 0;
  int beams = 1081;
  std::uint64_t test_seed_offset = 1000000;  // test scenes come from a disjoint seed range
};

struct EvalConfig {
  bool enabled = true;
  std::string report = "eval.csv";  // relative to the output directory
};

/// Run configuration with sections data, model, train, eval.
struct RunConfig {
  DataConfig data;
  nn::NetworkConfig model;
  std::uint64_t init_seed = 0;
  TrainConfig train;
  EvalConfig eval;

  void validate() const;
};

/// Throws ConfigError on unknown keys, wrong types or invalid values.
RunConfig parse_run_config(const nlohmann::json& j);
nlohmann::json to_json(const RunConfig& c);

/// Sample seed for index i of a dataset generated from `seed`.
std::uint64_t sample_seed(std::uint64_t seed, std::uint64_t i);
std::string sample_id(std::uint64_t i);

std::vector<SceneSample> synthesize(int n, std::uint64_t seed, int height, int width, int beams,
                                    bool fronto_parallel = false);

/// Entry point shared by the executable and tests. Returns an ExitCode.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace msdpn::cli
