#pragma once

#include "msdpn/datagen.hpp"
#include "msdpn/nn.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

namespace msdpn {

struct TrainConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;  // decoupled
  double lr_decay = 0.98;      // per-epoch multiplier on lr
  int epochs = 30;
  int batch_size = 20;
  std::uint64_t seed = 0;
  InputMode input_mode = InputMode::RefD;
  int checkpoint_every = 0;  // epochs; 0 = final checkpoint only

  /// Throws ConfigError.
  void validate() const;
};

/// Adam moments keyed by parameter name.
struct OptimState {
  std::map<std::string, Tensor> m;
  std::map<std::string, Tensor> v;
  std::int64_t step = 0;
};

struct TrainState {
  OptimState optim;
  int epoch = 0;  // completed epochs
  std::vector<double> loss_trace;
};

/// Masked-mean L1 over pixels with gt > 0. pred N x 1 x H x W; gt with the same
/// element count (H x W accepted for N = 1).
ad::Var loss_proj(const ad::Var& pred, const Tensor& gt);
/// Masked-mean L1 between pred_res + ref_d and gt over gt > 0.
ad::Var loss_ref(const ad::Var& pred_res, const Tensor& ref_d, const Tensor& gt);

/// Bias-corrected Adam with decoupled weight decay applied before the update.
void adam_step(const std::vector<ad::Parameter*>& params, OptimState& state, double lr_t,
               const TrainConfig& cfg);

double lr_schedule(double base_lr, int epoch, double decay = 0.98);

/// Network-ready form of one sample.
struct TrainingSample {
  std::string id;
  Tensor input;  // C x H x W
  Tensor ref_d;  // H x W (all-zero unless ref-d mode)
  Tensor gt;     // H x W
};

/// Projects the scan, builds the depth channel for `mode`, optionally after
/// scan dropout with the given keep fraction and seed.
TrainingSample prepare_sample(const SceneSample& s, InputMode mode, double keep_fraction = 1.0,
                              std::uint64_t dropout_seed = 0);

struct TrainCallbacks {
  std::function<void(const TrainState&)> on_epoch_end;
};

/// Runs epochs state.epoch .. cfg.epochs-1. Deterministic for a fixed seed;
/// resuming from a saved state reproduces the uninterrupted run.
void train(nn::Model& model, const std::vector<TrainingSample>& data, const TrainConfig& cfg,
           TrainState& state, const TrainCallbacks& callbacks = {});

// Checkpoint: "MSDC", u8 version = 1, u32 LE entry count, then per entry a
// u16 LE name length, the UTF-8 name and an embedded tensor record.
// Moments are stored as "<param>.m" / "<param>.v", the step as "__step".

void save_checkpoint(const std::filesystem::path& path, nn::Model& model, const TrainState& state);

struct LoadedCheckpoint {
  std::unique_ptr<nn::Model> model;
  TrainState state;
};

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace msdpn
