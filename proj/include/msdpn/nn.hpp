#pragma once

#include "msdpn/autodiff.hpp"
#include "msdpn/encoding.hpp"

#include <array>
#include <cstdint>
#include <deque>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace msdpn::nn {

using ad::Var;

/// Cross-stage aggregation variant: plain stacking, parameter-free
/// connection, or connection through learnable 1x1 convolutions.
enum class CsfaMode { None, Connect, Full };

std::string_view to_string(CsfaMode mode);
CsfaMode parse_csfa_mode(std::string_view s);  // "none" | "connect" | "full"

struct NetworkConfig {
  int stages = 2;
  double width_mult = 1.0;
  int input_channels = 4;
  CsfaMode csfa = CsfaMode::Full;
  InputMode input_mode = InputMode::RefD;
  int height = 64;
  int width = 64;
  bool stage_losses = false;  // supervise every stage head, not just the last

  /// Throws ConfigError.
  void validate() const;
  /// Channel count for a ResNet-18 base width (64, 128, 256, 512).
  int channels(int base) const;
};

/// Owns parameters and batch-norm buffers with stable addresses.
class ParameterStore {
 public:
  ad::Parameter& add(const std::string& name, Tensor value);
  ad::BatchNormStats& add_bn_stats(const std::string& name, std::int64_t channels);

  ad::Parameter* find(std::string_view name);
  ad::BatchNormStats* find_bn_stats(std::string_view name);

  std::vector<ad::Parameter*> parameters();
  std::vector<std::pair<std::string, ad::BatchNormStats*>> bn_stats();
  std::int64_t element_count() const;
  void zero_grad();

 private:
  std::deque<ad::Parameter> params_;
  std::deque<std::pair<std::string, ad::BatchNormStats>> stats_;
};

struct Conv {
  ad::Parameter* weight = nullptr;
  ad::Parameter* bias = nullptr;
  int stride = 1;
  int pad = 0;

  Var operator()(const Var& x) const;
};

struct BatchNorm {
  ad::Parameter* gamma = nullptr;
  ad::Parameter* beta = nullptr;
  ad::BatchNormStats* stats = nullptr;

  Var operator()(const Var& x, bool train) const;
};

enum class ConvInit { HeNormal, Zero };

/// Creates named layers in a store, drawing He-normal weights from one seeded stream.
class LayerFactory {
 public:
  LayerFactory(ParameterStore& store, std::uint64_t seed) : store_(store), rng_(seed) {}

  Conv conv(const std::string& name, int in, int out, int k, int stride, int pad, bool bias,
            ConvInit init = ConvInit::HeNormal);
  BatchNorm batchnorm(const std::string& name, int channels);

 private:
  ParameterStore& store_;
  std::mt19937_64 rng_;
};

/// conv3x3-BN-ReLU-conv3x3-BN plus identity or 1x1 projection skip, then ReLU.
struct BasicBlock {
  Conv conv1, conv2;
  BatchNorm bn1, bn2;
  std::optional<Conv> down;
  std::optional<BatchNorm> down_bn;

  static BasicBlock make(LayerFactory& f, const std::string& name, int in, int out, int stride);
  Var operator()(const Var& x, bool train) const;
};

/// Up-projection: zero-unpool x2, then a 5x5-BN-ReLU-3x3-BN branch summed with
/// a 5x5-BN shortcut branch, then ReLU. With a skip input the skip feature is
/// concatenated after the first 5x5 stage.
struct UpProj {
  Conv conv1, conv2, shortcut;
  BatchNorm bn1, bn2, shortcut_bn;
  int skip_channels = 0;

  static UpProj make(LayerFactory& f, const std::string& name, int in, int out, int skip);
  Var operator()(const Var& x, const Var* skip, bool train) const;
};

/// X_cur, or X_cur + X_prev + Y_prev, or X_cur + phi(X_prev) + psi(Y_prev).
Var csfa_aggregate(const Var& x_cur, const Var& x_prev, const Var& y_prev, CsfaMode mode,
                   const Conv* phi, const Conv* psi);

/// Features tapped for cross-stage aggregation; index 0..2 is block k = 2..4.
struct StageFeatures {
  std::array<Var, 3> X;  // encoder block inputs (after aggregation)
  std::array<Var, 3> Y;  // decoder outputs paired with X by shape
  Var bottleneck;
  Var head;  // N x 1 x H x W
};

struct ForwardResult {
  Var depth;      // final prediction (clamped at 0 in ref-d mode)
  Var head;       // raw last-stage head output
  Var pre_clamp;  // head + ref-d in ref-d mode, head otherwise
  std::vector<StageFeatures> stages;
};

struct Stage {
  Conv stem;
  BatchNorm stem_bn;
  std::array<std::array<BasicBlock, 2>, 4> layers;
  std::array<std::optional<Conv>, 3> phi, psi;
  std::array<UpProj, 4> up;
  Conv head;

  StageFeatures forward(const Var& input, const StageFeatures* prev, CsfaMode mode,
                        bool train) const;
};

class Model {
 public:
  static std::unique_ptr<Model> build(const NetworkConfig& config, std::uint64_t seed);

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const NetworkConfig& config() const { return config_; }
  ParameterStore& store() { return store_; }
  std::vector<ad::Parameter*> parameters() { return store_.parameters(); }
  std::int64_t param_count() const { return store_.element_count(); }
  int csfa_conv_count() const;
  const std::vector<Stage>& stages() const { return stages_; }

  /// input N x C x H x W; ref_d N x 1 x H x W, required iff the input mode is ref-d.
  ForwardResult forward(const Tensor& input, const Tensor* ref_d, bool train);

 private:
  Model() = default;

  NetworkConfig config_;
  ParameterStore store_;
  std::vector<Stage> stages_;
};

/// Single-sample inference. Returns depth 1 x H x W and per-stage features.
ForwardResult msdpn_forward(Model& model, const InputTensor& input, const DepthImage* ref_d);

std::int64_t param_count(const Model& model);

}  // namespace msdpn::nn
