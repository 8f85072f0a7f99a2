#pragma once

// Checks shared by the unit suites and the acceptance binary.

#include "msdpn/autodiff.hpp"
#include "msdpn/datagen.hpp"
#include "msdpn/nn.hpp"

#include <cmath>
#include <map>
#include <random>
#include <string>
#include <vector>

namespace checks {

using namespace msdpn;

struct LayerGradcheck {
  std::string kind;
  std::string param;
  ad::GradcheckResult result;
};

// Layer kind of a parameter name, e.g. "stage1.csfa3.phi.weight" -> "csfa.phi".
inline std::string layer_kind(const std::string& name) {
  auto has = [&](const char* s) { return name.find(s) != std::string::npos; };
  const std::string leaf = name.substr(name.rfind('.') + 1);
  if (has(".stem.")) return "stem.conv";
  if (has(".stem_bn.")) return "bn." + leaf;
  if (has(".csfa")) return has(".phi.") ? "csfa.phi" : "csfa.psi";
  if (has("_bn.") || has(".bn")) return "bn." + leaf;
  if (has(".down.")) return "block.down";
  if (has(".layer")) return "block.conv";
  if (has(".shortcut.")) return "up.shortcut";
  if (has(".up4.conv2")) return "up.conv2";
  if (has(".up") && has(".conv2.")) return "up_cat.conv2";
  if (has(".up") && has(".conv1.")) return "up.conv1";
  if (has(".head.")) return "head." + leaf;
  return "other";
}

// Gradcheck of a full model in eval mode. The readout is one pixel of the raw
// head output for a single random input, which keeps the number of relu/max
// branches a perturbation can flip small. Running statistics are settled first
// so the normalized activations look like they do after training.
// For each distinct layer kind, parameters are tried in a seeded order until
// one yields checked coordinates.
inline std::vector<LayerGradcheck> network_gradcheck(const nn::NetworkConfig& cfg, std::uint64_t seed,
                                                     int samples, double eps = 1e-2, int kink_retries = 2) {
  auto model = nn::Model::build(cfg, seed);
  std::mt19937_64 rng(seed + 1);
  std::uniform_real_distribution<float> u01(0.0f, 1.0f);
  const bool residual = cfg.input_mode == InputMode::RefD;
  auto random_batch = [&](int n) {
    Tensor x({n, cfg.input_channels, cfg.height, cfg.width});
    for (auto& v : x.values()) v = u01(rng);
    Tensor r({n, 1, cfg.height, cfg.width});
    for (auto& v : r.values()) v = 1.0f + 3.0f * u01(rng);
    return std::pair{x, r};
  };
  // φ/ψ start at zero, which would leave the earlier stage without a path to the output
  for (ad::Parameter* p : model->parameters()) {
    if (p->name.find(".csfa") != std::string::npos) {
      std::normal_distribution<float> n(0.0f, 0.05f);
      for (auto& v : p->value().values()) v = n(rng);
    }
  }
  {
    ad::NoGradGuard ng;
    for (int i = 0; i < 20; ++i) {
      auto [x, r] = random_batch(8);
      model->forward(x, residual ? &r : nullptr, true);
    }
  }
  const auto [input, ref] = random_batch(1);
  Tensor w({1, 1, cfg.height, cfg.width});
  w.at(0, 0, cfg.height / 2, cfg.width / 2) = 1.0f;

  auto loss = [&] {
    nn::ForwardResult r = model->forward(input, residual ? &ref : nullptr, false);
    return ad::weighted_sum(r.head, w);
  };

  model->store().zero_grad();
  const ad::Var l0 = loss();
  // a difference quotient is only meaningful above the float32 resolution of the loss
  const double min_signal = 256.0 * std::ldexp(1.0, -24) * std::max(1.0, std::fabs(l0.item()));
  ad::backward(l0);
  // parameters with no path to the last head (an earlier stage's own head) have zero gradient
  std::map<std::string, std::vector<ad::Parameter*>> by_kind;
  for (ad::Parameter* p : model->parameters()) {
    bool reaches = false;
    for (float g : p->grad().values()) reaches = reaches || g != 0.0f;
    if (reaches) by_kind[layer_kind(p->name)].push_back(p);
  }
  std::vector<LayerGradcheck> out;
  for (auto& [kind, params] : by_kind) {
    std::shuffle(params.begin(), params.end(), rng);
    LayerGradcheck best{kind, params.front()->name, {}};
    for (ad::Parameter* p : params) {
      ad::GradcheckOptions o;
      o.max_samples = samples;
      o.seed = seed;
      o.eps = eps;
      o.kink_retries = kink_retries;
      o.min_signal = min_signal;
      model->store().zero_grad();
      best = {kind, p->name, ad::gradcheck(loss, p->var, o)};
      if (best.result.n_checked > 0) break;
    }
    out.push_back(best);
  }
  return out;
}

}  // namespace checks

namespace checks {

struct RigConsistency {
  std::size_t hits = 0;
  std::size_t within = 0;  // |hit depth - gt| <= tolerance
  double max_error = 0.0;
};

inline RigConsistency rig_consistency(const SceneSample& s, double tol) {
  RigConsistency r;
  for (const PixelHit& h : project_scan(s.scan, s.rig.lidar_to_camera, s.rig.K)) {
    const double err = std::fabs(h.depth - s.gt_depth.at(h.v, h.u));
    ++r.hits;
    r.within += err <= tol;
    r.max_error = std::max(r.max_error, err);
  }
  return r;
}

}  // namespace checks
