#pragma once

#include "msdpn/tensor.hpp"

#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <vector>

namespace msdpn::ad {

struct Node {
  Tensor value;
  Tensor grad;  // empty until something flows into it
  // Full-precision value of scalar reductions (NaN when not a reduction).
  double scalar64 = std::numeric_limits<double>::quiet_NaN();
  bool requires_grad = false;
  bool consumed = false;  // set once backward has run through this node
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  bool is_leaf() const { return !backward_fn && parents.empty(); }
  /// Zero-initialized gradient buffer shaped like value.
  Tensor& grad_buffer();
};

/// Handle to a graph node. Cheap to copy; copies alias the same node.
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Var constant(Tensor value);
  static Var leaf(Tensor value);  // requires grad

  bool defined() const { return node_ != nullptr; }
  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Tensor& grad() const { return node_->grad; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_->requires_grad; }
  /// Scalar value, at 64-bit precision when produced by a reduction.
  double item() const;
  Node& node() const { return *node_; }
  const std::shared_ptr<Node>& ptr() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// Learnable tensor with a gradient accumulator and a unique dotted name.
struct Parameter {
  std::string name;
  Var var;

  Parameter() = default;
  Parameter(std::string n, Tensor value) : name(std::move(n)), var(Var::leaf(std::move(value))) {}

  Tensor& value() { return var.mutable_value(); }
  const Tensor& value() const { return var.value(); }
  Tensor& grad() { return var.node().grad_buffer(); }
  void zero_grad();
};

/// Disables graph recording on this thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

struct BatchNormStats {
  Tensor mean;
  Tensor var;
};

// Operators. All throw ShapeError on mismatched shapes.

/// input N x C x H x W, weight O x C x k x k, bias O (or undefined).
Var conv2d(const Var& input, const Var& weight, const Var& bias, int stride, int pad);
Var batchnorm2d(const Var& input, const Var& gamma, const Var& beta, BatchNormStats& running,
                bool train, double momentum = 0.1, double eps = 1e-5);
Var relu(const Var& x);
Var maxpool2d(const Var& x, int kernel, int stride, int pad);
Var add(const Var& a, const Var& b);
Var scale(const Var& x, float s);
Var concat_channels(const Var& a, const Var& b);
Var upsample_bilinear_x2(const Var& x);
Var unpool_zero_x2(const Var& x);
Var clamp_min(const Var& x, float lo);
Var sum(const Var& x);
/// sum(x * w) for a constant w.
Var weighted_sum(const Var& x, const Tensor& w);
/// (1 / sum(mask)) * sum(mask * |target - pred|).
Var l1_masked(const Var& pred, const Tensor& target, const Tensor& mask);

/// Reverse-mode accumulation into every reachable leaf that requires grad.
void backward(const Var& loss);

struct GradcheckOptions {
  double eps = 1e-3;
  int max_samples = 64;
  std::uint64_t seed = 0;
  /// Coordinates for which this returns false are not sampled.
  std::function<bool(std::int64_t)> eligible;
  /// Skip coordinates whose +-eps evaluations take a different branch in any
  /// relu, clamp, max-pool or |.| than the unperturbed one.
  bool skip_kink_crossings = true;
  /// On a crossing, retry with the step divided by 4 this many times.
  int kink_retries = 0;
  /// Coordinates whose predicted loss change |g| * step falls below this are
  /// not sampled; their difference quotient is float rounding.
  double min_signal = 0.0;
};

struct GradcheckResult {
  double max_rel_error = 0.0;
  int n_checked = 0;
  int n_excluded = 0;  // kink crossings
  int n_below_floor = 0;
  std::int64_t worst_index = -1;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

/// Compares backward() against central differences of loss_fn with respect to
/// the leaf `wrt`. loss_fn must rebuild the graph on each call.
GradcheckResult gradcheck(const std::function<Var()>& loss_fn, Var wrt,
                          const GradcheckOptions& opts = {});

}  // namespace msdpn::ad
