#pragma once

#include "msdpn/metrics.hpp"
#include "msdpn/nn.hpp"
#include "msdpn/train.hpp"

#include <vector>

namespace msdpn {

struct EvalOutput {
  EvalReport summary;
  std::vector<ImageReport> rows;  // NaN metrics for images without valid gt
  std::vector<DepthImage> predictions;  // H x W per sample
};

/// Worker count from MSDPN_THREADS, else hardware concurrency (at least 1).
int worker_threads();

/// Eval-mode inference per sample, pixel-pooled metrics. Per-image work runs
/// on up to `threads` workers (0 = worker_threads()); the reduction is ordered.
EvalOutput evaluate(nn::Model& model, const std::vector<TrainingSample>& data, int threads = 0);

/// Metrics of given predictions against the samples' ground truth.
EvalOutput evaluate_predictions(const std::vector<DepthImage>& predictions,
                                const std::vector<TrainingSample>& data);

}  // namespace msdpn
