#include "msdpn/evaluate.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <limits>
#include <mutex>
#include <stdexcept>
#include <thread>

namespace msdpn {

int worker_threads() {
  if (const char* env = std::getenv("MSDPN_THREADS")) {
    char* end = nullptr;
    const long n = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && n >= 1) return static_cast<int>(std::min<long>(n, 1024));
  }
  return std::max(1, static_cast<int>(std::thread::hardware_concurrency()));
}

namespace {

template <typename Fn>
void parallel_for(std::size_t n, int threads, Fn&& fn) {
  const auto workers = static_cast<std::size_t>(std::max(1, threads));
  if (workers == 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mu;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < std::min(workers, n); ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mu);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

EvalReport nan_report() {
  const double nan = std::numeric_limits<double>::quiet_NaN();
  EvalReport r;
  r.rmse_m = r.rel = r.mae_m = r.delta1 = r.delta2 = r.delta3 = nan;
  r.n_images = 1;
  return r;
}

EvalOutput summarize(std::vector<DepthImage> preds, const std::vector<TrainingSample>& data) {
  EvalOutput out;
  std::vector<MetricAccumulator> accs(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    accs[i].add(preds[i], data[i].gt);
    out.rows.push_back({data[i].id, accs[i].n > 0 ? EvalReport::from(accs[i], 1) : nan_report()});
  }
  out.summary = pool_reports(accs);
  out.predictions = std::move(preds);
  return out;
}

}  // namespace

EvalOutput evaluate(nn::Model& model, const std::vector<TrainingSample>& data, int threads) {
  if (data.empty()) throw std::invalid_argument("evaluation dataset is empty");
  const bool residual = model.config().input_mode == InputMode::RefD;
  std::vector<DepthImage> preds(data.size());
  parallel_for(data.size(), threads > 0 ? threads : worker_threads(), [&](std::size_t i) {
    ad::NoGradGuard no_grad;
    const TrainingSample& s = data[i];
    const auto C = s.input.dim(0), H = s.input.dim(1), W = s.input.dim(2);
    const Tensor input = s.input.reshaped({1, C, H, W});
    const Tensor ref = s.ref_d.reshaped({1, 1, H, W});
    nn::ForwardResult r = model.forward(input, residual ? &ref : nullptr, false);
    preds[i] = r.depth.value().reshaped({H, W});
  });
  return summarize(std::move(preds), data);
}

EvalOutput evaluate_predictions(const std::vector<DepthImage>& predictions,
                                const std::vector<TrainingSample>& data) {
  if (data.empty()) throw std::invalid_argument("evaluation dataset is empty");
  if (predictions.size() != data.size()) throw std::invalid_argument("prediction count mismatch");
  return summarize(predictions, data);
}

}  // namespace msdpn
