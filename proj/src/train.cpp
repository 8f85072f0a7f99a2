#include "msdpn/train.hpp"

#include "msdpn/errors.hpp"
#include "msdpn/tensor_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <random>
#include <set>

namespace msdpn {

using ad::Var;

void TrainConfig::validate() const {
  if (!(lr >= 0.0)) throw ConfigError("lr must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("Adam betas must lie in [0, 1)");
  }
  if (!(eps > 0.0)) throw ConfigError("eps must be > 0");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
  if (!(lr_decay > 0.0 && lr_decay <= 1.0)) throw ConfigError("lr_decay must lie in (0, 1]");
  if (epochs < 0) throw ConfigError("epochs must be >= 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be >= 0");
}

namespace {

Tensor validity_mask(const Tensor& gt) {
  Tensor mask(gt.shape());
  for (std::int64_t i = 0; i < gt.numel(); ++i) mask[i] = gt[i] > 0.0f ? 1.0f : 0.0f;
  return mask;
}

Tensor as_shape_of(const Tensor& t, const Shape& shape, const char* what) {
  if (t.numel() != shape_numel(shape)) {
    throw ShapeError(std::string(what) + " " + shape_str(t.shape()) + " does not match prediction " +
                     shape_str(shape));
  }
  return t.shape() == shape ? t : t.reshaped(shape);
}

}  // namespace

Var loss_proj(const Var& pred, const Tensor& gt) {
  const Tensor g = as_shape_of(gt, pred.shape(), "ground truth");
  return ad::l1_masked(pred, g, validity_mask(g));
}

Var loss_ref(const Var& pred_res, const Tensor& ref_d, const Tensor& gt) {
  const Tensor g = as_shape_of(gt, pred_res.shape(), "ground truth");
  const Tensor r = as_shape_of(ref_d, pred_res.shape(), "reference depth");
  return ad::l1_masked(ad::add(pred_res, Var::constant(r)), g, validity_mask(g));
}

void adam_step(const std::vector<ad::Parameter*>& params, OptimState& state, double lr_t,
               const TrainConfig& cfg) {
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  for (ad::Parameter* p : params) {
    Tensor& w = p->value();
    const Tensor& g = p->grad();
    if (g.shape() != w.shape()) throw ShapeError("gradient shape mismatch for " + p->name);
    auto [mit, m_new] = state.m.try_emplace(p->name, w.shape());
    auto [vit, v_new] = state.v.try_emplace(p->name, w.shape());
    Tensor& m = mit->second;
    Tensor& v = vit->second;
    if (m.shape() != w.shape() || v.shape() != w.shape()) {
      throw ShapeError("optimizer moment shape mismatch for " + p->name);
    }
    for (std::int64_t i = 0; i < w.numel(); ++i) {
      double wi = w[i];
      wi -= lr_t * cfg.weight_decay * wi;
      const double gi = g[i];
      const double mi = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
      const double vi = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
      m[i] = static_cast<float>(mi);
      v[i] = static_cast<float>(vi);
      wi -= lr_t * (mi / bc1) / (std::sqrt(vi / bc2) + cfg.eps);
      w[i] = static_cast<float>(wi);
    }
  }
}

double lr_schedule(double base_lr, int epoch, double decay) {
  if (epoch < 0) throw std::invalid_argument("epoch must be >= 0");
  return base_lr * std::pow(decay, epoch);
}

TrainingSample prepare_sample(const SceneSample& s, InputMode mode, double keep_fraction,
                              std::uint64_t dropout_seed) {
  const LaserScan scan = keep_fraction < 1.0 ? dropout_scan(s.scan, keep_fraction, dropout_seed) : s.scan;
  const auto hits = project_scan(scan, s.rig.lidar_to_camera, s.rig.K);
  const DepthImage proj = make_proj_d(hits, s.rig.K.height, s.rig.K.width);
  TrainingSample t;
  t.id = s.id;
  t.gt = s.gt_depth;
  t.ref_d = Tensor(proj.shape());
  if (mode == InputMode::RefD) t.ref_d = make_ref_d(proj);
  t.input = assemble_input(s.rgb, mode == InputMode::RefD ? t.ref_d : proj, mode).tensor;
  return t;
}

namespace {

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  std::mt19937_64 rng(seed ^ (0x9E3779B97F4A7C15ULL * static_cast<std::uint64_t>(epoch + 1)));
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(idx[i - 1], idx[j]);
  }
  return idx;
}

struct Batch {
  Tensor input, ref_d, gt;
};

Batch make_batch(const std::vector<TrainingSample>& data, const std::vector<std::size_t>& order,
                 std::size_t begin, std::size_t count) {
  const Tensor& first = data[order[begin]].input;
  const auto C = first.dim(0), H = first.dim(1), W = first.dim(2);
  const auto N = static_cast<std::int64_t>(count);
  Batch b{Tensor({N, C, H, W}), Tensor({N, 1, H, W}), Tensor({N, 1, H, W})};
  for (std::size_t i = 0; i < count; ++i) {
    const TrainingSample& s = data[order[begin + i]];
    if (s.input.shape() != first.shape() || s.gt.shape() != Shape{H, W}) {
      throw ShapeError("sample " + s.id + " has inconsistent shape");
    }
    const auto n = static_cast<std::int64_t>(i);
    std::copy_n(s.input.data(), C * H * W, b.input.data() + n * C * H * W);
    std::copy_n(s.ref_d.data(), H * W, b.ref_d.data() + n * H * W);
    std::copy_n(s.gt.data(), H * W, b.gt.data() + n * H * W);
  }
  return b;
}

}  // namespace

void train(nn::Model& model, const std::vector<TrainingSample>& data, const TrainConfig& cfg,
           TrainState& state, const TrainCallbacks& callbacks) {
  cfg.validate();
  const auto& mc = model.config();
  if (data.empty()) throw std::invalid_argument("training dataset is empty");
  if (cfg.input_mode != mc.input_mode) {
    throw ConfigError("training input mode " + std::string(to_string(cfg.input_mode)) +
                      " does not match model input mode " + std::string(to_string(mc.input_mode)));
  }
  const auto batch = static_cast<std::size_t>(cfg.batch_size);
  if (data.size() < batch) {
    throw ConfigError("dataset has " + std::to_string(data.size()) + " samples, fewer than batch size " +
                      std::to_string(batch));
  }
  const std::size_t n_batches = data.size() / batch;  // last partial batch dropped
  const bool residual = mc.input_mode == InputMode::RefD;
  auto params = model.parameters();

  for (int epoch = state.epoch; epoch < cfg.epochs; ++epoch) {
    const double lr_t = lr_schedule(cfg.lr, epoch, cfg.lr_decay);
    const auto order = epoch_order(data.size(), cfg.seed, epoch);
    double total = 0.0;
    for (std::size_t bi = 0; bi < n_batches; ++bi) {
      const Batch b = make_batch(data, order, bi * batch, batch);
      model.store().zero_grad();
      nn::ForwardResult r = model.forward(b.input, residual ? &b.ref_d : nullptr, true);
      auto stage_loss = [&](const Var& head) {
        return residual ? loss_ref(head, b.ref_d, b.gt) : loss_proj(head, b.gt);
      };
      Var loss = stage_loss(r.head);
      const double final_loss = loss.item();
      if (mc.stage_losses) {
        for (std::size_t s = 0; s + 1 < r.stages.size(); ++s) {
          loss = ad::add(loss, stage_loss(r.stages[s].head));
        }
      }
      ad::backward(loss);
      adam_step(params, state.optim, lr_t, cfg);
      total += final_loss;
    }
    state.loss_trace.push_back(total / static_cast<double>(n_batches));
    state.epoch = epoch + 1;
    if (callbacks.on_epoch_end) callbacks.on_epoch_end(state);
  }
}

namespace {

constexpr std::uint8_t kCkptMagic[4] = {'M', 'S', 'D', 'C'};
constexpr std::uint8_t kCkptVersion = 1;

void append_entry(std::vector<std::uint8_t>& out, const std::string& name, const Tensor& t) {
  if (name.size() > 0xFFFF) throw FormatError("checkpoint entry name too long");
  const auto len = static_cast<std::uint16_t>(name.size());
  out.push_back(static_cast<std::uint8_t>(len & 0xFF));
  out.push_back(static_cast<std::uint8_t>(len >> 8));
  out.insert(out.end(), name.begin(), name.end());
  append_tensor_record(out, t);
}

Tensor config_tensor(const nn::NetworkConfig& c) {
  return Tensor({8}, {static_cast<float>(c.stages), static_cast<float>(c.width_mult),
                      static_cast<float>(c.input_channels), static_cast<float>(c.csfa),
                      static_cast<float>(c.input_mode), static_cast<float>(c.height),
                      static_cast<float>(c.width), c.stage_losses ? 1.0f : 0.0f});
}

nn::NetworkConfig config_from(const Tensor& t) {
  if (t.shape() != Shape{8}) throw FormatError("checkpoint __config entry has wrong shape");
  nn::NetworkConfig c;
  c.stages = static_cast<int>(t[0]);
  c.width_mult = static_cast<double>(t[1]);
  c.input_channels = static_cast<int>(t[2]);
  const int csfa = static_cast<int>(t[3]), mode = static_cast<int>(t[4]);
  if (csfa < 0 || csfa > 2 || mode < 0 || mode > 2) throw FormatError("checkpoint __config has bad enum");
  c.csfa = static_cast<nn::CsfaMode>(csfa);
  c.input_mode = static_cast<InputMode>(mode);
  c.height = static_cast<int>(t[5]);
  c.width = static_cast<int>(t[6]);
  c.stage_losses = t[7] != 0.0f;
  return c;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, nn::Model& model, const TrainState& state) {
  std::vector<std::pair<std::string, const Tensor*>> entries;
  const Tensor cfg = config_tensor(model.config());
  entries.emplace_back("__config", &cfg);
  for (ad::Parameter* p : model.parameters()) entries.emplace_back(p->name, &p->value());
  for (auto& [name, st] : model.store().bn_stats()) {
    entries.emplace_back(name + ".running_mean", &st->mean);
    entries.emplace_back(name + ".running_var", &st->var);
  }
  for (const auto& [name, m] : state.optim.m) entries.emplace_back(name + ".m", &m);
  for (const auto& [name, v] : state.optim.v) entries.emplace_back(name + ".v", &v);
  const Tensor step({1}, static_cast<float>(state.optim.step));
  const Tensor epoch({1}, static_cast<float>(state.epoch));
  std::vector<float> trace(state.loss_trace.begin(), state.loss_trace.end());
  const auto n_trace = static_cast<std::int64_t>(trace.size());
  const Tensor trace_t({n_trace}, std::move(trace));
  entries.emplace_back("__step", &step);
  entries.emplace_back("__epoch", &epoch);
  entries.emplace_back("__loss_trace", &trace_t);

  std::vector<std::uint8_t> bytes(std::begin(kCkptMagic), std::end(kCkptMagic));
  bytes.push_back(kCkptVersion);
  const auto count = static_cast<std::uint32_t>(entries.size());
  for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<std::uint8_t>(count >> (8 * i)));
  for (const auto& [name, t] : entries) append_entry(bytes, name, *t);
  write_file_bytes(path, bytes);
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  const std::string where = path.string();
  try {
    if (bytes.size() < 9) throw FormatError("truncated checkpoint header", static_cast<std::int64_t>(bytes.size()));
    if (std::memcmp(bytes.data(), kCkptMagic, 4) != 0) throw FormatError("bad checkpoint magic", 0);
    if (bytes[4] != kCkptVersion) {
      throw FormatError("unsupported checkpoint version " + std::to_string(bytes[4]), 4);
    }
    std::uint32_t count = 0;
    for (int i = 0; i < 4; ++i) count |= static_cast<std::uint32_t>(bytes[5 + static_cast<std::size_t>(i)]) << (8 * i);
    std::size_t off = 9;
    std::vector<std::pair<std::string, Tensor>> entries;
    for (std::uint32_t e = 0; e < count; ++e) {
      if (off + 2 > bytes.size()) throw FormatError("truncated entry name length", static_cast<std::int64_t>(off));
      const std::size_t len = bytes[off] | (static_cast<std::size_t>(bytes[off + 1]) << 8);
      off += 2;
      if (off + len > bytes.size()) throw FormatError("truncated entry name", static_cast<std::int64_t>(off));
      std::string name(reinterpret_cast<const char*>(bytes.data() + off), len);
      off += len;
      entries.emplace_back(std::move(name), parse_tensor_record(bytes, off));
    }
    if (off != bytes.size()) throw FormatError("trailing bytes after checkpoint", static_cast<std::int64_t>(off));

    std::map<std::string, Tensor> by_name;
    for (auto& [n, t] : entries) {
      if (!by_name.emplace(n, std::move(t)).second) throw FormatError("duplicate checkpoint entry " + n);
    }
    auto take = [&](const std::string& n) -> Tensor {
      auto it = by_name.find(n);
      if (it == by_name.end()) throw FormatError("checkpoint lacks entry " + n);
      Tensor t = std::move(it->second);
      by_name.erase(it);
      return t;
    };
    nn::NetworkConfig cfg = config_from(take("__config"));
    try {
      cfg.validate();
    } catch (const ConfigError& e) {
      throw FormatError(std::string("checkpoint config invalid: ") + e.what());
    }
    LoadedCheckpoint out;
    out.model = nn::Model::build(cfg, 0);
    for (ad::Parameter* p : out.model->parameters()) {
      Tensor t = take(p->name);
      if (t.shape() != p->value().shape()) throw FormatError("shape mismatch for " + p->name);
      p->value() = std::move(t);
    }
    for (auto& [name, st] : out.model->store().bn_stats()) {
      Tensor m = take(name + ".running_mean"), v = take(name + ".running_var");
      if (m.shape() != st->mean.shape() || v.shape() != st->var.shape()) {
        throw FormatError("shape mismatch for " + name + " running statistics");
      }
      st->mean = std::move(m);
      st->var = std::move(v);
    }
    const Tensor step = take("__step"), epoch = take("__epoch"), trace = take("__loss_trace");
    if (step.numel() != 1 || epoch.numel() != 1) throw FormatError("bad __step/__epoch entry");
    out.state.optim.step = static_cast<std::int64_t>(step[0]);
    out.state.epoch = static_cast<int>(epoch[0]);
    for (float v : trace.values()) out.state.loss_trace.push_back(v);
    for (ad::Parameter* p : out.model->parameters()) {
      for (const char* suffix : {".m", ".v"}) {
        auto it = by_name.find(p->name + suffix);
        if (it == by_name.end()) continue;
        if (it->second.shape() != p->value().shape()) throw FormatError("moment shape mismatch for " + p->name);
        (suffix[1] == 'm' ? out.state.optim.m : out.state.optim.v)[p->name] = std::move(it->second);
        by_name.erase(it);
      }
    }
    if (!by_name.empty()) throw FormatError("unknown checkpoint entry " + by_name.begin()->first);
    return out;
  } catch (const FormatError& e) {
    throw e.with_context(where);
  }
}

}  // namespace msdpn
