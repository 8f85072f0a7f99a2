#include "msdpn/nn.hpp"

#include "msdpn/errors.hpp"

#include <cmath>
#include <stdexcept>

namespace msdpn::nn {

std::string_view to_string(CsfaMode mode) {
  switch (mode) {
    case CsfaMode::None: return "none";
    case CsfaMode::Connect: return "connect";
    case CsfaMode::Full: return "full";
  }
  return "?";
}

CsfaMode parse_csfa_mode(std::string_view s) {
  if (s == "none") return CsfaMode::None;
  if (s == "connect") return CsfaMode::Connect;
  if (s == "full") return CsfaMode::Full;
  throw ConfigError("unknown csfa mode '" + std::string(s) + "'");
}

void NetworkConfig::validate() const {
  if (stages < 1) throw ConfigError("stages must be >= 1");
  if (height <= 0 || width <= 0 || height % 32 != 0 || width % 32 != 0) {
    throw ConfigError("input height and width must be positive multiples of 32");
  }
  for (int base : {64, 128, 256, 512}) {
    const double c = width_mult * base;
    if (!(c >= 1.0) || std::fabs(c - std::round(c)) > 1e-9) {
      throw ConfigError("width_mult " + std::to_string(width_mult) +
                        " does not give an integral channel count for base " +
                        std::to_string(base));
    }
  }
  if (input_channels != msdpn::input_channels(input_mode)) {
    throw ConfigError("input_channels " + std::to_string(input_channels) +
                      " does not match input mode " + std::string(msdpn::to_string(input_mode)));
  }
}

int NetworkConfig::channels(int base) const {
  return static_cast<int>(std::lround(width_mult * base));
}

ad::Parameter& ParameterStore::add(const std::string& name, Tensor value) {
  if (find(name)) throw std::logic_error("duplicate parameter name '" + name + "'");
  return params_.emplace_back(name, std::move(value));
}

ad::BatchNormStats& ParameterStore::add_bn_stats(const std::string& name, std::int64_t channels) {
  if (find_bn_stats(name)) throw std::logic_error("duplicate buffer name '" + name + "'");
  auto& entry = stats_.emplace_back(name, ad::BatchNormStats{});
  entry.second.mean = Tensor({channels}, 0.0f);
  entry.second.var = Tensor({channels}, 1.0f);
  return entry.second;
}

ad::Parameter* ParameterStore::find(std::string_view name) {
  for (auto& p : params_) {
    if (p.name == name) return &p;
  }
  return nullptr;
}

ad::BatchNormStats* ParameterStore::find_bn_stats(std::string_view name) {
  for (auto& [n, s] : stats_) {
    if (n == name) return &s;
  }
  return nullptr;
}

std::vector<ad::Parameter*> ParameterStore::parameters() {
  std::vector<ad::Parameter*> out;
  out.reserve(params_.size());
  for (auto& p : params_) out.push_back(&p);
  return out;
}

std::vector<std::pair<std::string, ad::BatchNormStats*>> ParameterStore::bn_stats() {
  std::vector<std::pair<std::string, ad::BatchNormStats*>> out;
  for (auto& [n, s] : stats_) out.emplace_back(n, &s);
  return out;
}

std::int64_t ParameterStore::element_count() const {
  std::int64_t n = 0;
  for (const auto& p : params_) n += p.value().numel();
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

Var Conv::operator()(const Var& x) const {
  return ad::conv2d(x, weight->var, bias ? bias->var : Var(), stride, pad);
}

Var BatchNorm::operator()(const Var& x, bool train) const {
  return ad::batchnorm2d(x, gamma->var, beta->var, *stats, train);
}

Conv LayerFactory::conv(const std::string& name, int in, int out, int k, int stride, int pad,
                        bool bias, ConvInit init) {
  Tensor w({out, in, k, k});
  if (init == ConvInit::HeNormal) {
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / (static_cast<double>(in) * k * k)));
    for (auto& v : w.values()) v = static_cast<float>(dist(rng_));
  }
  Conv c;
  c.weight = &store_.add(name + ".weight", std::move(w));
  if (bias) c.bias = &store_.add(name + ".bias", Tensor({out}));
  c.stride = stride;
  c.pad = pad;
  return c;
}

BatchNorm LayerFactory::batchnorm(const std::string& name, int channels) {
  BatchNorm b;
  b.gamma = &store_.add(name + ".gamma", Tensor({channels}, 1.0f));
  b.beta = &store_.add(name + ".beta", Tensor({channels}, 0.0f));
  b.stats = &store_.add_bn_stats(name, channels);
  return b;
}

BasicBlock BasicBlock::make(LayerFactory& f, const std::string& name, int in, int out,
                            int stride) {
  if (stride != 1 && stride != 2) throw std::invalid_argument("basic block stride must be 1 or 2");
  BasicBlock b;
  b.conv1 = f.conv(name + ".conv1", in, out, 3, stride, 1, false);
  b.bn1 = f.batchnorm(name + ".bn1", out);
  b.conv2 = f.conv(name + ".conv2", out, out, 3, 1, 1, false);
  b.bn2 = f.batchnorm(name + ".bn2", out);
  if (stride != 1 || in != out) {
    b.down = f.conv(name + ".down", in, out, 1, stride, 0, false);
    b.down_bn = f.batchnorm(name + ".down_bn", out);
  }
  return b;
}

Var BasicBlock::operator()(const Var& x, bool train) const {
  Var y = ad::relu(bn1(conv1(x), train));
  y = bn2(conv2(y), train);
  Var skip = down ? (*down_bn)((*down)(x), train) : x;
  return ad::relu(ad::add(y, skip));
}

UpProj UpProj::make(LayerFactory& f, const std::string& name, int in, int out, int skip) {
  UpProj u;
  u.skip_channels = skip;
  u.conv1 = f.conv(name + ".conv1", in, out, 5, 1, 2, false);
  u.bn1 = f.batchnorm(name + ".bn1", out);
  u.conv2 = f.conv(name + ".conv2", out + skip, out, 3, 1, 1, false);
  u.bn2 = f.batchnorm(name + ".bn2", out);
  u.shortcut = f.conv(name + ".shortcut", in, out, 5, 1, 2, false);
  u.shortcut_bn = f.batchnorm(name + ".shortcut_bn", out);
  return u;
}

Var UpProj::operator()(const Var& x, const Var* skip, bool train) const {
  if ((skip != nullptr) != (skip_channels > 0)) {
    throw ShapeError("up-projection skip input does not match its configuration");
  }
  Var u = ad::unpool_zero_x2(x);
  Var a = ad::relu(bn1(conv1(u), train));
  if (skip) a = ad::concat_channels(a, *skip);
  a = bn2(conv2(a), train);
  Var s = shortcut_bn(shortcut(u), train);
  return ad::relu(ad::add(a, s));
}

Var csfa_aggregate(const Var& x_cur, const Var& x_prev, const Var& y_prev, CsfaMode mode,
                   const Conv* phi, const Conv* psi) {
  if (mode == CsfaMode::None) return x_cur;
  if (x_cur.shape() != x_prev.shape() || x_cur.shape() != y_prev.shape()) {
    throw ShapeError("csfa: X_cur " + shape_str(x_cur.shape()) + ", X_prev " +
                     shape_str(x_prev.shape()) + ", Y_prev " + shape_str(y_prev.shape()) +
                     " must agree");
  }
  if (mode == CsfaMode::Connect) return ad::add(x_cur, ad::add(x_prev, y_prev));
  if (!phi || !psi) throw std::invalid_argument("csfa: full mode needs both 1x1 transforms");
  return ad::add(x_cur, ad::add((*phi)(x_prev), (*psi)(y_prev)));
}

StageFeatures Stage::forward(const Var& input, const StageFeatures* prev, CsfaMode mode,
                             bool train) const {
  StageFeatures f;
  Var x = ad::maxpool2d(ad::relu(stem_bn(stem(input), train)), 3, 2, 1);
  x = layers[0][1](layers[0][0](x, train), train);
  std::array<Var, 3> enc_out;  // outputs of layers 1..3, the decoder skips
  for (int k = 0; k < 3; ++k) {
    enc_out[static_cast<std::size_t>(k)] = x;
    if (prev) {
      const auto kk = static_cast<std::size_t>(k);
      x = csfa_aggregate(x, prev->X[kk], prev->Y[kk], mode, phi[kk] ? &*phi[kk] : nullptr,
                         psi[kk] ? &*psi[kk] : nullptr);
    }
    f.X[static_cast<std::size_t>(k)] = x;
    const auto& layer = layers[static_cast<std::size_t>(k + 1)];
    x = layer[1](layer[0](x, train), train);
  }
  f.bottleneck = x;
  Var d = up[0](x, &enc_out[2], train);
  f.Y[2] = d;
  d = up[1](d, &enc_out[1], train);
  f.Y[1] = d;
  d = up[2](d, &enc_out[0], train);
  f.Y[0] = d;
  d = up[3](d, nullptr, train);
  f.head = ad::upsample_bilinear_x2(head(d));
  return f;
}

std::unique_ptr<Model> Model::build(const NetworkConfig& config, std::uint64_t seed) {
  config.validate();
  std::unique_ptr<Model> m(new Model());
  m->config_ = config;
  LayerFactory f(m->store_, seed);
  const int c1 = config.channels(64), c2 = config.channels(128), c3 = config.channels(256),
            c4 = config.channels(512);
  const std::array<int, 4> widths{c1, c2, c3, c4};
  for (int n = 0; n < config.stages; ++n) {
    const std::string s = "stage" + std::to_string(n);
    Stage st;
    st.stem = f.conv(s + ".stem", config.input_channels, c1, 7, 2, 3, false);
    st.stem_bn = f.batchnorm(s + ".stem_bn", c1);
    int in = c1;
    for (int l = 0; l < 4; ++l) {
      const int out = widths[static_cast<std::size_t>(l)];
      const std::string ln = s + ".layer" + std::to_string(l + 1);
      st.layers[static_cast<std::size_t>(l)][0] = BasicBlock::make(f, ln + ".0", in, out, l == 0 ? 1 : 2);
      st.layers[static_cast<std::size_t>(l)][1] = BasicBlock::make(f, ln + ".1", out, out, 1);
      in = out;
    }
    if (n > 0 && config.csfa == CsfaMode::Full) {
      for (int k = 0; k < 3; ++k) {
        const int ch = widths[static_cast<std::size_t>(k)];
        const std::string cn = s + ".csfa" + std::to_string(k + 2);
        st.phi[static_cast<std::size_t>(k)] = f.conv(cn + ".phi", ch, ch, 1, 1, 0, false, ConvInit::Zero);
        st.psi[static_cast<std::size_t>(k)] = f.conv(cn + ".psi", ch, ch, 1, 1, 0, false, ConvInit::Zero);
      }
    }
    st.up[0] = UpProj::make(f, s + ".up1", c4, c3, c3);
    st.up[1] = UpProj::make(f, s + ".up2", c3, c2, c2);
    st.up[2] = UpProj::make(f, s + ".up3", c2, c1, c1);
    st.up[3] = UpProj::make(f, s + ".up4", c1, c1, 0);
    st.head = f.conv(s + ".head", c1, 1, 3, 1, 1, true);
    m->stages_.push_back(std::move(st));
  }
  return m;
}

int Model::csfa_conv_count() const {
  int n = 0;
  for (const Stage& s : stages_) {
    for (std::size_t k = 0; k < 3; ++k) n += (s.phi[k] ? 1 : 0) + (s.psi[k] ? 1 : 0);
  }
  return n;
}

ForwardResult Model::forward(const Tensor& input, const Tensor* ref_d, bool train) {
  const auto& c = config_;
  if (input.rank() != 4 || input.dim(1) != c.input_channels || input.dim(2) != c.height ||
      input.dim(3) != c.width) {
    throw ShapeError("model expects N x " + std::to_string(c.input_channels) + " x " +
                     std::to_string(c.height) + " x " + std::to_string(c.width) + " input, got " +
                     shape_str(input.shape()));
  }
  const bool residual = c.input_mode == InputMode::RefD;
  if (residual && !ref_d) throw std::invalid_argument("ref-d mode requires a reference depth map");
  if (residual && ref_d->shape() != Shape{input.dim(0), 1, c.height, c.width}) {
    throw ShapeError("reference depth must be N x 1 x H x W, got " + shape_str(ref_d->shape()));
  }
  Var x = Var::constant(input);
  ForwardResult r;
  for (const Stage& st : stages_) {
    const StageFeatures* prev = r.stages.empty() ? nullptr : &r.stages.back();
    r.stages.push_back(st.forward(x, prev, c.csfa, train));
  }
  r.head = r.stages.back().head;
  if (residual) {
    r.pre_clamp = ad::add(r.head, Var::constant(*ref_d));
    r.depth = ad::clamp_min(r.pre_clamp, 0.0f);
  } else {
    r.pre_clamp = r.head;
    r.depth = r.head;
  }
  return r;
}

ForwardResult msdpn_forward(Model& model, const InputTensor& input, const DepthImage* ref_d) {
  const auto& c = model.config();
  if (input.mode != c.input_mode) {
    throw std::invalid_argument("input encoded as " + std::string(to_string(input.mode)) +
                                " but model expects " + std::string(to_string(c.input_mode)));
  }
  const Shape& s = input.tensor.shape();
  if (s.size() != 3) throw ShapeError("input tensor must be C x H x W");
  const Tensor batch = input.tensor.reshaped({1, s[0], s[1], s[2]});
  std::optional<Tensor> ref;
  if (ref_d) ref = ref_d->reshaped({1, 1, ref_d->dim(0), ref_d->dim(1)});
  ForwardResult r = model.forward(batch, ref ? &*ref : nullptr, false);
  return r;
}

std::int64_t param_count(const Model& model) { return model.param_count(); }

}  // namespace msdpn::nn
