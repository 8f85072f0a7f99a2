#include "msdpn/autodiff.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>
#include <unordered_set>

namespace msdpn::ad {

namespace {

using MatD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

thread_local bool g_grad_enabled = true;

// While gradcheck probes a coordinate, every non-smooth op folds its branch
// choices (relu sign, max-pool argmax, |.| sign) into this hash.
thread_local std::uint64_t* g_kink_hash = nullptr;

void mix_kink(std::uint64_t v) {
  if (g_kink_hash) *g_kink_hash = (*g_kink_hash ^ v) * 0x100000001b3ULL;
}

void require(bool cond, const std::string& msg) {
  if (!cond) throw ShapeError(msg);
}

void require_rank4(const Var& x, const char* op) {
  require(x.defined() && x.value().rank() == 4,
          std::string(op) + ": expected N x C x H x W input, got " +
              (x.defined() ? shape_str(x.shape()) : std::string("undefined")));
}

bool any_requires_grad(std::initializer_list<const Var*> vars) {
  for (const Var* v : vars) {
    if (v->defined() && v->requires_grad()) return true;
  }
  return false;
}

/// Wraps an op result; records parents and the backward rule only when needed.
Var make_result(Tensor value, std::initializer_list<const Var*> parents,
                std::function<void(Node&)> backward_fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (g_grad_enabled && any_requires_grad(parents)) {
    node->requires_grad = true;
    for (const Var* p : parents) {
      if (p->defined()) node->parents.push_back(p->ptr());
    }
    node->backward_fn = std::move(backward_fn);
  }
  return Var(std::move(node));
}

bool wants_grad(const std::shared_ptr<Node>& n) { return n && n->requires_grad; }

void add_into(Tensor& dst, const Tensor& src) {
  float* d = dst.data();
  const float* s = src.data();
  for (std::int64_t i = 0; i < dst.numel(); ++i) d[i] += s[i];
}

struct ConvGeom {
  std::int64_t N, C, H, W, O, k, stride, pad, Ho, Wo;
  std::int64_t K() const { return C * k * k; }
  std::int64_t P() const { return N * Ho * Wo; }
};

void im2col(const float* x, const ConvGeom& g, MatD& cols) {
  cols.resize(g.K(), g.P());
  const std::int64_t hw = g.Ho * g.Wo;
  for (std::int64_t c = 0; c < g.C; ++c) {
    for (std::int64_t ki = 0; ki < g.k; ++ki) {
      for (std::int64_t kj = 0; kj < g.k; ++kj) {
        double* row = cols.row((c * g.k + ki) * g.k + kj).data();
        for (std::int64_t n = 0; n < g.N; ++n) {
          const float* plane = x + (n * g.C + c) * g.H * g.W;
          double* dst = row + n * hw;
          for (std::int64_t oh = 0; oh < g.Ho; ++oh) {
            const std::int64_t ih = oh * g.stride - g.pad + ki;
            double* drow = dst + oh * g.Wo;
            if (ih < 0 || ih >= g.H) {
              std::fill(drow, drow + g.Wo, 0.0);
              continue;
            }
            const float* srow = plane + ih * g.W;
            for (std::int64_t ow = 0; ow < g.Wo; ++ow) {
              const std::int64_t iw = ow * g.stride - g.pad + kj;
              drow[ow] = (iw >= 0 && iw < g.W) ? static_cast<double>(srow[iw]) : 0.0;
            }
          }
        }
      }
    }
  }
}

void col2im(const MatD& cols, const ConvGeom& g, std::vector<double>& dx) {
  dx.assign(static_cast<std::size_t>(g.N * g.C * g.H * g.W), 0.0);
  const std::int64_t hw = g.Ho * g.Wo;
  for (std::int64_t c = 0; c < g.C; ++c) {
    for (std::int64_t ki = 0; ki < g.k; ++ki) {
      for (std::int64_t kj = 0; kj < g.k; ++kj) {
        const double* row = cols.row((c * g.k + ki) * g.k + kj).data();
        for (std::int64_t n = 0; n < g.N; ++n) {
          double* plane = dx.data() + (n * g.C + c) * g.H * g.W;
          const double* src = row + n * hw;
          for (std::int64_t oh = 0; oh < g.Ho; ++oh) {
            const std::int64_t ih = oh * g.stride - g.pad + ki;
            if (ih < 0 || ih >= g.H) continue;
            double* drow = plane + ih * g.W;
            const double* srow = src + oh * g.Wo;
            for (std::int64_t ow = 0; ow < g.Wo; ++ow) {
              const std::int64_t iw = ow * g.stride - g.pad + kj;
              if (iw >= 0 && iw < g.W) drow[iw] += srow[ow];
            }
          }
        }
      }
    }
  }
}

MatD weight_matrix(const Tensor& w, std::int64_t O, std::int64_t K) {
  MatD m(O, K);
  const float* src = w.data();
  for (std::int64_t i = 0; i < O * K; ++i) m.data()[i] = src[i];
  return m;
}

}  // namespace

Tensor& Node::grad_buffer() {
  if (grad.shape() != value.shape()) grad = Tensor(value.shape());
  return grad;
}

Var Var::constant(Tensor value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  return Var(std::move(node));
}

Var Var::leaf(Tensor value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = true;
  return Var(std::move(node));
}

double Var::item() const {
  if (value().numel() != 1) throw ShapeError("item() on non-scalar " + shape_str(shape()));
  if (!std::isnan(node_->scalar64)) return node_->scalar64;
  return value()[0];
}

void Parameter::zero_grad() { grad().fill(0.0f); }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

Var conv2d(const Var& input, const Var& weight, const Var& bias, int stride, int pad) {
  require_rank4(input, "conv2d");
  require(weight.defined() && weight.value().rank() == 4, "conv2d: weight must be O x C x k x k");
  const Tensor& x = input.value();
  const Tensor& w = weight.value();
  ConvGeom g{};
  g.N = x.dim(0), g.C = x.dim(1), g.H = x.dim(2), g.W = x.dim(3);
  g.O = w.dim(0), g.k = w.dim(2), g.stride = stride, g.pad = pad;
  require(w.dim(1) == g.C, "conv2d: weight expects " + std::to_string(w.dim(1)) +
                               " input channels, got " + std::to_string(g.C));
  require(w.dim(3) == g.k, "conv2d: kernel must be square");
  require(stride >= 1 && pad >= 0, "conv2d: stride must be >= 1 and pad >= 0");
  require(!bias.defined() || bias.shape() == Shape{g.O}, "conv2d: bias must have O elements");
  const std::int64_t span_h = g.H + 2 * pad - g.k, span_w = g.W + 2 * pad - g.k;
  require(span_h >= 0 && span_w >= 0,
          "conv2d: kernel larger than padded input " + shape_str(x.shape()) + ", k=" +
              std::to_string(g.k) + ", stride=" + std::to_string(stride) +
              ", pad=" + std::to_string(pad));
  g.Ho = span_h / stride + 1;
  g.Wo = span_w / stride + 1;

  MatD cols;
  im2col(x.data(), g, cols);
  const MatD wm = weight_matrix(w, g.O, g.K());
  MatD out(g.O, g.P());
  out.noalias() = wm * cols;

  Tensor y({g.N, g.O, g.Ho, g.Wo});
  const std::int64_t hw = g.Ho * g.Wo;
  for (std::int64_t o = 0; o < g.O; ++o) {
    const double b = bias.defined() ? static_cast<double>(bias.value()[o]) : 0.0;
    const double* row = out.row(o).data();
    for (std::int64_t n = 0; n < g.N; ++n) {
      float* dst = y.data() + (n * g.O + o) * hw;
      for (std::int64_t i = 0; i < hw; ++i) dst[i] = static_cast<float>(row[n * hw + i] + b);
    }
  }

  auto xn = input.ptr(), wn = weight.ptr(), bn = bias.defined() ? bias.ptr() : nullptr;
  return make_result(std::move(y), {&input, &weight, &bias}, [xn, wn, bn, g](Node& self) {
    const std::int64_t hw = g.Ho * g.Wo;
    MatD gm(g.O, g.P());
    for (std::int64_t o = 0; o < g.O; ++o) {
      double* row = gm.row(o).data();
      for (std::int64_t n = 0; n < g.N; ++n) {
        const float* src = self.grad.data() + (n * g.O + o) * hw;
        for (std::int64_t i = 0; i < hw; ++i) row[n * hw + i] = src[i];
      }
    }
    const bool need_x = wants_grad(xn), need_w = wants_grad(wn);
    if (need_w) {
      MatD cols;
      im2col(xn->value.data(), g, cols);
      MatD dw(g.O, g.K());
      dw.noalias() = gm * cols.transpose();
      float* dst = wn->grad_buffer().data();
      for (std::int64_t i = 0; i < g.O * g.K(); ++i) dst[i] += static_cast<float>(dw.data()[i]);
    }
    if (wants_grad(bn)) {
      float* dst = bn->grad_buffer().data();
      for (std::int64_t o = 0; o < g.O; ++o) dst[o] += static_cast<float>(gm.row(o).sum());
    }
    if (need_x) {
      const MatD wm = weight_matrix(wn->value, g.O, g.K());
      MatD dcols(g.K(), g.P());
      dcols.noalias() = wm.transpose() * gm;
      std::vector<double> dx;
      col2im(dcols, g, dx);
      float* dst = xn->grad_buffer().data();
      for (std::size_t i = 0; i < dx.size(); ++i) dst[i] += static_cast<float>(dx[i]);
    }
  });
}

Var batchnorm2d(const Var& input, const Var& gamma, const Var& beta, BatchNormStats& running,
                bool train, double momentum, double eps) {
  require_rank4(input, "batchnorm2d");
  const Tensor& x = input.value();
  const std::int64_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3), M = N * HW;
  require(gamma.shape() == Shape{C} && beta.shape() == Shape{C},
          "batchnorm2d: affine parameters must have " + std::to_string(C) + " elements");
  require(running.mean.shape() == Shape{C} && running.var.shape() == Shape{C},
          "batchnorm2d: running statistics must have " + std::to_string(C) + " elements");
  require(M > 0, "batchnorm2d: empty input");

  std::vector<double> mean(static_cast<std::size_t>(C)), invstd(static_cast<std::size_t>(C));
  for (std::int64_t c = 0; c < C; ++c) {
    double mu, var;
    if (train) {
      double s = 0.0;
      for (std::int64_t n = 0; n < N; ++n) {
        const float* p = x.data() + (n * C + c) * HW;
        for (std::int64_t i = 0; i < HW; ++i) s += p[i];
      }
      mu = s / static_cast<double>(M);
      double ss = 0.0;
      for (std::int64_t n = 0; n < N; ++n) {
        const float* p = x.data() + (n * C + c) * HW;
        for (std::int64_t i = 0; i < HW; ++i) ss += (p[i] - mu) * (p[i] - mu);
      }
      var = ss / static_cast<double>(M);
      const double unbiased = M > 1 ? ss / static_cast<double>(M - 1) : var;
      running.mean[c] =
          static_cast<float>((1.0 - momentum) * running.mean[c] + momentum * mu);
      running.var[c] =
          static_cast<float>((1.0 - momentum) * running.var[c] + momentum * unbiased);
    } else {
      mu = running.mean[c];
      var = running.var[c];
    }
    mean[static_cast<std::size_t>(c)] = mu;
    invstd[static_cast<std::size_t>(c)] = 1.0 / std::sqrt(var + eps);
  }

  Tensor y(x.shape());
  for (std::int64_t n = 0; n < N; ++n) {
    for (std::int64_t c = 0; c < C; ++c) {
      const double mu = mean[static_cast<std::size_t>(c)], is = invstd[static_cast<std::size_t>(c)];
      const double ga = gamma.value()[c], be = beta.value()[c];
      const float* p = x.data() + (n * C + c) * HW;
      float* q = y.data() + (n * C + c) * HW;
      for (std::int64_t i = 0; i < HW; ++i) q[i] = static_cast<float>((p[i] - mu) * is * ga + be);
    }
  }

  auto xn = input.ptr(), gn = gamma.ptr(), bn = beta.ptr();
  return make_result(std::move(y), {&input, &gamma, &beta},
                     [xn, gn, bn, mean, invstd, train, N, C, HW, M](Node& self) {
    const Tensor& x = xn->value;
    const Tensor& gy = self.grad;
    for (std::int64_t c = 0; c < C; ++c) {
      const double mu = mean[static_cast<std::size_t>(c)], is = invstd[static_cast<std::size_t>(c)];
      double sg = 0.0, sgx = 0.0;
      for (std::int64_t n = 0; n < N; ++n) {
        const float* p = x.data() + (n * C + c) * HW;
        const float* g = gy.data() + (n * C + c) * HW;
        for (std::int64_t i = 0; i < HW; ++i) {
          sg += g[i];
          sgx += g[i] * (p[i] - mu) * is;
        }
      }
      if (wants_grad(gn)) gn->grad_buffer()[c] += static_cast<float>(sgx);
      if (wants_grad(bn)) bn->grad_buffer()[c] += static_cast<float>(sg);
      if (!wants_grad(xn)) continue;
      const double ga = gn->value[c];
      float* dx = xn->grad_buffer().data();
      const double inv_m = 1.0 / static_cast<double>(M);
      for (std::int64_t n = 0; n < N; ++n) {
        const float* p = x.data() + (n * C + c) * HW;
        const float* g = gy.data() + (n * C + c) * HW;
        float* d = dx + (n * C + c) * HW;
        for (std::int64_t i = 0; i < HW; ++i) {
          double v;
          if (train) {
            const double xhat = (p[i] - mu) * is;
            v = ga * is * (g[i] - sg * inv_m - xhat * sgx * inv_m);
          } else {
            v = ga * is * g[i];
          }
          d[i] += static_cast<float>(v);
        }
      }
    }
  });
}

Var relu(const Var& x) {
  Tensor y(x.shape());
  const float* p = x.value().data();
  for (std::int64_t i = 0; i < y.numel(); ++i) y[i] = p[i] > 0.0f ? p[i] : 0.0f;
  if (g_kink_hash) {
    for (std::int64_t i = 0; i < y.numel(); ++i) mix_kink(p[i] > 0.0f);
  }
  auto xn = x.ptr();
  return make_result(std::move(y), {&x}, [xn](Node& self) {
    float* d = xn->grad_buffer().data();
    const float* p = xn->value.data();
    const float* g = self.grad.data();
    for (std::int64_t i = 0; i < self.grad.numel(); ++i) {
      if (p[i] > 0.0f) d[i] += g[i];
    }
  });
}

Var maxpool2d(const Var& x, int kernel, int stride, int pad) {
  require_rank4(x, "maxpool2d");
  require(kernel >= 1 && stride >= 1 && pad >= 0 && pad * 2 <= kernel,
          "maxpool2d: invalid kernel/stride/pad");
  const Tensor& in = x.value();
  const std::int64_t N = in.dim(0), C = in.dim(1), H = in.dim(2), W = in.dim(3);
  const std::int64_t Ho = (H + 2 * pad - kernel) / stride + 1;
  const std::int64_t Wo = (W + 2 * pad - kernel) / stride + 1;
  require(Ho >= 1 && Wo >= 1, "maxpool2d: input smaller than kernel");
  Tensor y({N, C, Ho, Wo});
  std::vector<std::int64_t> arg(static_cast<std::size_t>(y.numel()));
  std::int64_t o = 0;
  for (std::int64_t nc = 0; nc < N * C; ++nc) {
    const float* plane = in.data() + nc * H * W;
    for (std::int64_t oh = 0; oh < Ho; ++oh) {
      for (std::int64_t ow = 0; ow < Wo; ++ow, ++o) {
        float best = -std::numeric_limits<float>::infinity();
        std::int64_t best_i = -1;
        for (std::int64_t ki = 0; ki < kernel; ++ki) {
          const std::int64_t ih = oh * stride - pad + ki;
          if (ih < 0 || ih >= H) continue;
          for (std::int64_t kj = 0; kj < kernel; ++kj) {
            const std::int64_t iw = ow * stride - pad + kj;
            if (iw < 0 || iw >= W) continue;
            const float v = plane[ih * W + iw];
            if (best_i < 0 || v > best) {
              best = v;
              best_i = nc * H * W + ih * W + iw;
            }
          }
        }
        y[o] = best;
        arg[static_cast<std::size_t>(o)] = best_i;
        mix_kink(static_cast<std::uint64_t>(best_i));
      }
    }
  }
  auto xn = x.ptr();
  return make_result(std::move(y), {&x}, [xn, arg = std::move(arg)](Node& self) {
    float* d = xn->grad_buffer().data();
    for (std::size_t i = 0; i < arg.size(); ++i) d[arg[i]] += self.grad[static_cast<std::int64_t>(i)];
  });
}

Var add(const Var& a, const Var& b) {
  require(a.shape() == b.shape(),
          "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor y(a.shape());
  for (std::int64_t i = 0; i < y.numel(); ++i) y[i] = a.value()[i] + b.value()[i];
  auto an = a.ptr(), bn = b.ptr();
  return make_result(std::move(y), {&a, &b}, [an, bn](Node& self) {
    if (wants_grad(an)) add_into(an->grad_buffer(), self.grad);
    if (wants_grad(bn)) add_into(bn->grad_buffer(), self.grad);
  });
}

Var scale(const Var& x, float s) {
  Tensor y(x.shape());
  for (std::int64_t i = 0; i < y.numel(); ++i) y[i] = x.value()[i] * s;
  auto xn = x.ptr();
  return make_result(std::move(y), {&x}, [xn, s](Node& self) {
    float* d = xn->grad_buffer().data();
    for (std::int64_t i = 0; i < self.grad.numel(); ++i) d[i] += self.grad[i] * s;
  });
}

Var concat_channels(const Var& a, const Var& b) {
  require_rank4(a, "concat_channels");
  require_rank4(b, "concat_channels");
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  require(sa[0] == sb[0] && sa[2] == sb[2] && sa[3] == sb[3],
          "concat_channels: shape mismatch " + shape_str(sa) + " vs " + shape_str(sb));
  const std::int64_t N = sa[0], Ca = sa[1], Cb = sb[1], HW = sa[2] * sa[3];
  Tensor y({N, Ca + Cb, sa[2], sa[3]});
  for (std::int64_t n = 0; n < N; ++n) {
    std::copy_n(a.value().data() + n * Ca * HW, Ca * HW, y.data() + n * (Ca + Cb) * HW);
    std::copy_n(b.value().data() + n * Cb * HW, Cb * HW, y.data() + (n * (Ca + Cb) + Ca) * HW);
  }
  auto an = a.ptr(), bn = b.ptr();
  return make_result(std::move(y), {&a, &b}, [an, bn, N, Ca, Cb, HW](Node& self) {
    const float* g = self.grad.data();
    if (wants_grad(an)) {
      float* d = an->grad_buffer().data();
      for (std::int64_t n = 0; n < N; ++n) {
        for (std::int64_t i = 0; i < Ca * HW; ++i) d[n * Ca * HW + i] += g[n * (Ca + Cb) * HW + i];
      }
    }
    if (wants_grad(bn)) {
      float* d = bn->grad_buffer().data();
      for (std::int64_t n = 0; n < N; ++n) {
        for (std::int64_t i = 0; i < Cb * HW; ++i) {
          d[n * Cb * HW + i] += g[(n * (Ca + Cb) + Ca) * HW + i];
        }
      }
    }
  });
}

namespace {

// Half-pixel-centred source taps for a x2 upsample along one axis.
struct Tap {
  std::int64_t i0, i1;
  double w1;
};

std::vector<Tap> bilinear_taps(std::int64_t in) {
  std::vector<Tap> taps(static_cast<std::size_t>(2 * in));
  for (std::int64_t o = 0; o < 2 * in; ++o) {
    double src = (static_cast<double>(o) + 0.5) / 2.0 - 0.5;
    if (src < 0.0) src = 0.0;
    auto i0 = static_cast<std::int64_t>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const std::int64_t i1 = std::min(i0 + 1, in - 1);
    taps[static_cast<std::size_t>(o)] = {i0, i1, src - static_cast<double>(i0)};
  }
  return taps;
}

}  // namespace

Var upsample_bilinear_x2(const Var& x) {
  require_rank4(x, "upsample_bilinear_x2");
  const Tensor& in = x.value();
  const std::int64_t NC = in.dim(0) * in.dim(1), H = in.dim(2), W = in.dim(3);
  const auto th = bilinear_taps(H), tw = bilinear_taps(W);
  Tensor y({in.dim(0), in.dim(1), 2 * H, 2 * W});
  for (std::int64_t p = 0; p < NC; ++p) {
    const float* src = in.data() + p * H * W;
    float* dst = y.data() + p * 4 * H * W;
    for (std::int64_t oh = 0; oh < 2 * H; ++oh) {
      const Tap& a = th[static_cast<std::size_t>(oh)];
      for (std::int64_t ow = 0; ow < 2 * W; ++ow) {
        const Tap& b = tw[static_cast<std::size_t>(ow)];
        const double v = (1 - a.w1) * ((1 - b.w1) * src[a.i0 * W + b.i0] + b.w1 * src[a.i0 * W + b.i1]) +
                         a.w1 * ((1 - b.w1) * src[a.i1 * W + b.i0] + b.w1 * src[a.i1 * W + b.i1]);
        dst[oh * 2 * W + ow] = static_cast<float>(v);
      }
    }
  }
  auto xn = x.ptr();
  return make_result(std::move(y), {&x}, [xn, th, tw, NC, H, W](Node& self) {
    std::vector<double> acc(static_cast<std::size_t>(H * W));
    float* d = xn->grad_buffer().data();
    for (std::int64_t p = 0; p < NC; ++p) {
      std::fill(acc.begin(), acc.end(), 0.0);
      const float* g = self.grad.data() + p * 4 * H * W;
      for (std::int64_t oh = 0; oh < 2 * H; ++oh) {
        const Tap& a = th[static_cast<std::size_t>(oh)];
        for (std::int64_t ow = 0; ow < 2 * W; ++ow) {
          const Tap& b = tw[static_cast<std::size_t>(ow)];
          const double gv = g[oh * 2 * W + ow];
          acc[static_cast<std::size_t>(a.i0 * W + b.i0)] += gv * (1 - a.w1) * (1 - b.w1);
          acc[static_cast<std::size_t>(a.i0 * W + b.i1)] += gv * (1 - a.w1) * b.w1;
          acc[static_cast<std::size_t>(a.i1 * W + b.i0)] += gv * a.w1 * (1 - b.w1);
          acc[static_cast<std::size_t>(a.i1 * W + b.i1)] += gv * a.w1 * b.w1;
        }
      }
      for (std::int64_t i = 0; i < H * W; ++i) d[p * H * W + i] += static_cast<float>(acc[static_cast<std::size_t>(i)]);
    }
  });
}

Var unpool_zero_x2(const Var& x) {
  require_rank4(x, "unpool_zero_x2");
  const Tensor& in = x.value();
  const std::int64_t NC = in.dim(0) * in.dim(1), H = in.dim(2), W = in.dim(3);
  Tensor y({in.dim(0), in.dim(1), 2 * H, 2 * W});
  for (std::int64_t p = 0; p < NC; ++p) {
    for (std::int64_t h = 0; h < H; ++h) {
      for (std::int64_t w = 0; w < W; ++w) {
        y[p * 4 * H * W + (2 * h) * 2 * W + 2 * w] = in[p * H * W + h * W + w];
      }
    }
  }
  auto xn = x.ptr();
  return make_result(std::move(y), {&x}, [xn, NC, H, W](Node& self) {
    float* d = xn->grad_buffer().data();
    for (std::int64_t p = 0; p < NC; ++p) {
      for (std::int64_t h = 0; h < H; ++h) {
        for (std::int64_t w = 0; w < W; ++w) {
          d[p * H * W + h * W + w] += self.grad[p * 4 * H * W + (2 * h) * 2 * W + 2 * w];
        }
      }
    }
  });
}

Var clamp_min(const Var& x, float lo) {
  Tensor y(x.shape());
  for (std::int64_t i = 0; i < y.numel(); ++i) y[i] = std::max(x.value()[i], lo);
  if (g_kink_hash) {
    for (std::int64_t i = 0; i < y.numel(); ++i) mix_kink(x.value()[i] > lo);
  }
  auto xn = x.ptr();
  return make_result(std::move(y), {&x}, [xn, lo](Node& self) {
    float* d = xn->grad_buffer().data();
    for (std::int64_t i = 0; i < self.grad.numel(); ++i) {
      if (xn->value[i] > lo) d[i] += self.grad[i];
    }
  });
}

Var sum(const Var& x) {
  double s = 0.0;
  for (float v : x.value().values()) s += v;
  auto xn = x.ptr();
  Var out = make_result(Tensor({1}, static_cast<float>(s)), {&x}, [xn](Node& self) {
    float* d = xn->grad_buffer().data();
    const float g = self.grad[0];
    for (std::int64_t i = 0; i < xn->value.numel(); ++i) d[i] += g;
  });
  out.node().scalar64 = s;
  return out;
}

Var weighted_sum(const Var& x, const Tensor& w) {
  require(x.shape() == w.shape(), "weighted_sum: shape mismatch " + shape_str(x.shape()) +
                                      " vs " + shape_str(w.shape()));
  double s = 0.0;
  for (std::int64_t i = 0; i < w.numel(); ++i) s += static_cast<double>(x.value()[i]) * w[i];
  auto xn = x.ptr();
  Var out = make_result(Tensor({1}, static_cast<float>(s)), {&x}, [xn, w](Node& self) {
    float* d = xn->grad_buffer().data();
    const float g = self.grad[0];
    for (std::int64_t i = 0; i < w.numel(); ++i) d[i] += g * w[i];
  });
  out.node().scalar64 = s;
  return out;
}

Var l1_masked(const Var& pred, const Tensor& target, const Tensor& mask) {
  require(pred.shape() == target.shape() && pred.shape() == mask.shape(),
          "l1_masked: shape mismatch " + shape_str(pred.shape()) + ", " +
              shape_str(target.shape()) + ", " + shape_str(mask.shape()));
  double msum = 0.0, s = 0.0;
  const Tensor& p = pred.value();
  for (std::int64_t i = 0; i < p.numel(); ++i) {
    if (mask[i] == 0.0f) continue;
    msum += mask[i];
    s += static_cast<double>(mask[i]) * std::fabs(static_cast<double>(target[i]) - p[i]);
    mix_kink(target[i] > p[i]);
  }
  if (!(msum > 0.0)) throw std::invalid_argument("l1_masked: mask has no valid pixels");
  const double loss = s / msum;
  auto pn = pred.ptr();
  Var out = make_result(Tensor({1}, static_cast<float>(loss)), {&pred},
                        [pn, target, mask, msum](Node& self) {
    float* d = pn->grad_buffer().data();
    const double g = self.grad[0];
    for (std::int64_t i = 0; i < target.numel(); ++i) {
      if (mask[i] == 0.0f) continue;
      const float diff = target[i] - pn->value[i];
      const double sgn = diff > 0.0f ? 1.0 : (diff < 0.0f ? -1.0 : 0.0);
      d[i] += static_cast<float>(-sgn * mask[i] / msum * g);
    }
  });
  out.node().scalar64 = loss;
  return out;
}

void backward(const Var& loss) {
  if (!loss.defined()) throw std::invalid_argument("backward: undefined loss");
  if (loss.value().numel() != 1) {
    throw ShapeError("backward: loss must be scalar, got " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) throw std::logic_error("backward: loss does not require grad");

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{&loss.node(), 0}};
  seen.insert(&loss.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (Node* n : order) {
    if (n->consumed) throw std::logic_error("backward: graph has already been differentiated");
  }
  loss.node().grad_buffer().fill(1.0f);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->is_leaf()) continue;
    n->grad_buffer();
    n->backward_fn(*n);
  }
  // Release the tape; leaves keep their accumulated gradients.
  for (Node* n : order) {
    if (n->is_leaf()) continue;
    n->consumed = true;
    n->backward_fn = nullptr;
    n->parents.clear();
    n->grad = Tensor();
  }
}

GradcheckResult gradcheck(const std::function<Var()>& loss_fn, Var wrt,
                          const GradcheckOptions& opts) {
  if (!wrt.requires_grad()) throw std::invalid_argument("gradcheck: target does not require grad");
  wrt.node().grad_buffer().fill(0.0f);
  {
    Var loss = loss_fn();
    backward(loss);
  }
  const Tensor analytic = wrt.grad();

  std::vector<std::int64_t> candidates;
  for (std::int64_t i = 0; i < analytic.numel(); ++i) {
    if (!opts.eligible || opts.eligible(i)) candidates.push_back(i);
  }
  std::shuffle(candidates.begin(), candidates.end(), std::mt19937_64(opts.seed));

  GradcheckResult res;
  NoGradGuard no_grad;
  Tensor& value = wrt.mutable_value();
  // loss and branch pattern at the current point
  auto probe = [&](std::uint64_t& pattern) {
    pattern = 0xcbf29ce484222325ULL;
    g_kink_hash = opts.skip_kink_crossings ? &pattern : nullptr;
    double l = 0.0;
    try {
      l = loss_fn().item();
    } catch (...) {
      g_kink_hash = nullptr;
      throw;
    }
    g_kink_hash = nullptr;
    return l;
  };
  std::uint64_t base = 0, pu = 0, pd = 0;
  probe(base);
  for (std::int64_t idx : candidates) {
    if (res.n_checked >= opts.max_samples) break;
    const float orig = value[idx];
    const double a = analytic[idx];
    double h = opts.eps;
    bool crossed = false, floor = false;
    for (int attempt = 0; attempt <= opts.kink_retries; ++attempt, h /= 4.0) {
      if (std::fabs(a) * h < opts.min_signal) {
        floor = true;
        break;
      }
      const float up = static_cast<float>(orig + h);
      const float down = static_cast<float>(orig - h);
      value[idx] = up;
      const double lp = probe(pu);
      value[idx] = down;
      const double lm = probe(pd);
      value[idx] = orig;
      crossed = opts.skip_kink_crossings && (pu != base || pd != base);
      if (crossed) continue;
      // realized step, not 2h: orig +- h is rounded to float
      const double numeric = (lp - lm) / (static_cast<double>(up) - static_cast<double>(down));
      const double err = std::fabs(a - numeric) / std::max(1e-6, std::fabs(a) + std::fabs(numeric));
      ++res.n_checked;
      if (err > res.max_rel_error || res.worst_index < 0) {
        res.max_rel_error = std::max(res.max_rel_error, err);
        res.worst_index = idx;
        res.worst_analytic = a;
        res.worst_numeric = numeric;
      }
      break;
    }
    if (floor) {
      ++res.n_below_floor;
    } else if (crossed) {
      ++res.n_excluded;
    }
  }
  return res;
}

}  // namespace msdpn::ad
