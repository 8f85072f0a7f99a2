#include "msdpn/autodiff.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "oracles.hpp"

using namespace msdpn;
using namespace msdpn::ad;

namespace {

constexpr double kGradTol = 1e-2;

Tensor rnd(Shape s, std::uint64_t seed, float lo = -1.0f, float hi = 1.0f) {
  std::mt19937_64 rng(seed);
  return oracle::random_tensor(std::move(s), rng, lo, hi);
}

// Smooth scalar readout: sum(y * w) with fixed random w.
Var readout(const Var& y, std::uint64_t seed = 99) { return weighted_sum(y, rnd(y.shape(), seed)); }

void check_grad(const std::function<Var()>& f, Var wrt, const GradcheckOptions& opts = {}) {
  const GradcheckResult r = gradcheck(f, wrt, opts);
  INFO("worst index " << r.worst_index << " analytic " << r.worst_analytic << " numeric " << r.worst_numeric);
  CHECK(r.n_checked > 0);
  CHECK(r.max_rel_error <= kGradTol);
}

}  // namespace

TEST_CASE("conv2d examples") {
  Var x = Var::constant(Tensor({1, 1, 3, 3}, 1.0f));
  Var w = Var::constant(Tensor({1, 1, 1, 1}, 2.0f));
  const Tensor y = conv2d(x, w, Var::constant(Tensor({1})), 1, 0).value();
  CHECK(y.shape() == Shape{1, 1, 3, 3});
  for (float v : y.values()) CHECK(v == 2.0f);

  Tensor id({1, 1, 3, 3});
  id.at(0, 0, 1, 1) = 1.0f;
  const Tensor in = rnd({1, 1, 5, 6}, 1);
  CHECK(bit_equal(conv2d(Var::constant(in), Var::constant(id), Var(), 1, 1).value(), in));
}

TEST_CASE("conv2d matches the nested-loop oracle over the property grid") {
  std::uint64_t seed = 10;
  for (int k : {1, 3, 5, 7})
    for (int stride : {1, 2})
      for (int pad = 0; pad <= 3; ++pad) {
        const Tensor x = rnd({2, 3, 9, 8}, ++seed), w = rnd({4, 3, k, k}, ++seed), b = rnd({4}, ++seed);
        const Tensor got = conv2d(Var::constant(x), Var::constant(w), Var::constant(b), stride, pad).value();
        const Tensor want = oracle::conv2d(x, w, &b, stride, pad);
        INFO("k=" << k << " stride=" << stride << " pad=" << pad);
        REQUIRE(got.shape() == want.shape());
        CHECK(max_abs_diff(got, want) <= 1e-6f);
      }
  const Tensor x = rnd({1, 2, 4, 4}, 3), w = rnd({3, 2, 3, 3}, 4);
  CHECK(max_abs_diff(conv2d(Var::constant(x), Var::constant(w), Var(), 1, 0).value(),
                     oracle::conv2d(x, w, nullptr, 1, 0)) <= 1e-6f);
}

TEST_CASE("conv2d shape errors") {
  Var x = Var::constant(Tensor({1, 2, 4, 4}));
  CHECK_THROWS_AS(conv2d(x, Var::constant(Tensor({1, 3, 3, 3})), Var(), 1, 1), ShapeError);
  CHECK_THROWS_AS(conv2d(x, Var::constant(Tensor({1, 2, 7, 7})), Var(), 1, 0), ShapeError);
  CHECK_THROWS_AS(conv2d(x, Var::constant(Tensor({1, 2, 3, 3})), Var::constant(Tensor({2})), 1, 1), ShapeError);
}

TEST_CASE("batchnorm2d") {
  BatchNormStats st{Tensor({2}), Tensor({2}, 1.0f)};
  Tensor x({2, 2, 3, 3});
  for (int n = 0; n < 2; ++n)
    for (int i = 0; i < 9; ++i) {
      x.at(n, 0, i / 3, i % 3) = 4.0f;  // constant channel
      x.at(n, 1, i / 3, i % 3) = static_cast<float>(i + n);
    }
  Var gamma = Var::constant(Tensor({2}, std::vector<float>{2.0f, 1.0f}));
  Var beta = Var::constant(Tensor({2}, std::vector<float>{0.5f, 0.0f}));
  const Tensor y = batchnorm2d(Var::constant(x), gamma, beta, st, true).value();
  for (int n = 0; n < 2; ++n)
    for (int i = 0; i < 9; ++i) CHECK(y.at(n, 0, i / 3, i % 3) == doctest::Approx(0.5f));

  // output moments of a random batch
  const Tensor r = rnd({4, 3, 5, 5}, 8, -3.0f, 5.0f);
  BatchNormStats st3{Tensor({3}), Tensor({3}, 1.0f)};
  const Tensor out = batchnorm2d(Var::constant(r), Var::constant(Tensor({3}, 1.0f)), Var::constant(Tensor({3})), st3,
                                 true, 0.1, 0.0)
                         .value();
  for (int c = 0; c < 3; ++c) {
    double m = 0, v = 0;
    for (int n = 0; n < 4; ++n)
      for (int i = 0; i < 25; ++i) m += out.at(n, c, i / 5, i % 5);
    m /= 100;
    for (int n = 0; n < 4; ++n)
      for (int i = 0; i < 25; ++i) v += std::pow(out.at(n, c, i / 5, i % 5) - m, 2);
    v /= 100;
    CHECK(std::fabs(m) <= 1e-4);
    CHECK(std::fabs(v - 1.0) <= 1e-4);
  }
  // running stats moved 10% toward the batch moments; variance stored unbiased
  double bm = 0, bv = 0;
  for (int n = 0; n < 4; ++n)
    for (int i = 0; i < 25; ++i) bm += r.at(n, 0, i / 5, i % 5);
  bm /= 100;
  for (int n = 0; n < 4; ++n)
    for (int i = 0; i < 25; ++i) bv += std::pow(r.at(n, 0, i / 5, i % 5) - bm, 2);
  CHECK(st3.mean[0] == doctest::Approx(0.1 * bm).epsilon(1e-5));
  CHECK(st3.var[0] == doctest::Approx(0.9 + 0.1 * bv / 99).epsilon(1e-5));

  // eval mode uses running stats: already-normalized input passes through
  BatchNormStats unit{Tensor({3}), Tensor({3}, 1.0f)};
  const Tensor e = batchnorm2d(Var::constant(r), Var::constant(Tensor({3}, 1.0f)), Var::constant(Tensor({3})), unit,
                               false)
                       .value();
  CHECK(max_abs_diff(e, r) <= 1e-5f * 5);
  CHECK(unit.mean[0] == 0.0f);
  CHECK_THROWS_AS(batchnorm2d(Var::constant(r), Var::constant(Tensor({2}, 1.0f)), Var::constant(Tensor({2})), st,
                              true),
                  ShapeError);
}

TEST_CASE("elementwise and pooling examples") {
  const Tensor r = relu(Var::constant(Tensor({2}, std::vector<float>{-1.0f, 2.0f}))).value();
  CHECK(r[0] == 0.0f);
  CHECK(r[1] == 2.0f);

  const Tensor mp =
      maxpool2d(Var::constant(Tensor({1, 1, 2, 2}, std::vector<float>{1, 2, 3, 4})), 2, 2, 0).value();
  CHECK(mp.shape() == Shape{1, 1, 1, 1});
  CHECK(mp[0] == 4.0f);

  const Tensor up = unpool_zero_x2(Var::constant(Tensor({1, 1, 1, 1}, 5.0f))).value();
  CHECK(up.shape() == Shape{1, 1, 2, 2});
  CHECK(up.storage() == std::vector<float>{5, 0, 0, 0});

  const Tensor cat = concat_channels(Var::constant(Tensor({1, 1, 1, 2}, 1.0f)), Var::constant(Tensor({1, 2, 1, 2}, 2.0f)))
                         .value();
  CHECK(cat.storage() == std::vector<float>{1, 1, 2, 2, 2, 2});
  CHECK_THROWS_AS(add(Var::constant(Tensor({2})), Var::constant(Tensor({3}))), ShapeError);
  CHECK_THROWS_AS(concat_channels(Var::constant(Tensor({1, 1, 2, 2})), Var::constant(Tensor({1, 1, 2, 3}))),
                  ShapeError);

  // bilinear x2 of a constant is constant; of a ramp stays monotone
  const Tensor bl = upsample_bilinear_x2(Var::constant(Tensor({1, 1, 3, 3}, 7.0f))).value();
  CHECK(bl.shape() == Shape{1, 1, 6, 6});
  for (float v : bl.values()) CHECK(v == doctest::Approx(7.0f));
  const Tensor ramp =
      upsample_bilinear_x2(Var::constant(Tensor({1, 1, 1, 2}, std::vector<float>{0.0f, 4.0f}))).value();
  CHECK(ramp.storage()[0] == 0.0f);
  CHECK(ramp.storage()[1] == 1.0f);
  CHECK(ramp.storage()[2] == 3.0f);
  CHECK(ramp.storage()[3] == 4.0f);
}

TEST_CASE("maxpool 3x3/2 pad 1 against a loop oracle") {
  const Tensor x = rnd({2, 2, 7, 8}, 21);
  const Tensor y = maxpool2d(Var::constant(x), 3, 2, 1).value();
  REQUIRE(y.shape() == Shape{2, 2, 4, 4});
  for (int n = 0; n < 2; ++n)
    for (int c = 0; c < 2; ++c)
      for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) {
          float m = -INFINITY;
          for (int a = 0; a < 3; ++a)
            for (int b = 0; b < 3; ++b) {
              const int h = 2 * i - 1 + a, w = 2 * j - 1 + b;
              if (h >= 0 && h < 7 && w >= 0 && w < 8) m = std::max(m, x.at(n, c, h, w));
            }
          CHECK(y.at(n, c, i, j) == m);
        }
}

TEST_CASE("l1_masked") {
  Var p = Var::leaf(Tensor({2}));
  const Tensor t({2}, std::vector<float>{2, 4}), m({2}, std::vector<float>{1, 0});
  CHECK(l1_masked(p, t, m).item() == 2.0);
  CHECK(l1_masked(Var::constant(t), t, m).item() == 0.0);
  CHECK_THROWS_AS(l1_masked(p, t, Tensor({2})), std::invalid_argument);

  const Tensor pred = rnd({8, 8}, 4), target = rnd({8, 8}, 5);
  Tensor mask = rnd({8, 8}, 6, 0.0f, 1.0f);
  for (auto& v : mask.values()) v = v > 0.4f ? 1.0f : 0.0f;
  double s = 0, n = 0;
  for (int i = 0; i < 64; ++i) {
    s += mask[i] * std::fabs(target[i] - pred[i]);
    n += mask[i];
  }
  Var pv = Var::leaf(pred);
  Var loss = l1_masked(pv, target, mask);
  CHECK(loss.item() == doctest::Approx(s / n).epsilon(1e-6));
  backward(loss);
  for (int i = 0; i < 64; ++i) {
    const double d = target[i] - pred[i];
    const double want = -(d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0)) * mask[i] / n;
    CHECK(pv.grad()[i] == doctest::Approx(want).epsilon(1e-6));
  }
  // sign(0) = 0
  Var q = Var::leaf(Tensor({2}, std::vector<float>{2, 0}));
  Var lq = l1_masked(q, t, Tensor({2}, 1.0f));
  backward(lq);
  CHECK(q.grad()[0] == 0.0f);
  CHECK(q.grad()[1] == -0.5f);
}

TEST_CASE("backward contract") {
  Var p = Var::leaf(rnd({3, 4}, 1));
  Var s = sum(p);
  backward(s);
  for (float g : p.grad().values()) CHECK(g == 1.0f);
  CHECK_THROWS(backward(s));                       // graph already consumed
  CHECK_THROWS(backward(add(p, p)));               // non-scalar root

  Var c = Var::leaf(Tensor({4}, 3.0f));
  Var lc = l1_masked(c, Tensor({4}, 3.0f), Tensor({4}, 1.0f));
  backward(lc);
  CHECK(c.grad().all_finite());

  // add distributes, concat slices
  Var a = Var::leaf(rnd({1, 1, 2, 2}, 2)), b = Var::leaf(rnd({1, 2, 2, 2}, 3));
  const Tensor w = rnd({1, 3, 2, 2}, 4);
  backward(weighted_sum(concat_channels(a, b), w));
  for (int i = 0; i < 4; ++i) CHECK(a.grad()[i] == w[i]);
  for (int i = 0; i < 8; ++i) CHECK(b.grad()[i] == w[4 + i]);

  Var x = Var::leaf(rnd({5}, 5)), y = Var::leaf(rnd({5}, 6));
  const Tensor w5 = rnd({5}, 7);
  backward(weighted_sum(add(x, y), w5));
  CHECK(bit_equal(x.grad(), w5));
  CHECK(bit_equal(y.grad(), w5));
}

TEST_CASE("no-grad guard records nothing") {
  Var p = Var::leaf(rnd({3}, 1));
  {
    NoGradGuard g;
    CHECK_FALSE(grad_enabled());
    Var s = sum(p);
    CHECK(s.node().parents.empty());
  }
  CHECK(grad_enabled());
}

TEST_CASE("gradcheck: linear graph is exact") {
  // multiples of 1/16 and a power-of-two step keep every float op exact
  auto dyadic = [](Shape s, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    Tensor t(std::move(s));
    for (auto& v : t.values()) v = static_cast<float>(static_cast<int>(rng() % 33) - 16) / 16.0f;
    return t;
  };
  Var a = Var::leaf(dyadic({2, 3}, 1)), b = Var::leaf(dyadic({2, 3}, 2));
  const Tensor w = dyadic({2, 3}, 3);
  GradcheckOptions o;
  o.eps = std::ldexp(1.0, -10);
  const auto r = gradcheck([&] { return weighted_sum(scale(add(a, b), 0.75f), w); }, a, o);
  CHECK(r.n_checked == 6);
  CHECK(r.max_rel_error <= 1e-6);
}

TEST_CASE("gradcheck: conv2d w.r.t. input, weight and bias") {
  for (int k : {1, 3, 5}) {
    for (int stride : {1, 2}) {
      Var x = Var::leaf(rnd({2, 2, 7, 6}, 31)), w = Var::leaf(rnd({3, 2, k, k}, 32)), b = Var::leaf(rnd({3}, 33));
      auto f = [&] { return readout(conv2d(x, w, b, stride, k / 2)); };
      INFO("k=" << k << " stride=" << stride);
      // linear in each argument: a larger step adds no truncation error, only less rounding
      GradcheckOptions o;
      o.eps = 1e-2;
      check_grad(f, x, o);
      check_grad(f, w, o);
      check_grad(f, b, o);
    }
  }
}

TEST_CASE("gradcheck: batchnorm train and eval") {
  BatchNormStats st{Tensor({3}), Tensor({3}, 1.0f)};
  Var x = Var::leaf(rnd({3, 3, 4, 4}, 41, -2, 3)), g = Var::leaf(rnd({3}, 42, 0.5f, 1.5f)),
      b = Var::leaf(rnd({3}, 43));
  for (bool train : {true, false}) {
    auto f = [&] { return readout(batchnorm2d(x, g, b, st, train)); };
    INFO("train=" << train);
    check_grad(f, x);
    check_grad(f, g);
    check_grad(f, b);
  }
}

TEST_CASE("gradcheck: relu and clamp with kinks excluded") {
  Var x = Var::leaf(rnd({4, 5}, 51));
  const Tensor x0 = x.value();
  GradcheckOptions o;
  o.eligible = [&](std::int64_t i) { return std::fabs(x0[i]) > 1e-2; };
  check_grad([&] { return readout(relu(x)); }, x, o);
  GradcheckOptions oc;
  oc.eligible = [&](std::int64_t i) { return std::fabs(x0[i] - 0.2f) > 1e-2; };
  check_grad([&] { return readout(clamp_min(x, 0.2f)); }, x, oc);
}

TEST_CASE("gradcheck: maxpool away from ties") {
  // distinct values on a coarse grid keep every window's winner stable under +-eps
  Tensor v({1, 2, 6, 6});
  std::vector<int> perm(72);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), std::mt19937_64(5));
  for (int i = 0; i < 72; ++i) v[i] = 0.05f * static_cast<float>(perm[static_cast<std::size_t>(i)]);
  Var x = Var::leaf(v);
  check_grad([&] { return readout(maxpool2d(x, 3, 2, 1)); }, x);
  check_grad([&] { return readout(maxpool2d(x, 2, 2, 0)); }, x);
}

TEST_CASE("gradcheck: shape-moving ops") {
  Var x = Var::leaf(rnd({2, 2, 3, 4}, 61)), y = Var::leaf(rnd({2, 3, 3, 4}, 62));
  check_grad([&] { return readout(concat_channels(x, y)); }, x);
  check_grad([&] { return readout(concat_channels(x, y)); }, y);
  check_grad([&] { return readout(upsample_bilinear_x2(x)); }, x);
  check_grad([&] { return readout(unpool_zero_x2(x)); }, x);
  check_grad([&] { return sum(x); }, x);
}

TEST_CASE("gradcheck: l1_masked away from kinks") {
  Var p = Var::leaf(rnd({6, 6}, 71));
  const Tensor t = rnd({6, 6}, 72);
  Tensor m({6, 6}, 1.0f);
  m[3] = 0.0f;
  const Tensor p0 = p.value();
  GradcheckOptions o;
  o.eligible = [&](std::int64_t i) { return std::fabs(p0[i] - t[i]) > 1e-2; };
  check_grad([&] { return l1_masked(p, t, m); }, p, o);
}

TEST_CASE("composite conv-bn-relu-loss graph") {
  BatchNormStats st{Tensor({4}), Tensor({4}, 1.0f)};
  Var x = Var::constant(rnd({2, 3, 6, 6}, 81));
  Var w = Var::leaf(rnd({4, 3, 3, 3}, 82, -0.5f, 0.5f));
  Var g = Var::leaf(Tensor({4}, 1.0f)), b = Var::leaf(Tensor({4}));
  auto f = [&] { return readout(relu(batchnorm2d(conv2d(x, w, Var(), 1, 1), g, b, st, true))); };
  check_grad(f, w);
  check_grad(f, g);
}

TEST_CASE("determinism: identical graphs give bit-identical values and gradients") {
  auto run = [] {
    BatchNormStats st{Tensor({4}), Tensor({4}, 1.0f)};
    Var x = Var::constant(rnd({2, 3, 8, 8}, 91));
    Var w = Var::leaf(rnd({4, 3, 3, 3}, 92));
    Var y = upsample_bilinear_x2(relu(batchnorm2d(conv2d(x, w, Var(), 2, 1), Var::constant(Tensor({4}, 1.0f)),
                                                  Var::constant(Tensor({4})), st, true)));
    Var l = readout(y);
    backward(l);
    return std::make_pair(y.value(), w.grad());
  };
  const auto a = run(), b = run();
  CHECK(bit_equal(a.first, b.first));
  CHECK(bit_equal(a.second, b.second));
}
