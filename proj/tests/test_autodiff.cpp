#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "selseg/autodiff.hpp"
#include "test_util.hpp"

using namespace selseg;
using namespace selseg::ad;

namespace {

Tensor random_tensor(Shape s, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> U(lo, hi);
  Tensor t(std::move(s));
  for (double& v : t.data) v = U(rng);
  return t;
}

// Random linear read-out, so every output element gets an O(1) gradient.
Var project(Var y, std::uint64_t seed) {
  return sum(hadamard(y, y.tape->constant(random_tensor(y.shape(), seed))));
}

using Build = std::function<Var(Tape&, const std::vector<Var>&)>;

double loss_at(const std::vector<Parameter*>& params, const Build& build) {
  Tape t;
  std::vector<Var> vs;
  for (Parameter* p : params) vs.push_back(t.parameter(*p));
  return build(t, vs).value().item();
}

// Worst relative error of backward() against central differences over
// `probes` random coordinates drawn across all parameters.
double grad_check(const std::vector<Parameter*>& params, const Build& build, int probes = 20,
                  std::uint64_t seed = 7) {
  for (Parameter* p : params) p->zero_grad();
  {
    Tape t;
    std::vector<Var> vs;
    for (Parameter* p : params) vs.push_back(t.parameter(*p));
    t.backward(build(t, vs));
  }
  std::mt19937_64 rng(seed);
  std::size_t total = 0;
  for (Parameter* p : params) total += p->value.size();
  std::uniform_int_distribution<std::size_t> pick(0, total - 1);
  const double h = 1e-6;
  double worst = 0.0;
  for (int k = 0; k < probes; ++k) {
    std::size_t idx = pick(rng);
    Parameter* p = params[0];
    for (Parameter* q : params) {
      if (idx < q->value.size()) {
        p = q;
        break;
      }
      idx -= q->value.size();
    }
    const double orig = p->value.data[idx];
    p->value.data[idx] = orig + h;
    const double fp = loss_at(params, build);
    p->value.data[idx] = orig - h;
    const double fm = loss_at(params, build);
    p->value.data[idx] = orig;
    const double num = (fp - fm) / (2 * h);
    const double ana = p->grad.data[idx];
    const double rel = std::abs(num - ana) / std::max({std::abs(num), std::abs(ana), 1e-6});
    worst = std::max(worst, rel);
  }
  return worst;
}

constexpr double kTol = 1e-4;

}  // namespace

TEST(Conv2d, DeltaKernelIsIdentity) {
  Tape t;
  Tensor k({3, 3, 1, 1});
  k.data[4] = 1.0;
  Tensor x = random_tensor({1, 3, 3, 1}, 1);
  Var y = conv2d(t.constant(x), t.constant(k));
  EXPECT_EQ(y.value().data, x.data);
  Var ones = conv2d(t.constant(Tensor({1, 3, 3, 1}, 1.0)), t.constant(k));
  for (double v : ones.value().data) EXPECT_EQ(v, 1.0);
}

TEST(Conv2d, ZeroKernelGivesZeroOutputAndInputGradient) {
  Parameter x("x", random_tensor({1, 5, 5, 2}, 2));
  Tape t;
  Var y = conv2d(t.parameter(x), t.constant(Tensor({3, 3, 2, 3})));
  for (double v : y.value().data) EXPECT_EQ(v, 0.0);
  t.backward(project(y, 3));
  for (double v : x.grad.data) EXPECT_EQ(v, 0.0);
}

TEST(Conv2d, SamePaddingGradientsMatchFiniteDifferences) {
  Parameter x("x", random_tensor({1, 5, 5, 2}, 4));
  Parameter k("k", random_tensor({3, 3, 2, 3}, 5));
  const double err = grad_check({&x, &k}, [](Tape&, const std::vector<Var>& v) {
    return project(conv2d(v[0], v[1]), 6);
  });
  EXPECT_LT(err, kTol);
}

TEST(Conv2d, ValidAndStridedGradientsMatchFiniteDifferences) {
  Parameter x("x", random_tensor({2, 7, 6, 2}, 8));
  Parameter k("k", random_tensor({3, 3, 2, 2}, 9));
  for (int stride : {1, 2})
    for (Padding pad : {Padding::same, Padding::valid}) {
      const double err = grad_check({&x, &k}, [&](Tape&, const std::vector<Var>& v) {
        return project(conv2d(v[0], v[1], stride, pad), 10);
      });
      EXPECT_LT(err, kTol) << "stride " << stride << " valid " << (pad == Padding::valid);
    }
}

TEST(Conv2d, OutputShapes) {
  Tape t;
  Var x = t.constant(Tensor({1, 7, 6, 2}));
  EXPECT_EQ(conv2d(x, t.constant(Tensor({3, 3, 2, 4})), 2).shape(), (Shape{1, 4, 3, 4}));
  EXPECT_EQ(conv2d(x, t.constant(Tensor({3, 3, 2, 4})), 1, Padding::valid).shape(), (Shape{1, 5, 4, 4}));
  EXPECT_EQ(conv2d(x, t.constant(Tensor({1, 1, 2, 5}))).shape(), (Shape{1, 7, 6, 5}));
}

TEST(Conv2d, PointwiseGradientsMatchFiniteDifferences) {
  Parameter x("x", random_tensor({1, 4, 4, 3}, 11));
  Parameter k("k", random_tensor({1, 1, 3, 2}, 12));
  const double err = grad_check({&x, &k}, [](Tape&, const std::vector<Var>& v) {
    return project(conv2d(v[0], v[1]), 13);
  });
  EXPECT_LT(err, kTol);
}

TEST(Conv2d, RejectsBadShapes) {
  Tape t;
  Var x = t.constant(Tensor({1, 5, 5, 2}));
  EXPECT_THROW(conv2d(x, t.constant(Tensor({3, 3, 3, 1}))), InputError);
  EXPECT_THROW(conv2d(x, t.constant(Tensor({2, 2, 2, 1}))), InputError);
  EXPECT_THROW(conv2d(x, t.constant(Tensor({3, 3, 2, 1})), 3), InputError);
  EXPECT_THROW(conv2d(x, t.constant(Tensor({7, 7, 2, 1})), 1, Padding::valid), InputError);
  EXPECT_THROW(conv2d(t.constant(Tensor({5, 5})), t.constant(Tensor({3, 3, 2, 1}))), InputError);
}

TEST(Resample, ConstantsArePreserved) {
  Tape t;
  Var c = t.constant(Tensor({1, 3, 5, 2}, 0.7));
  Var up = bilinear_upsample(c);
  EXPECT_EQ(up.shape(), (Shape{1, 6, 10, 2}));
  for (double v : up.value().data) EXPECT_DOUBLE_EQ(v, 0.7);
  Var back = avg_downsample(up);
  EXPECT_EQ(back.shape(), c.shape());
  for (double v : back.value().data) EXPECT_DOUBLE_EQ(v, 0.7);
}

TEST(Resample, GradientsMatchFiniteDifferences) {
  Parameter x("x", random_tensor({1, 4, 4, 1}, 14));
  EXPECT_LT(grad_check({&x}, [](Tape&, const std::vector<Var>& v) { return project(bilinear_upsample(v[0]), 15); }),
            kTol);
  EXPECT_LT(grad_check({&x}, [](Tape&, const std::vector<Var>& v) { return project(avg_downsample(v[0]), 16); }),
            kTol);
}

TEST(Resample, UpsampleGradientIsTheAdjoint) {
  const Tensor x = random_tensor({2, 5, 3, 2}, 17);
  const Tensor y = random_tensor({2, 10, 6, 2}, 18);
  Parameter px("x", x);
  Tape t;
  Var up = bilinear_upsample(t.parameter(px));
  double lhs = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) lhs += up.value().data[i] * y.data[i];
  t.backward(sum(hadamard(up, t.constant(y))));
  double rhs = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) rhs += x.data[i] * px.grad.data[i];
  EXPECT_NEAR(lhs, rhs, 1e-10);
}

TEST(Resample, UpsampleInterpolatesAtQuarterOffsets) {
  Tape t;
  Var up = bilinear_upsample(t.constant(Tensor({1, 1, 2, 1}, std::vector<double>{0.0, 1.0})));
  const std::vector<double> expect{0.0, 0.25, 0.75, 1.0};
  for (int r = 0; r < 2; ++r)
    for (int c = 0; c < 4; ++c) EXPECT_DOUBLE_EQ(up.value().data[r * 4 + c], expect[c]);
}

TEST(Resample, DownsampleRejectsOddSize) {
  Tape t;
  EXPECT_THROW(avg_downsample(t.constant(Tensor({1, 5, 4, 1}))), InputError);
  EXPECT_THROW(bilinear_upsample(t.constant(Tensor({1, 4, 4, 1})), 3), InputError);
}

TEST(Elementwise, AnalyticValues) {
  Tape t;
  EXPECT_EQ(sigmoid(t.constant(Tensor({1}, 0.0))).value().item(), 0.5);
  Tensor u = random_tensor({1, 4, 4, 2}, 19);
  Var uv = t.constant(u);
  EXPECT_EQ(hadamard(uv, t.constant(Tensor(u.shape, 1.0))).value().data, u.data);
  for (double v : hadamard(uv, t.constant(Tensor(u.shape, 0.0))).value().data) EXPECT_EQ(v, 0.0);
  Var lr = leaky_relu(t.constant(Tensor({2}, std::vector<double>{-2.0, 3.0})));
  EXPECT_DOUBLE_EQ(lr.value().data[0], -0.2);
  EXPECT_DOUBLE_EQ(lr.value().data[1], 3.0);
}

TEST(Elementwise, EachOpMatchesFiniteDifferences) {
  Parameter a("a", random_tensor({1, 4, 4, 2}, 20));
  Parameter b("b", random_tensor({1, 4, 4, 2}, 21));
  Parameter bias("bias", random_tensor({2}, 22));
  const std::vector<std::pair<const char*, Build>> cases{
      {"leaky_relu", [](Tape&, const std::vector<Var>& v) { return project(leaky_relu(v[0]), 30); }},
      {"sigmoid", [](Tape&, const std::vector<Var>& v) { return project(sigmoid(v[0]), 31); }},
      {"hadamard", [](Tape&, const std::vector<Var>& v) { return project(hadamard(v[0], v[1]), 32); }},
      {"concat", [](Tape&, const std::vector<Var>& v) { return project(concat_channels(v[0], v[1]), 33); }},
      {"instance_norm", [](Tape&, const std::vector<Var>& v) { return project(instance_norm(v[0]), 34); }},
      {"bias", [](Tape&, const std::vector<Var>& v) { return project(add_channel_bias(v[0], v[2]), 35); }},
      {"square", [](Tape&, const std::vector<Var>& v) { return project(square(v[0]), 36); }},
      {"sub", [](Tape&, const std::vector<Var>& v) { return project(sub(v[0], v[1]), 37); }},
      {"mean", [](Tape&, const std::vector<Var>& v) { return mean(hadamard(v[0], v[1])); }},
  };
  for (const auto& [name, build] : cases) EXPECT_LT(grad_check({&a, &b, &bias}, build), kTol) << name;
}

TEST(Elementwise, ConcatStacksChannels) {
  Tape t;
  Var c = concat_channels(t.constant(Tensor({1, 1, 2, 1}, std::vector<double>{1, 2})),
                          t.constant(Tensor({1, 1, 2, 2}, std::vector<double>{3, 4, 5, 6})));
  EXPECT_EQ(c.value().data, (std::vector<double>{1, 3, 4, 2, 5, 6}));
  EXPECT_THROW(concat_channels(t.constant(Tensor({1, 2, 2, 1})), t.constant(Tensor({1, 2, 3, 1}))), InputError);
  EXPECT_THROW(hadamard(t.constant(Tensor({1, 2, 2, 1})), t.constant(Tensor({1, 2, 2, 2}))), InputError);
}

TEST(Elementwise, InstanceNormStandardisesEachChannel) {
  Tape t;
  Var y = instance_norm(t.constant(random_tensor({2, 4, 4, 3}, 23, -10, 10)));
  for (int b = 0; b < 2; ++b)
    for (int c = 0; c < 3; ++c) {
      double m = 0, s = 0;
      for (int p = 0; p < 16; ++p) m += y.value().data[(b * 16 + p) * 3 + c];
      m /= 16;
      for (int p = 0; p < 16; ++p) s += std::pow(y.value().data[(b * 16 + p) * 3 + c] - m, 2);
      EXPECT_NEAR(m, 0.0, 1e-12);
      EXPECT_NEAR(s / 16, 1.0, 1e-5);
    }
}

TEST(Elementwise, FiniteOnBoundedInputs) {
  Tape t;
  Var x = t.constant(random_tensor({1, 4, 4, 2}, 24, -10, 10));
  Var flat = t.constant(Tensor({1, 4, 4, 2}, 10.0));
  for (Var y : {sigmoid(x), leaky_relu(x), instance_norm(x), instance_norm(flat), sigmoid(scale(flat, -1.0)),
                bilinear_upsample(x), avg_downsample(x)})
    EXPECT_TRUE(y.value().all_finite());
}

TEST(Losses, SmoothTvAndWeightedMeanMatchFiniteDifferences) {
  Parameter u("u", random_tensor({2, 5, 4, 1}, 25, 0, 1));
  const Tensor g = random_tensor({2, 5, 4, 1}, 26, 0.1, 1.0);
  EXPECT_LT(grad_check({&u}, [&](Tape&, const std::vector<Var>& v) { return smooth_tv(v[0], g); }), kTol);
  EXPECT_LT(grad_check({&u}, [&](Tape&, const std::vector<Var>& v) { return weighted_pixel_mean(v[0], g); }),
            kTol);
}

TEST(Losses, SmoothTvOfConstantIsNearZero) {
  Tape t;
  const Tensor g({1, 6, 6, 1}, 1.0);
  EXPECT_NEAR(smooth_tv(t.constant(Tensor({1, 6, 6, 1}, 0.3)), g).value().item(), 0.0, 1e-4 + 1e-12);
  // A vertical unit step contributes one unit per row: 6 / 36.
  Tensor step({1, 6, 6, 1});
  for (int r = 0; r < 6; ++r)
    for (int c = 3; c < 6; ++c) step.data[r * 6 + c] = 1.0;
  EXPECT_NEAR(smooth_tv(t.constant(step), g).value().item(), 6.0 / 36.0, 1e-4);
}

TEST(Backward, LinearAndQuadraticFunctionals) {
  Parameter x("x", random_tensor({1, 3, 3, 2}, 27));
  {
    Tape t;
    t.backward(sum(t.parameter(x)));
    for (double g : x.grad.data) EXPECT_EQ(g, 1.0);
  }
  x.zero_grad();
  {
    Tape t;
    Var v = t.parameter(x);
    t.backward(sum(hadamard(v, v)));
    for (std::size_t i = 0; i < x.value.size(); ++i) EXPECT_DOUBLE_EQ(x.grad.data[i], 2 * x.value.data[i]);
  }
}

TEST(Backward, ThreeLayerCompositeMatchesFiniteDifferences) {
  Parameter x("x", random_tensor({1, 8, 8, 2}, 28));
  Parameter k1("k1", random_tensor({3, 3, 2, 4}, 29, -0.5, 0.5));
  Parameter k2("k2", random_tensor({3, 3, 4, 4}, 30, -0.5, 0.5));
  Parameter k3("k3", random_tensor({1, 1, 8, 1}, 31, -0.5, 0.5));
  Parameter b3("b3", random_tensor({1}, 32));
  const double err = grad_check({&x, &k1, &k2, &k3, &b3}, [](Tape&, const std::vector<Var>& v) {
    Var h1 = leaky_relu(instance_norm(conv2d(v[0], v[1])));
    Var h2 = leaky_relu(instance_norm(conv2d(avg_downsample(h1), v[2])));
    Var cat = concat_channels(h1, bilinear_upsample(h2));
    Var out = sigmoid(add_channel_bias(conv2d(cat, v[3]), v[4]));
    return pixel_mean(square(out));
  });
  EXPECT_LT(err, kTol);
}

TEST(Backward, UnusedParameterGradientIsZero) {
  Parameter used("used", random_tensor({1, 2, 2, 1}, 33));
  Parameter unused("unused", random_tensor({1, 2, 2, 1}, 34));
  Tape t;
  t.parameter(unused);
  t.backward(sum(square(t.parameter(used))));
  for (double g : unused.grad.data) EXPECT_EQ(g, 0.0);
}

TEST(Backward, NonScalarLossIsRejected) {
  Parameter x("x", random_tensor({1, 2, 2, 1}, 35));
  Tape t;
  EXPECT_THROW(t.backward(square(t.parameter(x))), InputError);
  Tape other;
  Var foreign = sum(other.parameter(x));
  EXPECT_THROW(t.backward(foreign), InputError);
}

TEST(Backward, IsBitwiseDeterministic) {
  auto run = [] {
    Parameter x("x", random_tensor({1, 8, 8, 2}, 36));
    Parameter k("k", random_tensor({3, 3, 2, 3}, 37));
    Tape t;
    Var y = instance_norm(conv2d(t.parameter(x), t.parameter(k)));
    t.backward(smooth_tv(sigmoid(conv2d(y, t.constant(random_tensor({3, 3, 3, 1}, 38)))),
                         Tensor({1, 8, 8, 1}, 1.0)));
    std::vector<double> all = x.grad.data;
    all.insert(all.end(), k.grad.data.begin(), k.grad.data.end());
    return all;
  };
  const auto a = run();
  const auto b = run();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(std::bit_cast<std::uint64_t>(a[i]), std::bit_cast<std::uint64_t>(b[i]));
}

TEST(Adam, ZeroGradientLeavesParametersAndCountsStep) {
  Parameter p("p", random_tensor({3, 2}, 39));
  const Tensor before = p.value;
  AdamState st;
  std::vector<Parameter*> ps{&p};
  adam_step(ps, st);
  EXPECT_EQ(p.value.data, before.data);
  EXPECT_EQ(st.step, 1);
}

TEST(Adam, FirstStepIsBoundedByLearningRate) {
  Parameter p("p", random_tensor({10}, 40));
  p.grad = random_tensor({10}, 41, -5, 5);
  const Tensor before = p.value;
  AdamState st;
  std::vector<Parameter*> ps{&p};
  adam_step(ps, st);
  for (std::size_t i = 0; i < 10; ++i) {
    const double d = p.value.data[i] - before.data[i];
    EXPECT_LE(std::abs(d), st.cfg.lr * (1 + 1e-6));
    EXPECT_GT(std::abs(d), 0.99 * st.cfg.lr);
    EXPECT_LT(d * p.grad.data[i], 0.0);
  }
}

TEST(Adam, QuadraticLossDecreasesEveryStep) {
  Parameter p("p", Tensor({4}, 1.0));
  AdamState st;
  std::vector<Parameter*> ps{&p};
  double prev = 1e300;
  for (int k = 0; k < 10; ++k) {
    p.zero_grad();
    Tape t;
    Var loss = scale(sum(square(t.parameter(p))), 0.5);
    EXPECT_LT(loss.value().item(), prev);
    prev = loss.value().item();
    t.backward(loss);
    adam_step(ps, st);
  }
}

TEST(Adam, ShapeMismatchIsRejected) {
  Parameter p("p", Tensor({4}, 1.0));
  p.grad = Tensor({5});
  AdamState st;
  std::vector<Parameter*> ps{&p};
  EXPECT_THROW(adam_step(ps, st), InputError);
}

TEST(Checkpoint, RoundTripIsExact) {
  NamedTensors in{{"vm.k0", random_tensor({3, 3, 2, 16}, 42)}, {"meta.seed", Tensor::scalar(7)},
                  {"dip.b", Tensor({1}, -0.0)}};
  const auto dir = selseg::testing::temp_dir("ckpt");
  save_checkpoint(dir / "w.bin", in);
  const NamedTensors out = load_checkpoint(dir / "w.bin");
  ASSERT_EQ(out.size(), in.size());
  for (std::size_t i = 0; i < in.size(); ++i) {
    EXPECT_EQ(out[i].first, in[i].first);
    EXPECT_EQ(out[i].second.shape, in[i].second.shape);
    for (std::size_t j = 0; j < in[i].second.size(); ++j)
      EXPECT_EQ(std::bit_cast<std::uint64_t>(out[i].second.data[j]),
                std::bit_cast<std::uint64_t>(in[i].second.data[j]));
  }
}

TEST(Checkpoint, LayoutIsLittleEndian) {
  const std::string bytes = encode_checkpoint({{"a", Tensor({1}, 1.0)}});
  const std::string expect = std::string("SSEG") + std::string("\x01\0\0\0", 4) + std::string("\x01\0\0\0", 4) +
                             std::string("\x01\0\0\0", 4) + "a" + std::string("\x01\0\0\0", 4) +
                             std::string("\x01\0\0\0", 4) + std::string("\0\0\0\0\0\0\xf0\x3f", 8);
  EXPECT_EQ(bytes, expect);
}

TEST(Checkpoint, CorruptFilesAreRejected) {
  const std::string good = encode_checkpoint({{"w", random_tensor({2, 2}, 43)}});
  EXPECT_THROW(decode_checkpoint("XXXX" + good.substr(4)), InputError);
  EXPECT_THROW(decode_checkpoint(good.substr(0, good.size() - 3)), InputError);
  EXPECT_THROW(decode_checkpoint(good + "z"), InputError);
  std::string v2 = good;
  v2[4] = 2;
  EXPECT_THROW(decode_checkpoint(v2), InputError);
  EXPECT_THROW(load_checkpoint("/nonexistent/w.bin"), InputError);
}
