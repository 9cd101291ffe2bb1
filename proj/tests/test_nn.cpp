#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <vector>

#include "frk/nn/builders.hpp"
#include "frk/nn/network.hpp"
#include "frk/nn/train.hpp"
#include "gradcheck.hpp"

using namespace frk;
using namespace frk::nn;
using testing_support::check_layer;

namespace {

constexpr double kGradTol = 1e-4;

FrLinear make_linear(std::size_t in, std::size_t out, bool bias, Rng& rng) {
  std::optional<FreqParam> b;
  if (bias) b = FreqParam::from_spatial({out}, tensor_rand_normal({out}, 0.0, 1.0, rng));
  return FrLinear("fc", LinearSpec{in, out, bias}, FreqParam::init({out, in}, 1.0, rng), std::move(b));
}

FrConv2d make_conv(const Conv2dSpec& s, Rng& rng) {
  std::optional<FreqParam> b;
  if (s.bias) b = FreqParam::from_spatial({s.out_channels}, tensor_rand_normal({s.out_channels}, 0.0, 1.0, rng));
  return FrConv2d("conv", s, FreqParam::init({s.out_channels, s.in_channels, s.kernel, s.kernel}, 1.0, rng),
                  std::move(b));
}

// Direct seven-loop cross-correlation.
Tensor naive_conv(const Tensor& x, const Tensor& w, const Tensor* b, std::size_t stride, std::size_t pad) {
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t o = w.dim(0), k = w.dim(2);
  const std::size_t oh = (h + 2 * pad - k) / stride + 1, ow = (wd + 2 * pad - k) / stride + 1;
  Tensor y({n, o, oh, ow}, 0.0);
  for (std::size_t bi = 0; bi < n; ++bi)
    for (std::size_t oc = 0; oc < o; ++oc)
      for (std::size_t i = 0; i < oh; ++i)
        for (std::size_t j = 0; j < ow; ++j) {
          double acc = b ? (*b)[oc] : 0.0;
          for (std::size_t ic = 0; ic < c; ++ic)
            for (std::size_t u = 0; u < k; ++u)
              for (std::size_t v = 0; v < k; ++v) {
                const long yy = static_cast<long>(i * stride + u) - static_cast<long>(pad);
                const long xx = static_cast<long>(j * stride + v) - static_cast<long>(pad);
                if (yy < 0 || xx < 0 || yy >= static_cast<long>(h) || xx >= static_cast<long>(wd)) continue;
                acc += x.at({bi, ic, static_cast<std::size_t>(yy), static_cast<std::size_t>(xx)}) *
                       w.at({oc, ic, u, v});
              }
          y.at({bi, oc, i, j}) = acc;
        }
  return y;
}

const ForwardContext kEval{Mode::eval, nullptr};

}  // namespace

TEST(FrLinear, ZeroWeightGivesBiasRows) {
  const Tensor bias({3}, std::vector<double>{1.5, -2.0, 0.25});
  FrLinear fc("fc", LinearSpec{4, 3, true}, FreqParam::zeros({3, 4}), FreqParam::from_spatial({3}, bias));
  Rng rng(1);
  const Tensor y = fc.forward(tensor_rand_normal({5, 4}, 0.0, 1.0, rng), kEval);
  ASSERT_EQ(y.shape(), (Shape{5, 3}));
  for (std::size_t r = 0; r < 5; ++r)
    for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(y.at({r, c}), bias[c], 1e-12);
}

TEST(FrLinear, ScalarProduct) {
  FrLinear fc("fc", LinearSpec{1, 1, true}, FreqParam::from_spatial({1, 1}, Tensor({1, 1}, 2.0)),
              FreqParam::zeros({1}));
  const Tensor y = fc.forward(Tensor({1, 1}, 3.0), kEval);
  EXPECT_DOUBLE_EQ(y[0], 6.0);
}

TEST(FrLinear, RejectsWrongWidth) {
  Rng rng(2);
  FrLinear fc = make_linear(4, 3, true, rng);
  EXPECT_THROW(fc.forward(Tensor({2, 5}, 1.0), kEval), ShapeError);
  EXPECT_THROW(fc.forward(Tensor({4}, 1.0), kEval), ShapeError);
}

TEST(FrLinear, GradientMatchesFiniteDifferences) {
  Rng rng(3);
  for (bool bias : {true, false}) {
    FrLinear fc = make_linear(7, 5, bias, rng);
    const auto r = check_layer(fc, tensor_rand_normal({3, 7}, 0.0, 1.0, rng), Mode::eval, rng);
    EXPECT_GE(r.checked, 40u);
    EXPECT_LT(r.worst, kGradTol) << r.worst_at;
  }
}

TEST(FrLinear, GradientWithTruncatedWeights) {
  Rng rng(4);
  FrLinear fc = make_linear(6, 6, true, rng);
  fc.weight().param.truncate(9);
  fc.bias()->param.truncate(2);
  const auto r = check_layer(fc, tensor_rand_normal({4, 6}, 0.0, 1.0, rng), Mode::eval, rng);
  EXPECT_LT(r.worst, kGradTol) << r.worst_at;
}

TEST(FrConv2d, OneByOneIdentity) {
  Tensor w({2, 2, 1, 1}, 0.0);
  w.at({0, 0, 0, 0}) = 1.0;
  w.at({1, 1, 0, 0}) = 1.0;
  FrConv2d conv("c", Conv2dSpec{2, 2, 1, 1, 0, false}, FreqParam::from_spatial({2, 2, 1, 1}, w), std::nullopt);
  Rng rng(5);
  const Tensor x = tensor_rand_normal({2, 2, 3, 4}, 0.0, 1.0, rng);
  EXPECT_LT(max_abs_diff(conv.forward(x, kEval), x), 1e-12);
}

TEST(FrConv2d, MatchesDirectLoops) {
  Rng rng(6);
  for (const Conv2dSpec& s : {Conv2dSpec{3, 4, 3, 1, 1, true}, Conv2dSpec{2, 5, 3, 2, 0, true},
                              Conv2dSpec{1, 2, 5, 2, 2, false}, Conv2dSpec{2, 3, 2, 3, 1, true}}) {
    FrConv2d conv = make_conv(s, rng);
    const Tensor x = tensor_rand_normal({2, s.in_channels, 7, 6}, 0.0, 1.0, rng);
    const Tensor w = conv.weight().param.reconstruct();
    const Tensor b = s.bias ? conv.bias()->param.reconstruct() : Tensor();
    const Tensor expected = naive_conv(x, w, s.bias ? &b : nullptr, s.stride, s.padding);
    const Tensor got = conv.forward(x, kEval);
    ASSERT_EQ(got.shape(), expected.shape());
    EXPECT_LT(max_abs_diff(got, expected), 1e-11);
  }
}

TEST(FrConv2d, GradientMatchesFiniteDifferences) {
  Rng rng(7);
  for (const Conv2dSpec& s : {Conv2dSpec{2, 3, 3, 1, 1, true}, Conv2dSpec{3, 2, 3, 2, 0, true},
                              Conv2dSpec{2, 3, 2, 1, 0, false}}) {
    FrConv2d conv = make_conv(s, rng);
    conv.weight().param.truncate(conv.weight().param.total() - 3);
    const auto r = check_layer(conv, tensor_rand_normal({2, s.in_channels, 5, 5}, 0.0, 1.0, rng), Mode::eval, rng);
    EXPECT_GE(r.checked, 40u);
    EXPECT_LT(r.worst, kGradTol) << r.worst_at;
  }
}

TEST(FrConv2d, AlexNetFirstLayerShape) {
  const ModelGraph g = build_alexnet_fr(1000);
  const auto& first = std::get<Conv2dSpec>(g.layers.front().op);
  EXPECT_EQ(first.in_channels, 3u);
  EXPECT_EQ(first.out_channels, 64u);
  EXPECT_EQ(first.kernel, 11u);
  EXPECT_EQ(first.stride, 4u);
  EXPECT_EQ(first.padding, 2u);
  EXPECT_EQ(g.infer_shapes().front().second, (Shape{64, 55, 55}));
}

TEST(Activations, ReluAndRelu6) {
  ClampedRelu relu("r", std::numeric_limits<double>::infinity());
  const Tensor y = relu.forward(Tensor({1, 3}, std::vector<double>{-1.0, 0.0, 2.0}), kEval);
  EXPECT_EQ(y.storage(), (std::vector<double>{0.0, 0.0, 2.0}));
  ClampedRelu relu6("r6", 6.0);
  EXPECT_EQ(relu6.forward(Tensor({1, 1}, 7.0), kEval)[0], 6.0);
  EXPECT_EQ(relu6.forward(Tensor({1, 1}, -7.0), kEval)[0], 0.0);
}

TEST(Activations, GradientMasksClampedRegion) {
  ClampedRelu relu6("r6", 6.0);
  relu6.forward(Tensor({1, 4}, std::vector<double>{-1.0, 3.0, 6.5, 0.5}), kEval);
  const Tensor g = relu6.backward(Tensor({1, 4}, 1.0));
  EXPECT_EQ(g.storage(), (std::vector<double>{0.0, 1.0, 0.0, 1.0}));
}

TEST(Pooling, MaxPoolShapeAndValues) {
  MaxPool2d pool("p", MaxPool2dSpec{3, 2});
  EXPECT_EQ(pool.forward(Tensor({1, 1, 55, 55}, 0.0), kEval).shape(), (Shape{1, 1, 27, 27}));

  MaxPool2d p2("p", MaxPool2dSpec{2, 2});
  Tensor x({1, 1, 2, 4}, std::vector<double>{1, 5, 2, 0, 3, 4, -1, 7});
  EXPECT_EQ(p2.forward(x, kEval).storage(), (std::vector<double>{5, 7}));
  EXPECT_THROW(p2.forward(Tensor({1, 1, 1, 4}, 0.0), kEval), ShapeError);
  EXPECT_THROW(infer_layer_shape(LayerSpec{"p", MaxPool2dSpec{5, 1}}, Shape{1, 3, 3}), ShapeError);
}

TEST(Pooling, AdaptiveAvgBinsByHand) {
  AdaptiveAvgPool2d pool("a", AdaptiveAvgPool2dSpec{2, 2});
  // 3x3 input into 2x2: bins [0,2) and [1,3) on each axis
  Tensor x({1, 1, 3, 3}, std::vector<double>{1, 2, 3, 4, 5, 6, 7, 8, 9});
  const Tensor y = pool.forward(x, kEval);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 2, 2}));
  EXPECT_DOUBLE_EQ(y[0], (1 + 2 + 4 + 5) / 4.0);
  EXPECT_DOUBLE_EQ(y[1], (2 + 3 + 5 + 6) / 4.0);
  EXPECT_DOUBLE_EQ(y[2], (4 + 5 + 7 + 8) / 4.0);
  EXPECT_DOUBLE_EQ(y[3], (5 + 6 + 8 + 9) / 4.0);

  AdaptiveAvgPool2d global("g", AdaptiveAvgPool2dSpec{1, 1});
  EXPECT_DOUBLE_EQ(global.forward(x, kEval)[0], 5.0);
}

TEST(Pooling, Gradients) {
  Rng rng(8);
  MaxPool2d mp("m", MaxPool2dSpec{3, 2});
  auto r = check_layer(mp, tensor_rand_normal({2, 2, 7, 7}, 0.0, 1.0, rng), Mode::eval, rng, 0, 40);
  EXPECT_LT(r.worst, kGradTol) << r.worst_at;
  AdaptiveAvgPool2d ap("a", AdaptiveAvgPool2dSpec{3, 2});
  r = check_layer(ap, tensor_rand_normal({2, 2, 7, 5}, 0.0, 1.0, rng), Mode::eval, rng, 0, 40);
  EXPECT_LT(r.worst, kGradTol) << r.worst_at;
}

TEST(Dropout, EvalIsIdentityTrainScales) {
  Dropout d("d", DropoutSpec{0.5});
  Rng rng(9);
  const Tensor x = tensor_rand_normal({4, 50}, 0.0, 1.0, rng);
  EXPECT_EQ(d.forward(x, kEval), x);

  Rng drop(10);
  const Tensor y = d.forward(x, {Mode::train, &drop});
  std::size_t zeros = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (y[i] == 0.0) {
      ++zeros;
    } else {
      EXPECT_DOUBLE_EQ(y[i], 2.0 * x[i]);
    }
  }
  EXPECT_GT(zeros, 60u);
  EXPECT_LT(zeros, 140u);
  const Tensor g = d.backward(Tensor(x.shape(), 1.0));
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(g[i], y[i] == 0.0 ? 0.0 : 2.0);

  EXPECT_THROW(d.forward(x, {Mode::train, nullptr}), ArgumentError);
  EXPECT_THROW(Dropout("bad", DropoutSpec{1.0}), RangeError);
  EXPECT_THROW(Dropout("bad", DropoutSpec{-0.1}), RangeError);
}

TEST(BatchNorm, TrainNormalizesPerChannel) {
  BatchNorm2d bn("bn", BatchNorm2dSpec{2});
  Rng rng(11);
  Tensor x = tensor_rand_normal({4, 2, 3, 3}, 3.0, 2.0, rng);
  const Tensor y = bn.forward(x, {Mode::train, nullptr});
  for (std::size_t c = 0; c < 2; ++c) {
    double sum = 0, sq = 0;
    for (std::size_t n = 0; n < 4; ++n)
      for (std::size_t i = 0; i < 9; ++i) {
        const double v = y[(n * 2 + c) * 9 + i];
        sum += v;
        sq += v * v;
      }
    EXPECT_NEAR(sum / 36.0, 0.0, 1e-12);
    EXPECT_NEAR(sq / 36.0, 1.0, 1e-5);
  }
}

TEST(BatchNorm, RunningStatsAndEvalMode) {
  BatchNorm2d bn("bn", BatchNorm2dSpec{1});
  Tensor x({2, 1, 1, 2}, std::vector<double>{1, 2, 3, 6});
  bn.forward(x, {Mode::train, nullptr});
  // mean 3, unbiased variance (4+1+0+9)/3
  EXPECT_NEAR(bn.running_mean()[0], 0.1 * 3.0, 1e-12);
  EXPECT_NEAR(bn.running_var()[0], 0.9 + 0.1 * 14.0 / 3.0, 1e-12);

  bn.gamma().value[0] = 2.0;
  bn.beta().value[0] = 0.5;
  const Tensor y = bn.forward(x, kEval);
  const double denom = std::sqrt(bn.running_var()[0] + 1e-5);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(y[i], 2.0 * (x[i] - bn.running_mean()[0]) / denom + 0.5, 1e-12);
}

TEST(BatchNorm, GradientsTrainAndEval) {
  Rng rng(12);
  for (Mode mode : {Mode::train, Mode::eval}) {
    BatchNorm2d bn("bn", BatchNorm2dSpec{3});
    for (std::size_t c = 0; c < 3; ++c) {
      bn.gamma().value[c] = rng.normal(1.0, 0.3);
      bn.beta().value[c] = rng.normal(0.0, 0.3);
      bn.running_mean()[c] = rng.normal(0.0, 0.5);
      bn.running_var()[c] = 0.5 + rng.uniform();
    }
    const auto r = check_layer(bn, tensor_rand_normal({3, 3, 2, 3}, 0.5, 1.5, rng), mode, rng, 20, 30);
    EXPECT_GE(r.checked, 36u);
    EXPECT_LT(r.worst, kGradTol) << r.worst_at;
  }
}

TEST(Residual, AddsBodyAndBackpropagatesBothPaths) {
  Rng rng(13);
  std::vector<std::unique_ptr<Layer>> body;
  body.push_back(std::make_unique<FrConv2d>("conv", Conv2dSpec{2, 2, 3, 1, 1, false},
                                            FreqParam::init({2, 2, 3, 3}, 1.0, rng), std::nullopt));
  body.push_back(std::make_unique<BatchNorm2d>("bn", BatchNorm2dSpec{2}));
  body.push_back(std::make_unique<ClampedRelu>("r6", 6.0));
  Residual res("res", std::move(body));
  const Tensor x = tensor_rand_normal({2, 2, 4, 4}, 0.0, 1.0, rng);
  const auto r = check_layer(res, x, Mode::train, rng);
  EXPECT_LT(r.worst, kGradTol) << r.worst_at;
}

TEST(Flatten, KeepsBatchAxis) {
  Flatten f("f");
  Rng rng(14);
  const Tensor x = tensor_rand_normal({2, 3, 2, 2}, 0.0, 1.0, rng);
  const Tensor y = f.forward(x, kEval);
  EXPECT_EQ(y.shape(), (Shape{2, 12}));
  EXPECT_EQ(y.storage(), x.storage());
  EXPECT_EQ(f.backward(y).shape(), x.shape());
}

TEST(Builders, ParameterAudits) {
  EXPECT_EQ(build_alexnet_fr(1000).total_parameters(), 61'100'840u);
  EXPECT_EQ(build_lenet5_fr(10).total_parameters(), 61'706u);
  const auto eff = build_efficientnetb0_fr(1000).parameters();
  ASSERT_EQ(eff.front().name, "stem.0.weight");
  EXPECT_EQ(param_count(eff.front().shape), 864u);
  EXPECT_THROW(build_alexnet_fr(0), ArgumentError);
}

TEST(Builders, HandSumsPerLayer) {
  // independent recount from the layer formulas
  const auto conv = [](std::size_t i, std::size_t o, std::size_t k, bool b) { return i * o * k * k + (b ? o : 0); };
  const auto lin = [](std::size_t i, std::size_t o) { return i * o + o; };
  const std::size_t alex = conv(3, 64, 11, true) + conv(64, 192, 5, true) + conv(192, 384, 3, true) +
                           conv(384, 256, 3, true) + conv(256, 256, 3, true) + lin(9216, 4096) +
                           lin(4096, 4096) + lin(4096, 1000);
  EXPECT_EQ(alex, build_alexnet_fr(1000).total_parameters());
  const std::size_t lenet = conv(1, 6, 5, true) + conv(6, 16, 5, true) + lin(400, 120) + lin(120, 84) + lin(84, 10);
  EXPECT_EQ(lenet, build_lenet5_fr(10).total_parameters());
}

TEST(Builders, MBConvResidualRule) {
  EXPECT_FALSE((MBConvSpec{16, 24, 6, 3, 2}.use_residual()));
  EXPECT_TRUE((MBConvSpec{24, 24, 6, 3, 1}.use_residual()));
  EXPECT_FALSE((MBConvSpec{24, 40, 6, 5, 1}.use_residual()));
  const auto blocks = efficientnetb0_blocks();
  EXPECT_EQ(blocks.front().in_channels, 32u);
  EXPECT_EQ(blocks.back().out_channels, 320u);
  for (std::size_t i = 1; i < blocks.size(); ++i) EXPECT_EQ(blocks[i].in_channels, blocks[i - 1].out_channels);
}

TEST(Builders, ShapePropagation) {
  EXPECT_EQ(build_alexnet_fr(1000).output_shape(), (Shape{1000}));
  EXPECT_EQ(build_lenet5_fr(10).output_shape(), (Shape{10}));
  const ModelGraph eff = build_efficientnetb0_fr(7);
  EXPECT_EQ(eff.output_shape(), (Shape{7}));
  Shape before_pool;
  for (const auto& [name, shape] : eff.infer_shapes()) {
    if (name == "head.2") before_pool = shape;
  }
  EXPECT_EQ(before_pool, (Shape{1280, 7, 7}));
}

TEST(Builders, ShapesAgreeWithWindowFormula) {
  // every conv/pool in both listings, checked against floor((in + 2p - k)/s) + 1
  for (const ModelGraph& g : {build_alexnet_fr(10), build_efficientnetb0_fr(10)}) {
    Shape cur = g.input;
    const std::function<void(const LayerSpec&)> visit = [&](const LayerSpec& l) {
      Shape next = infer_layer_shape(l, cur);
      if (const auto* c = std::get_if<Conv2dSpec>(&l.op)) {
        EXPECT_EQ(next[1], (cur[1] + 2 * c->padding - c->kernel) / c->stride + 1) << l.name;
        EXPECT_EQ(next[0], c->out_channels);
      } else if (const auto* p = std::get_if<MaxPool2dSpec>(&l.op)) {
        EXPECT_EQ(next[1], (cur[1] - p->kernel) / p->stride + 1) << l.name;
      } else if (const auto* r = std::get_if<ResidualSpec>(&l.op)) {
        const Shape entry = cur;
        for (const auto& inner : r->body) visit(inner);
        EXPECT_EQ(cur, entry);
        return;
      }
      cur = next;
    };
    for (const auto& l : g.layers) visit(l);
  }
}

TEST(Network, LeNetForwardAndEvalDeterminism) {
  Rng rng(15);
  Network net(build_lenet5_fr(10), rng);
  const Tensor x = tensor_rand_normal({2, 1, 32, 32}, 0.0, 1.0, rng);
  const Tensor a = net.forward(x, kEval);
  EXPECT_EQ(a.shape(), (Shape{2, 10}));
  EXPECT_TRUE(a.all_finite());
  EXPECT_EQ(net.forward(x, kEval), a);
  EXPECT_THROW(net.forward(Tensor({2, 1, 28, 28}, 0.0), kEval), ShapeError);
}

TEST(Network, CompressedLeNetStillRuns) {
  Rng rng(16);
  Network net(build_lenet5_fr(10), rng);
  net.truncate_to_total(776);
  EXPECT_EQ(net.kept_total(), 776u);
  EXPECT_EQ(net.compression().kept_total, 776u);
  EXPECT_TRUE(net.forward(tensor_rand_normal({1, 1, 32, 32}, 0.0, 1.0, rng), kEval).all_finite());
}

TEST(Network, SaveLoadRoundTrip) {
  Rng rng(17);
  Network net(build_tiny_convnet(3), rng);
  net.truncate_to_fraction(0.5);
  const auto dir = testing_support::scratch_dir("nn_roundtrip");
  net.save(dir);
  Network back = load_network(dir);
  EXPECT_EQ(back.kept_total(), net.kept_total());
  const Tensor x = tensor_rand_normal({3, 1, 8, 8}, 0.0, 1.0, rng);
  const Tensor a = net.forward(x, kEval), b = back.forward(x, kEval);
  // half-precision payload
  EXPECT_LT(max_abs_diff(a, b), 0.05 * (1.0 + norm2(a)));
}

TEST(Network, EfficientNetBatchNormBuffersRoundTrip) {
  Rng rng(18);
  Network net(build_efficientnetb0_fr(4), rng);
  for (auto& [name, t] : net.buffers()) t->fill(0.25);
  const auto dir = testing_support::scratch_dir("nn_buffers");
  net.save(dir);
  Network back = load_network(dir);
  ASSERT_EQ(back.buffers().size(), net.buffers().size());
  for (const auto& [name, t] : back.buffers()) {
    for (double v : t->storage()) ASSERT_EQ(v, 0.25) << name;
  }
}

namespace {

struct BlobFixture {
  ClassificationSet data;
  Network net;
};

BlobFixture blob_fixture(std::uint64_t init_seed = 1) {
  Rng data_rng(7);
  ClassificationSet data = make_blobs(32, 2, 8, 0.3, data_rng);
  Rng init(init_seed);
  return {std::move(data), Network(build_tiny_convnet(2), init)};
}

}  // namespace

TEST(Train, ZeroLearningRateOnlyTruncates) {
  auto fx = blob_fixture();
  std::vector<Tensor> before;
  for (auto* s : fx.net.frequency_params()) before.push_back(s->param.coeffs());
  TrainConfig cfg;
  cfg.lr = 0.0;
  cfg.epochs = 3;
  cfg.keep_fraction = 0.5;
  train(fx.net, fx.data, cfg);
  const auto& slots = fx.net.frequency_params();
  for (std::size_t i = 0; i < slots.size(); ++i) {
    const auto& p = slots[i]->param;
    for (std::size_t k = 0; k < p.total(); ++k) {
      EXPECT_EQ(p.coeffs()[k], p.is_kept(k) ? before[i][k] : 0.0) << slots[i]->name << "[" << k << "]";
    }
  }
}

TEST(Train, KeepNeverGrowsAndScheduleShrinks) {
  auto fx = blob_fixture();
  TrainConfig cfg;
  cfg.epochs = 20;
  cfg.keep_fraction = 0.1;
  std::vector<std::size_t> per_param_prev;
  for (auto* s : fx.net.frequency_params()) per_param_prev.push_back(s->param.keep());
  const TrainingLog log = train(fx.net, fx.data, cfg, [&](const EpochLog&) {
    const auto& slots = fx.net.frequency_params();
    for (std::size_t i = 0; i < slots.size(); ++i) {
      EXPECT_LE(slots[i]->param.keep(), per_param_prev[i]);
      per_param_prev[i] = slots[i]->param.keep();
    }
  });
  ASSERT_EQ(log.epochs.size(), 20u);
  std::size_t target = 0;
  for (auto* s : fx.net.frequency_params()) target += keep_for_fraction(s->param.total(), 0.1);
  for (std::size_t e = 1; e < log.epochs.size(); ++e) {
    EXPECT_LE(log.epochs[e].kept_total, log.epochs[e - 1].kept_total);
    EXPECT_LE(log.epochs[e].truncated_this_epoch, log.epochs[e - 1].truncated_this_epoch);
  }
  EXPECT_EQ(log.epochs.back().kept_total, target);
}

TEST(Train, ReachesFullAccuracyOnBlobs) {
  auto fx = blob_fixture();
  TrainConfig cfg;
  cfg.epochs = 200;
  cfg.seed = 3;
  const TrainingLog log = train(fx.net, fx.data, cfg);
  EXPECT_GE(log.epochs.back().accuracy, 0.99);
  EXPECT_LT(log.epochs.back().loss, log.epochs.front().loss);
}

TEST(Train, NonFiniteInputAborts) {
  auto fx = blob_fixture();
  for (std::size_t i = 0; i < fx.data.inputs.size(); ++i) fx.data.inputs[i] = std::numeric_limits<double>::quiet_NaN();
  TrainConfig cfg;
  cfg.epochs = 1;
  try {
    train(fx.net, fx.data, cfg);
    FAIL() << "expected DivergenceError";
  } catch (const DivergenceError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("epoch 1"), std::string::npos) << msg;
    EXPECT_NE(msg.find("input"), std::string::npos) << msg;
  }
}

TEST(Train, NonFiniteWeightNamesLayer) {
  auto fx = blob_fixture();
  fx.net.frequency_params().front()->param.set_coeff(0, std::numeric_limits<double>::infinity());
  TrainConfig cfg;
  cfg.epochs = 1;
  try {
    train(fx.net, fx.data, cfg);
    FAIL() << "expected DivergenceError";
  } catch (const DivergenceError& e) {
    EXPECT_NE(std::string(e.what()).find("conv1"), std::string::npos) << e.what();
  }
}

TEST(Train, SameSeedSameLog) {
  TrainConfig cfg;
  cfg.epochs = 5;
  cfg.keep_fraction = 0.3;
  cfg.seed = 9;
  auto a = blob_fixture(), b = blob_fixture();
  EXPECT_EQ(train(a.net, a.data, cfg).to_jsonl(), train(b.net, b.data, cfg).to_jsonl());
}

TEST(Train, LogJsonlRoundTrip) {
  TrainingLog log;
  log.epochs.push_back({1, 0.5, 0.75, 100, 20});
  log.epochs.push_back({2, 0.25, 1.0, 90, 10});
  const std::string text = log.to_jsonl();
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 2);
  EXPECT_EQ(TrainingLog::from_jsonl(text).to_jsonl(), text);
}

TEST(Train, ConfigValidation) {
  auto fx = blob_fixture();
  TrainConfig cfg;
  cfg.keep_fraction = 0.0;
  EXPECT_THROW(train(fx.net, fx.data, cfg), RangeError);
  cfg = TrainConfig{};
  cfg.batch = 0;
  EXPECT_THROW(train(fx.net, fx.data, cfg), RangeError);
  cfg = TrainConfig{};
  cfg.decay = 1.0;
  EXPECT_THROW(train(fx.net, fx.data, cfg), RangeError);
}

TEST(Loss, SoftmaxCrossEntropyGradient) {
  Rng rng(19);
  Tensor logits = tensor_rand_normal({3, 4}, 0.0, 2.0, rng);
  const std::vector<std::size_t> labels{0, 3, 1};
  const LossResult base = softmax_cross_entropy(logits, labels);
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double orig = logits[i];
    const double numeric = testing_support::central_difference(
        [&](double v) {
          logits[i] = v;
          return softmax_cross_entropy(logits, labels).loss;
        },
        orig);
    logits[i] = orig;
    EXPECT_LT(testing_support::relative_error(base.grad[i], numeric), kGradTol);
  }
}
