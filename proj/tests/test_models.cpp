#include <gtest/gtest.h>

#include <random>

#include "onconet/models.hpp"
#include "support.hpp"

using namespace onconet;
using testing_support::small_model;

namespace {

Tensor<float> random_input(Shape s, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return oracle::random_tensor<float>(std::move(s), rng);
}

ModelConfig canonical(Variant v, bool fcn, std::size_t channels) {
  ModelConfig c;
  c.variant = v;
  c.use_fcn = fcn;
  c.input_channels = channels;
  return c;
}

std::size_t total(const ModelConfig& c) { return Model<float>(c, 0).ledger().total; }

}  // namespace

TEST(Fcn, OutputShapeEqualsInputShape) {
  ModelConfig cfg = small_model();
  for (std::size_t size : {16u, 32u, 64u}) {
    cfg.input_size = size;
    auto fcn = build_fcn<float>(cfg, 1);
    for (std::size_t channels : {1u, 2u}) {
      Tape<float> t(false);
      const auto y = fcn(t, t.constant(random_input({2, channels, size, size}, size)));
      EXPECT_EQ(y.shape(), (Shape{2, channels, size, size}));
    }
  }
}

TEST(Fcn, CanonicalRoundTripAt512) {
  ModelConfig cfg;
  cfg.input_channels = 1;
  auto fcn = build_fcn<float>(cfg, 1);
  Tape<float> t(false);
  EXPECT_EQ(fcn(t, t.constant(Tensor<float>({1, 1, 512, 512}))).shape(), (Shape{1, 1, 512, 512}));
}

TEST(Fcn, ChannelsAreProcessedIndependently) {
  ModelConfig cfg = small_model(32);
  auto fcn = build_fcn<float>(cfg, 2);
  auto x = random_input({1, 2, 32, 32}, 3);
  Tape<float> t0(false);
  const Tensor<float> y0 = fcn(t0, t0.constant(x)).value();
  for (std::size_t p = 0; p < 32 * 32; ++p) x[32 * 32 + p] += 0.5f;  // channel 1 only
  Tape<float> t1(false);
  const Tensor<float> y1 = fcn(t1, t1.constant(x)).value();
  std::size_t changed = 0;
  for (std::size_t p = 0; p < 32 * 32; ++p) {
    EXPECT_EQ(y0[p], y1[p]) << "channel 0 moved at " << p;
    changed += y0[32 * 32 + p] != y1[32 * 32 + p];
  }
  EXPECT_GT(changed, 0u);
}

TEST(Fcn, SharedWeightsGiveIdenticalChannelsForIdenticalInputs) {
  ModelConfig cfg = small_model(16);
  auto fcn = build_fcn<float>(cfg, 4);
  const auto one = random_input({1, 1, 16, 16}, 5);
  Tensor<float> two({1, 2, 16, 16});
  for (std::size_t p = 0; p < 256; ++p) two[p] = two[256 + p] = one[p];
  Tape<float> t(false);
  const Tensor<float> y = fcn(t, t.constant(two)).value();
  for (std::size_t p = 0; p < 256; ++p) EXPECT_EQ(y[p], y[256 + p]);
}

TEST(Fcn, IndivisibleSizeIsRejected) {
  ModelConfig cfg = small_model();
  cfg.input_size = 24;
  EXPECT_THROW(build_fcn<float>(cfg), std::invalid_argument);
  auto fcn = build_fcn<float>(small_model(16));
  Tape<float> t(false);
  EXPECT_THROW(fcn(t, t.constant(Tensor<float>({1, 1, 24, 24}))), ShapeError);
}

TEST(AggResCnn, ProbabilitiesAreNByTwoAndSumToOne) {
  for (std::size_t n : {1u, 3u, 5u}) {
    Model<float> m(small_model(32), 7);
    const auto p = m.predict(random_input({n, 2, 32, 32}, n));
    ASSERT_EQ(p.shape(), (Shape{n, 2}));
    for (std::size_t i = 0; i < n; ++i) {
      EXPECT_GE(p[2 * i], 0.0f);
      EXPECT_NEAR(static_cast<double>(p[2 * i]) + p[2 * i + 1], 1.0, 1e-6);
    }
  }
}

TEST(AggResCnn, CanonicalDepthIsEighteen) {
  auto m = build_aggrescnn<float>(ModelConfig{});
  EXPECT_EQ(m.depth(), 18u);
}

TEST(AggResCnn, GroupsFollowCardinality) {
  const auto l = build_aggrescnn<float>(ModelConfig{}).ledger();
  // stem has no groups; stage 1 conv1 is 16 -> 32 so groups = 16; other block convs use 32.
  // Rows: stem, s1.b1 {conv1, conv2, proj}, s1.b2 {conv1, conv2}, s2.b1 {conv1, conv2, ...}.
  EXPECT_EQ(l.rows[0].kernel_shape, "[16,2,3,3]");
  EXPECT_EQ(l.rows[1].kernel_shape, "[32,1,3,3] g16");
  EXPECT_EQ(l.rows[2].kernel_shape, "[32,1,3,3] g32");
  EXPECT_EQ(l.rows[6].kernel_shape, "[64,1,3,3] g32");
  EXPECT_EQ(l.rows[7].kernel_shape, "[64,2,3,3] g32");
}

TEST(AggResCnn, IndivisibleGroupsAreRejected) {
  ModelConfig cfg = small_model();
  cfg.use_fcn = false;
  cfg.stem_channels = 6;
  cfg.stage_channels = {8, 16};
  cfg.cardinality = 4;  // min(4, 6, 8) = 4 does not divide 6
  EXPECT_THROW(build_aggrescnn<float>(cfg), std::invalid_argument);
}

TEST(AggResCnn, ZeroedBlockIsIdentityOnSkip) {
  ModelConfig cfg = small_model(16);
  cfg.use_fcn = false;
  cfg.blocks_per_stage = 2;
  auto net = build_aggrescnn<float>(cfg, 3);
  auto& blk = net.blocks()[1];  // stride 1, equal channels, no projection
  ASSERT_FALSE(blk.proj.has_value());
  for (auto* t : {&blk.conv1.weight, &blk.conv1.bias, &blk.conv2.weight, &blk.conv2.bias}) t->fill(0.0f);
  const auto h = random_input({2, cfg.stage_channels[0], 8, 8}, 9);
  Tape<float> t(false);
  Var<float> x = t.constant(h);
  Var<float> r = ad::selu(blk.conv2(t, ad::selu(blk.conv1(t, x))));
  const auto y = ad::add(r, x).value();
  for (std::size_t i = 0; i < h.numel(); ++i) EXPECT_EQ(y[i], h[i]);
}

TEST(AggResCnn, ArgmaxInvariantToLogitShift) {
  Model<float> m(small_model(16), 11);
  const auto x = random_input({4, 2, 16, 16}, 12);
  Tape<float> t(false);
  const auto z = m.logits(t, t.constant(x)).value();
  auto shifted = z;
  for (auto& v : shifted.data()) v += 5.0f;
  const auto p = ops::softmax(z), q = ops::softmax(shifted);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(p[2 * i] > p[2 * i + 1], q[2 * i] > q[2 * i + 1]);
}

TEST(Model, ZeroWeightsGiveConstantOutput) {
  Model<float> m(small_model(16), 13);
  for (auto& p : m.params())
    if (p.name.find("bias") == std::string::npos) p.tensor->fill(0.0f);
  m.params().back().tensor->storage() = {0.3f, -0.2f};  // head bias
  const auto p = m.predict(random_input({3, 2, 16, 16}, 14));
  for (std::size_t i = 1; i < 3; ++i) {
    EXPECT_EQ(p[2 * i], p[0]);
    EXPECT_EQ(p[2 * i + 1], p[1]);
  }
  EXPECT_NE(p[0], p[1]);
}

TEST(Model, InputShapeIsChecked) {
  Model<float> m(small_model(16), 1);
  EXPECT_THROW(m.predict(Tensor<float>({1, 1, 16, 16})), ShapeError);
  EXPECT_THROW(m.predict(Tensor<float>({1, 2, 32, 32})), ShapeError);
}

TEST(Model, SameSeedSameWeights) {
  Model<float> a(small_model(), 21), b(small_model(), 21), c(small_model(), 22);
  auto pa = a.params(), pb = b.params(), pc = c.params();
  bool differs = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i].tensor->storage(), pb[i].tensor->storage());
    differs = differs || pa[i].tensor->storage() != pc[i].tensor->storage();
  }
  EXPECT_TRUE(differs);
}

TEST(Model, InitialisationFollowsFanIn) {
  // LeCun-normal for SeLU layers: std = 1/sqrt(fan_in).
  ModelConfig cfg;
  cfg.use_fcn = false;
  auto net = build_aggrescnn<float>(cfg, 3);
  const auto& w = net.blocks()[7].conv1.weight;  // 256 -> 256, groups 32: fan_in = 8*9
  double ss = 0.0;
  for (float v : w.data()) ss += static_cast<double>(v) * v;
  const double sd = std::sqrt(ss / static_cast<double>(w.numel()));
  EXPECT_NEAR(sd, 1.0 / std::sqrt(72.0), 0.01);
}

TEST(Model, CastToDoublePreservesPredictions) {
  Model<float> m(small_model(16), 31);
  auto d = m.cast<double>();
  const auto x = random_input({2, 2, 16, 16}, 32);
  const auto pf = m.predict(x);
  const auto pd = d.predict(x.cast<double>());
  for (std::size_t i = 0; i < pf.numel(); ++i) EXPECT_NEAR(pf[i], pd[i], 1e-5);
}

TEST(Model, FcnOnlyHasNoLogits) {
  ModelConfig cfg = small_model(16);
  cfg.variant = Variant::FcnOnly;
  Model<float> m(cfg, 1);
  const auto x = random_input({1, 2, 16, 16}, 2);
  EXPECT_EQ(m.predict(x).shape(), x.shape());
  Tape<float> t(false);
  EXPECT_THROW(m.logits(t, t.constant(x)), std::logic_error);
}

TEST(Model, BaselineForwardShape) {
  ModelConfig cfg;
  cfg.variant = Variant::BaselineCnn;
  cfg.use_fcn = false;
  cfg.input_size = 64;
  cfg.baseline_filters = {4, 4, 8};
  cfg.baseline_hidden = 16;
  Model<float> m(cfg, 1);
  const auto p = m.predict(random_input({3, 2, 64, 64}, 3));
  ASSERT_EQ(p.shape(), (Shape{3, 2}));
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(static_cast<double>(p[2 * i]) + p[2 * i + 1], 1.0, 1e-6);
}

TEST(Config, ValidationRejectsBadTopologies) {
  ModelConfig c;
  c.input_channels = 3;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = ModelConfig{};
  c.stage_channels = {32, 48};
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = ModelConfig{};
  c.fcn_down_channels = {32, 64, 128};
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = ModelConfig{};
  c.variant = Variant::BaselineCnn;
  EXPECT_THROW(build_aggrescnn<float>(c), std::invalid_argument);
  EXPECT_THROW(build_baseline_cnn<float>(ModelConfig{}), std::invalid_argument);
}

// Ledger --------------------------------------------------------------------

TEST(Ledger, RowsSumToTotalAndMatchTensorSizes) {
  Model<float> m(ModelConfig{}, 0);
  const auto l = count_params(m);
  std::size_t s = 0, tensors = 0;
  for (const auto& r : l.rows) s += r.count;
  for (const auto& p : m.params()) tensors += p.tensor->numel();
  EXPECT_EQ(s, l.total);
  EXPECT_EQ(tensors, l.total);
}

TEST(Ledger, SingleLayerCounts) {
  std::mt19937_64 rng(0);
  EXPECT_EQ(nn::Conv<float>::make("c", 2, 16, 3, ConvGeometry{1, 1, 1, 0}, rng).ledger().count, 304u);
  EXPECT_EQ(nn::Dense<float>::make("d", 256, 2, rng).ledger().count, 514u);
}

TEST(Ledger, MatchesCountingOracle) {
  for (std::size_t ch : {1u, 2u}) {
    const auto agg = canonical(Variant::AggResCnn, false, ch);
    EXPECT_EQ(total(agg), oracle::aggres_count(agg));
    const auto base = canonical(Variant::BaselineCnn, false, ch);
    EXPECT_EQ(total(base), oracle::baseline_count(base));
    EXPECT_EQ(total(canonical(Variant::FcnOnly, true, ch)), oracle::fcn_count({32, 64, 128, 256}));
    EXPECT_EQ(total(canonical(Variant::AggResCnn, true, ch)),
              oracle::aggres_count(agg) + oracle::fcn_count({32, 64, 128, 256}));
  }
  const auto small = small_model();
  EXPECT_EQ(total(small), oracle::aggres_count(small) + oracle::fcn_count(small.fcn_down_channels));
}

// Frozen from the counting oracle; these must not drift.
TEST(Ledger, CanonicalGoldens) {
  EXPECT_EQ(total(canonical(Variant::AggResCnn, false, 1)), 132418u);
  EXPECT_EQ(total(canonical(Variant::AggResCnn, false, 2)), 132562u);
  EXPECT_EQ(total(canonical(Variant::AggResCnn, true, 1)), 1018211u);
  EXPECT_EQ(total(canonical(Variant::AggResCnn, true, 2)), 1018355u);
  EXPECT_EQ(total(canonical(Variant::FcnOnly, true, 1)), 885793u);
  EXPECT_EQ(total(canonical(Variant::FcnOnly, true, 2)), 885793u);
  EXPECT_EQ(total(canonical(Variant::BaselineCnn, false, 1)), 897858u);
  EXPECT_EQ(total(canonical(Variant::BaselineCnn, false, 2)), 898658u);
}

TEST(Ledger, InputChannelDeltas) {
  EXPECT_EQ(total(canonical(Variant::BaselineCnn, false, 2)) - total(canonical(Variant::BaselineCnn, false, 1)),
            800u);
  EXPECT_EQ(total(canonical(Variant::BaselineCnn, true, 2)) - total(canonical(Variant::BaselineCnn, true, 1)),
            800u);
  // Stem delta: one extra 3x3 input plane per stem filter.
  EXPECT_EQ(total(canonical(Variant::AggResCnn, false, 2)) - total(canonical(Variant::AggResCnn, false, 1)),
            16u * 9);
  EXPECT_EQ(total(canonical(Variant::AggResCnn, true, 2)) - total(canonical(Variant::AggResCnn, true, 1)), 16u * 9);
}

TEST(Ledger, FcnAddsAConstantRegardlessOfChannels) {
  for (Variant v : {Variant::AggResCnn, Variant::BaselineCnn}) {
    const std::size_t d1 = total(canonical(v, true, 1)) - total(canonical(v, false, 1));
    const std::size_t d2 = total(canonical(v, true, 2)) - total(canonical(v, false, 2));
    EXPECT_EQ(d1, d2);
    EXPECT_EQ(d1, 885793u);
  }
}

TEST(Ledger, PublishedDeltasOnlyWhereExpected) {
  const auto base = published_counts(Variant::BaselineCnn, false).value();
  EXPECT_EQ(base.two_channel - base.one_channel, 800u);
  const auto agg = published_counts(Variant::AggResCnn, false).value();
  EXPECT_EQ(agg.two_channel - agg.one_channel, 240u);
  EXPECT_FALSE(published_counts(Variant::FcnOnly, true).has_value());
}
