#include <gtest/gtest.h>

#include "fas/backbone.hpp"
#include "fas/diff_head.hpp"
#include "fas/temporal_head.hpp"
#include "oracles.hpp"

using namespace fas;

namespace {

template <typename T>
FeaturePyramid<T> run_backbone(const BackboneModel<T>& m, const Tensor<T>& x) {
  nn::Binder<T> p(m.params, false);
  return m.net.extract(p, ag::constant(x));
}

}  // namespace

TEST(Backbone, PyramidShapes) {
  BackboneConfig cfg;
  auto m = init_backbone<float>(cfg);
  Rng rng(1);
  const auto pyr = run_backbone(m, oracle::random_tensor<float>(rng, {3, 64, 64, 3}));
  ASSERT_EQ(pyr.levels.size(), 5u);
  const int sizes[] = {32, 16, 8, 4, 2};
  for (int l = 0; l < 5; ++l)
    EXPECT_EQ(pyr.levels[l]->shape(), (Shape{3, sizes[l], sizes[l], cfg.stage_channels[l]}));
}

TEST(Backbone, FullSizeInputAndChannelCount) {
  BackboneConfig cfg;
  cfg.in_channels = 27;
  cfg.stage_channels = {4, 4, 4, 4, 4};
  cfg.blocks_per_stage = {1, 1, 1, 1, 1};
  cfg.expansion = 1;
  auto m = init_backbone<float>(cfg);
  Rng rng(2);
  const auto pyr = run_backbone(m, oracle::random_tensor<float>(rng, {1, 224, 224, 27}));
  const int sizes[] = {112, 56, 28, 14, 7};
  for (int l = 0; l < 5; ++l) EXPECT_EQ(pyr.levels[l]->shape()[1], sizes[l]);
}

TEST(Backbone, InputChecks) {
  auto m = init_backbone<float>(BackboneConfig{});
  nn::Binder<float> p(m.params, false);
  try {
    m.net.extract(p, ag::constant(Tensor<float>({1, 48, 48, 3})));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::BadSpatialSize);
  }
  try {
    m.net.extract(p, ag::constant(Tensor<float>({1, 32, 32, 4})));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::ChannelMismatch);
  }
  BackboneConfig bad;
  bad.stage_channels[2] = 3;
  EXPECT_THROW(init_backbone<float>(bad), Error);
}

TEST(Backbone, SameSeedSameParameters) {
  BackboneConfig cfg;
  cfg.seed = 42;
  EXPECT_TRUE(init_backbone<float>(cfg).params == init_backbone<float>(cfg).params);
  cfg.seed = 43;
  EXPECT_FALSE(init_backbone<float>(cfg).params == init_backbone<float>(BackboneConfig{.seed = 42}).params);
}

TEST(Fpm, MergesMatchStraightLineOracle) {
  Rng rng(3);
  for (FpmDirection dir : {FpmDirection::CoarseToFine, FpmDirection::FineToCoarse}) {
    std::vector<Tensor<double>> lat;
    std::vector<ag::Var<double>> vars;
    for (int l = 0; l < 5; ++l) {
      lat.push_back(oracle::random_tensor<double>(rng, {2, 32 >> l, 32 >> l, 4}));
      vars.push_back(ag::constant(lat.back()));
    }
    const auto got = fpm_merge(vars, dir);
    const auto want = dir == FpmDirection::CoarseToFine ? oracle::fpm_coarse_to_fine(lat) : oracle::fpm_fine_to_coarse(lat);
    for (int l = 0; l < 5; ++l) EXPECT_LT(max_abs_diff(got[l]->val(), want[l]), 1e-6) << to_string(dir) << " level " << l;
  }
}

TEST(Fpm, EndpointPropagationWithIdentityLaterals) {
  // Only the start level is non-zero, laterals are identity: the recurrence
  // carries that map alone to every level.
  nn::ParamStore<double> store;
  Rng rng(4);
  FpmConfig cfg{FpmDirection::CoarseToFine, 4};
  Fpm fpm = Fpm::create(store, "fpm", {4, 4, 4, 4, 4}, cfg, rng);
  for (const auto& conv : fpm.lateral) {
    auto& w = store.value(conv.weight);
    w.fill(0);
    for (int c = 0; c < 4; ++c) w[c * 4 + c] = 1;
    store.value(conv.bias).fill(0);
  }
  for (FpmDirection dir : {FpmDirection::CoarseToFine, FpmDirection::FineToCoarse}) {
    fpm.cfg.direction = dir;
    FeaturePyramid<double> raw;
    std::vector<Tensor<double>> lat;
    const int source = dir == FpmDirection::CoarseToFine ? 4 : 0;
    for (int l = 0; l < 5; ++l) {
      Tensor<double> t({1, 32 >> l, 32 >> l, 4});
      if (l == source) t = oracle::random_tensor<double>(rng, t.shape);
      lat.push_back(t);
      raw.levels.push_back(ag::constant(t));
    }
    nn::Binder<double> p(store, false);
    const auto fused = fpm(p, raw);
    const auto want = dir == FpmDirection::CoarseToFine ? oracle::fpm_coarse_to_fine(lat) : oracle::fpm_fine_to_coarse(lat);
    for (int l = 0; l < 5; ++l) EXPECT_EQ(max_abs_diff(fused.levels[l]->val(), want[l]), 0.0);
    EXPECT_EQ(fused.stage, PyramidStage::Fpm);
  }
}

TEST(Fpm, ZeroInputGivesBiases) {
  nn::ParamStore<float> store;
  Rng rng(5);
  Fpm fpm = Fpm::create(store, "fpm", {4, 6, 8, 8, 8}, FpmConfig{FpmDirection::FineToCoarse, 5}, rng);
  for (const auto& conv : fpm.lateral)
    for (auto& b : store.value(conv.bias).data) b = static_cast<float>(rng.uniform(-1, 1));
  FeaturePyramid<float> raw;
  const int ch[] = {4, 6, 8, 8, 8};
  for (int l = 0; l < 5; ++l) raw.levels.push_back(ag::constant(Tensor<float>({1, 16 >> l, 16 >> l, ch[l]})));
  nn::Binder<float> p(store, false);
  const auto fused = fpm(p, raw);
  for (int l = 0; l < 5; ++l) {
    ASSERT_EQ(fused.levels[l]->shape()[3], 5);
    for (std::size_t i = 0; i < fused.levels[l]->val().size(); ++i) {
      float want = 0;
      for (int j = 0; j <= l; ++j) want += store.value(fpm.lateral[j].bias)[i % 5];
      EXPECT_NEAR(fused.levels[l]->val()[i], want, 1e-6);
    }
  }
  raw.levels.pop_back();
  try {
    fpm(p, raw);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::WrongLevelCount);
  }
}

TEST(Ppm, AdaptivePoolMatchesPerCellOracle) {
  Rng rng(6);
  const auto x = oracle::random_tensor<double>(rng, {2, 7, 7, 3});
  for (int bins : {1, 2, 3, 6, 9}) {
    const auto got = ag::adaptive_avg_pool(ag::constant(x), bins)->val();
    EXPECT_LT(max_abs_diff(got, oracle::adaptive_pool(x, bins)), 1e-6) << bins;
  }
}

TEST(Ppm, ChannelLawAndPassThrough) {
  nn::ParamStore<float> store;
  Rng rng(7);
  Ppm ppm = Ppm::create(store, "ppm", 8, PpmConfig{}, rng);
  const auto x = oracle::random_tensor<float>(rng, {1, 12, 12, 8});
  nn::Binder<float> p(store, false);
  const auto y = ppm(p, ag::constant(x))->val();
  ASSERT_EQ(y.shape, (Shape{1, 12, 12, 16}));
  EXPECT_EQ(ppm.out_channels(8), 16);
  EXPECT_EQ(ppm_reduced_channels(9), 3);
  for (int i = 0; i < 144; ++i)
    for (int c = 0; c < 8; ++c) EXPECT_EQ(y[i * 16 + c], x[i * 8 + c]);
}

TEST(Ppm, ConstantInputGivesConstantBins) {
  nn::ParamStore<float> store;
  Rng rng(8);
  Ppm ppm = Ppm::create(store, "ppm", 4, PpmConfig{}, rng);
  nn::Binder<float> p(store, false);
  const auto y = ppm(p, ag::constant(Tensor<float>({1, 6, 6, 4}, 0.7f)))->val();
  for (int i = 1; i < 36; ++i)
    for (int c = 4; c < 8; ++c) EXPECT_NEAR(y[i * 8 + c], y[c], 1e-6);
}

TEST(Ppm, BinValidation) {
  EXPECT_THROW((PpmConfig{{2, 2}}.validate()), Error);
  EXPECT_THROW((PpmConfig{{}}.validate()), Error);
  EXPECT_THROW((PpmConfig{{0, 1}}.validate()), Error);
}

TEST(Pyramid, ShapeLawWithFpmAndPpm) {
  MultiFrameConfig mc;
  mc.backbone = oracle::micro_backbone(3);
  mc.fpm.channels = 6;  // PPM adds 4 bins of ceil(6 / 4) = 2 channels
  auto m = MultiFrameModel<float>::create(mc);
  Rng rng(9);
  nn::Binder<float> p(m.params, false);
  const auto pyr = m.features(p, ag::constant(oracle::random_tensor<float>(rng, {2, 64, 64, 3})));
  for (int l = 0; l < 5; ++l) {
    EXPECT_EQ(pyr.levels[l]->shape(), (Shape{2, 32 >> l, 32 >> l, 14}));
    EXPECT_EQ(m.features.level_dims[l], 14);
  }
  EXPECT_EQ(pyr.stage, PyramidStage::Ppm);
}

TEST(Backbone, GradientsMatchFiniteDifferences) {
  nn::ParamStore<double> store;
  Rng rng(10);
  const auto feats = PyramidFeatures::create(store, "net", oracle::micro_backbone(3),
                                             FpmConfig{FpmDirection::CoarseToFine, 4}, true, PpmConfig{{1, 2}}, rng);
  const auto x = oracle::random_tensor<double>(rng, {2, 64, 64, 3});
  std::vector<Tensor<double>> weights;
  for (int l = 0; l < 5; ++l) weights.push_back(oracle::random_tensor<double>(rng, {2, 32 >> l, 32 >> l, 6}));
  const auto r = oracle::check_gradients(store, [&](nn::Binder<double>& p) {
    const auto pyr = feats(p, ag::constant(x));
    ag::Var<double> total;
    for (int l = 0; l < 5; ++l) {
      auto term = ag::dot_const(pyr.levels[l], weights[l]);
      total = total ? ag::add(total, term) : term;
    }
    return total;
  });
  EXPECT_LT(r.worst_rel, 1e-4) << r.worst_param;
  EXPECT_LT(r.global_rel, 1e-4);
  EXPECT_GT(r.checked, 500u);
}

TEST(Budget, DefaultTwoStreamParameterCount) {
  const auto multi = MultiFrameModel<float>::create(MultiFrameConfig{});
  const auto diff = DiffModel<float>::create(DiffBranchConfig{});
  const std::size_t total = multi.params.numel() + diff.params.numel();
  EXPECT_GE(total, 1'200'000u);
  EXPECT_LE(total, 2'300'000u);
}
