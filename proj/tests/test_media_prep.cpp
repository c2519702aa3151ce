#include <gtest/gtest.h>

#include <Eigen/Dense>

#include "fas/media_prep.hpp"
#include "oracles.hpp"

using namespace fas;

namespace {

std::vector<Point2> unit_square() { return {{0, 0}, {1, 0}, {1, 1}, {0, 1}}; }

Keypoints keypoints_from(std::vector<Point2> pts) { return Keypoints{std::move(pts)}; }

}  // namespace

TEST(Registration, IdentityOnUnitSquare) {
  const auto t = fit_registration(unit_square(), unit_square());
  const std::array<double, 9> id{1, 0, 0, 0, 1, 0, 0, 0, 1};
  for (int i = 0; i < 9; ++i) EXPECT_NEAR(t.w[i], id[i], 1e-12);
}

TEST(Registration, PureTranslation) {
  auto dst = unit_square();
  for (auto& p : dst) p.x += 5;
  const auto t = fit_registration(unit_square(), dst);
  const std::array<double, 9> want{1, 0, 5, 0, 1, 0, 0, 0, 1};
  for (int i = 0; i < 9; ++i) EXPECT_NEAR(t.w[i], want[i], 1e-10);
}

TEST(Registration, RecoversKnownHomography) {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    Eigen::Matrix3d h;
    h << 1 + rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2), rng.uniform(-20, 20), rng.uniform(-0.2, 0.2),
        1 + rng.uniform(-0.2, 0.2), rng.uniform(-20, 20), rng.uniform(-1e-3, 1e-3), rng.uniform(-1e-3, 1e-3),
        1 + rng.uniform(-0.1, 0.1);
    std::vector<Point2> src, dst;
    for (int i = 0; i < 6; ++i) {
      const Point2 p{rng.uniform(0, 200), rng.uniform(0, 200)};
      const Eigen::Vector3d q = h * Eigen::Vector3d(p.x, p.y, 1);
      src.push_back(p);
      dst.push_back({q.x() / q.z(), q.y() / q.z()});
    }
    const auto t = fit_registration(src, dst);
    const Eigen::Matrix3d want = h / h(2, 2);
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) EXPECT_NEAR(t.w[r * 3 + c], want(r, c), 1e-6) << "trial " << trial;
    for (std::size_t i = 0; i < src.size(); ++i) {
      const Point2 p = t.apply(src[i]);
      EXPECT_LT(std::hypot(p.x - dst[i].x, p.y - dst[i].y), 1e-6);
    }
  }
}

TEST(Registration, Errors) {
  auto three = unit_square();
  three.pop_back();
  EXPECT_THROW(fit_registration(three, three), Error);
  try {
    fit_registration(unit_square(), three);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::LengthMismatch);
  }
  const std::vector<Point2> line{{0, 0}, {1, 1}, {2, 2}, {0, 1}};
  try {
    fit_registration(line, line);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::DegenerateAnchors);
  }
  const std::vector<Point2> same(5, Point2{1, 1});
  EXPECT_THROW(fit_registration(same, same), Error);
}

TEST(Warp, IdentityIsExact) {
  Rng rng(1);
  const Image img = oracle::random_image(rng, 17, 17);
  EXPECT_EQ(warp_frame(img, RegistrationTransform::identity(), 17), img);
}

TEST(Warp, IntegerTranslation) {
  Rng rng(2);
  const Image img = oracle::random_image(rng, 12, 12);
  const Image out = warp_frame(img, RegistrationTransform::translation(3, 0), 12);
  for (int y = 0; y < 12; ++y)
    for (int x = 0; x < 12; ++x)
      for (int c = 0; c < 3; ++c) {
        const float got = out[(y * 12 + x) * 3 + c];
        if (x + 3 < 12)
          EXPECT_EQ(got, img[(y * 12 + x + 3) * 3 + c]);
        else
          EXPECT_EQ(got, 0.0f);
      }
}

TEST(Warp, QuarterTurnCheckerboard) {
  Image board({4, 4, 3});
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x)
      for (int c = 0; c < 3; ++c) board[(y * 4 + x) * 3 + c] = (x + y) % 2 ? 0.9f : 0.1f + 0.1f * c;
  // out(x, y) = in(y, 3 - x)
  const RegistrationTransform rot{{0, 1, 0, -1, 0, 3, 0, 0, 1}};
  const Image out = warp_frame(board, rot, 4);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x)
      for (int c = 0; c < 3; ++c) EXPECT_EQ(out[(y * 4 + x) * 3 + c], board[((3 - x) * 4 + y) * 3 + c]);
}

TEST(Warp, SingularTransformRejected) {
  Image img({4, 4, 3});
  try {
    warp_frame(img, RegistrationTransform{{1, 1, 0, 1, 1, 0, 0, 0, 1}}, 4);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::SingularTransform);
  }
}

TEST(CropBox, MarginAndClamp) {
  const auto kps = keypoints_from({{10, 10}, {50, 10}, {50, 50}, {10, 50}, {30, 30}});
  EXPECT_EQ(compute_crop_box(kps, 0.0, 100, 100), (CropBox{10, 10, 50, 50}));
  EXPECT_EQ(compute_crop_box(kps, 0.25, 100, 100), (CropBox{0, 0, 60, 60}));
  const auto edge = keypoints_from({{2, 3}, {40, 3}, {40, 45}, {2, 45}, {20, 20}});
  const CropBox b = compute_crop_box(edge, 0.5, 50, 48);
  EXPECT_EQ(b, (CropBox{0, 0, 48, 50}));
}

TEST(CropBox, CollapsedKeypoints) {
  const auto kps = keypoints_from(std::vector<Point2>(5, Point2{7, 7}));
  try {
    compute_crop_box(kps, 0.25, 20, 20);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::EmptyBox);
  }
}

TEST(Deviation, ZeroOffsetAndOracle) {
  Rng rng(4);
  const Image a = oracle::random_image(rng, 9, 11);
  EXPECT_EQ(difference_deviation(a, a), 0.0);
  Image b = a;
  for (auto& v : b.data) v *= 0.5f;
  Image shifted({9, 11, 3}, 0.3f), base({9, 11, 3}, 0.2f);
  EXPECT_NEAR(difference_deviation(base, shifted), 0.1, 1e-7);
  EXPECT_NEAR(difference_deviation(a, b), oracle::mean_abs_diff(a, b), 1e-12);
  EXPECT_EQ(difference_deviation(a, b), difference_deviation(b, a));
  EXPECT_THROW(difference_deviation(a, Image({9, 10, 3})), Error);
}

TEST(Keyframes, ForcedAndTieBreak) {
  Rng rng(5);
  const std::vector<Image> two{oracle::random_image(rng, 4, 4), oracle::random_image(rng, 4, 4)};
  EXPECT_EQ(select_keyframes(two, 1), (std::vector<int>{0, 1}));
  const std::vector<Image> same(11, Image({4, 4, 3}, 0.5f));
  EXPECT_EQ(select_keyframes(same, 2), (std::vector<int>{0, 1, 6}));
  try {
    select_keyframes(std::span<const Image>(same.data(), 3), 4);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::TooFewFrames);
  }
}

TEST(Keyframes, MatchesGreedyOracle) {
  Rng rng(6);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = rng.uniform_int(2, 24), k = rng.uniform_int(1, n - 1);
    std::vector<Image> frames;
    for (int i = 0; i < n; ++i) frames.push_back(oracle::random_image(rng, 5, 6));
    const auto got = select_keyframes(frames, k);
    ASSERT_EQ(got, oracle::keyframes(frames, k)) << "n=" << n << " k=" << k;
    ASSERT_EQ(got.size(), static_cast<std::size_t>(k + 1));
    for (std::size_t i = 1; i < got.size(); ++i) ASSERT_LT(got[i - 1], got[i]);
  }
}

TEST(DiffStack, ElementwiseOracle) {
  Rng rng(7);
  std::vector<Image> frames;
  for (int i = 0; i < 10; ++i) frames.push_back(oracle::random_image(rng, 6, 5));
  FrameSequence seq{stack_frames(frames), {}, "live", "x"};
  const DiffStack d = compute_diff_stack(seq);
  ASSERT_EQ(d.diffs.shape, (Shape{6, 5, 27}));
  for (int t = 0; t < 9; ++t)
    for (int p = 0; p < 30; ++p)
      for (int c = 0; c < 3; ++c)
        EXPECT_EQ(d.diffs[p * 27 + t * 3 + c], frames[t + 1][p * 3 + c] - frames[t][p * 3 + c]);
  EXPECT_EQ(d.label, "live");
  EXPECT_EQ(d.clip_id, "x");
}

TEST(DiffStack, ConstantClipIsZeroAndRangeClamped) {
  std::vector<Image> same(4, Image({3, 3, 3}, 0.4f));
  FrameSequence seq{stack_frames(same), {}, "print", "c"};
  for (float v : compute_diff_stack(seq).diffs.data) EXPECT_EQ(v, 0.0f);
  std::vector<Image> wild{Image({2, 2, 3}, -3.0f), Image({2, 2, 3}, 4.0f)};
  FrameSequence w{stack_frames(wild), {}, "live", "w"};
  for (float v : compute_diff_stack(w).diffs.data) EXPECT_EQ(v, 1.0f);
  FrameSequence one{stack_frames(std::vector<Image>{Image({2, 2, 3})}), {}, "live", "o"};
  EXPECT_THROW(compute_diff_stack(one), Error);
}

namespace {

/// A textured frame and keypoints spread over it.
Clip shifted_clip(int n, const std::vector<std::pair<int, int>>& offsets) {
  Rng rng(8);
  const int size = 64;
  Image base({size, size, 3});
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x)
      for (int c = 0; c < 3; ++c)
        base[(y * size + x) * 3 + c] = static_cast<float>(0.5 + 0.4 * std::sin(0.3 * x + 0.2 * y + c));
  std::vector<Point2> kp;
  for (int i = 0; i < 16; ++i) kp.push_back({20 + rng.uniform(0, 24), 20 + rng.uniform(0, 24)});
  Clip clip;
  clip.label = "live";
  clip.clip_id = "shift";
  for (int i = 0; i < n; ++i) {
    const auto [dx, dy] = offsets[i];
    clip.frames.push_back(warp_frame(base, RegistrationTransform::translation(-dx, -dy), size));
    std::vector<Point2> moved = kp;
    for (auto& p : moved) p = {p.x + dx, p.y + dy};
    clip.keypoints.push_back({moved});
  }
  return clip;
}

}  // namespace

TEST(Preprocess, RegistrationUndoesKnownShift) {
  const Clip clip = shifted_clip(4, {{0, 0}, {2, 1}, {-3, 2}, {1, -2}});
  PreprocessConfig cfg;
  cfg.out_size = 32;
  const RegisteredClip reg = register_and_crop(clip, cfg);
  const Image& ref = reg.frames[0];
  const int h = ref.shape[0], w = ref.shape[1];
  for (std::size_t f = 1; f < reg.frames.size(); ++f)
    for (int y = 4; y < h - 4; ++y)
      for (int x = 4; x < w - 4; ++x)
        for (int c = 0; c < 3; ++c)
          EXPECT_NEAR(reg.frames[f][(y * w + x) * 3 + c], ref[(y * w + x) * 3 + c], 1e-6) << f << " " << x << "," << y;
}

TEST(Preprocess, StaticClipAndShapes) {
  Clip clip = shifted_clip(6, std::vector<std::pair<int, int>>(6, {0, 0}));
  PreprocessConfig cfg;
  cfg.out_size = 32;
  const auto [seq, diff] = preprocess_clip(clip, cfg);
  EXPECT_EQ(seq.frames.shape, (Shape{5, 32, 32, 3}));
  EXPECT_EQ(diff.diffs.shape, (Shape{32, 32, 12}));
  for (float v : diff.diffs.data) EXPECT_EQ(v, 0.0f);
  EXPECT_EQ(seq.clip_id, diff.clip_id);
  EXPECT_EQ(seq.label, diff.label);
  const auto again = preprocess_clip(clip, cfg);
  EXPECT_EQ(again.first.frames, seq.frames);
  clip.frames.resize(3);
  clip.keypoints.resize(3);
  try {
    preprocess_clip(clip, cfg);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::TooFewFrames);
  }
}

TEST(Preprocess, ConfigValidation) {
  PreprocessConfig cfg;
  cfg.k = 0;
  EXPECT_THROW(cfg.validate(), Error);
  cfg = {};
  cfg.crop_margin = 1.5;
  EXPECT_THROW(cfg.validate(), Error);
  cfg = {};
  cfg.anchor_indices = {0, 1, 2};
  EXPECT_THROW(cfg.validate(), Error);
}
