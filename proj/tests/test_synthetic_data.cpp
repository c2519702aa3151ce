#include <gtest/gtest.h>

#include <filesystem>

#include "fas/io.hpp"
#include "fas/synthetic_data.hpp"
#include "oracles.hpp"

using namespace fas;
namespace fs = std::filesystem;

namespace {

SynthConfig small_config() {
  SynthConfig c;
  c.frame_size = 64;
  c.frames_per_clip = 12;
  return c;
}

/// Mean squared step of the centroid of the rigid anchor keypoints.
double translation_energy(const Clip& clip) {
  const int rigid[] = {kp::kLeftEyeOuter, kp::kLeftEyeInner, kp::kRightEyeInner, kp::kRightEyeOuter, kp::kNoseTip,
                       kp::kJawLeft, kp::kJawRight};
  auto centroid = [&](const Keypoints& k) {
    Point2 c{0, 0};
    for (int i : rigid) {
      c.x += k.points[i].x / 7;
      c.y += k.points[i].y / 7;
    }
    return c;
  };
  double e = 0;
  for (std::size_t t = 1; t < clip.keypoints.size(); ++t) {
    const Point2 a = centroid(clip.keypoints[t - 1]), b = centroid(clip.keypoints[t]);
    e += (a.x - b.x) * (a.x - b.x) + (a.y - b.y) * (a.y - b.y);
  }
  return e / static_cast<double>(clip.keypoints.size() - 1);
}

/// Standard deviation over time of the two eyelid gaps.
double eye_deviation(const Clip& clip) {
  std::vector<double> gaps;
  for (const auto& k : clip.keypoints) {
    auto gap = [&](int a, int b) { return std::hypot(k.points[a].x - k.points[b].x, k.points[a].y - k.points[b].y); };
    gaps.push_back(gap(kp::kLeftUpperLid, kp::kLeftLowerLid) + gap(kp::kRightUpperLid, kp::kRightLowerLid));
  }
  double mean = 0, var = 0;
  for (double g : gaps) mean += g / static_cast<double>(gaps.size());
  for (double g : gaps) var += (g - mean) * (g - mean) / static_cast<double>(gaps.size());
  return std::sqrt(var);
}

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("fas_test_" + name);
  fs::remove_all(p);
  return p;
}

std::string tree_bytes(const fs::path& root) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::string all;
  for (const auto& f : files) all += fs::relative(f, root).string() + "\n" + io::read_text(f);
  return all;
}

}  // namespace

TEST(Synthetic, ClipIsDeterministic) {
  const auto cfg = small_config();
  for (ClipKind kind : kAllKinds) {
    const Clip a = generate_clip(kind, 5, cfg), b = generate_clip(kind, 5, cfg);
    ASSERT_EQ(a.frames.size(), 12u);
    for (std::size_t t = 0; t < a.frames.size(); ++t) EXPECT_EQ(a.frames[t], b.frames[t]);
    EXPECT_EQ(a.label, to_string(kind));
    EXPECT_NE(generate_clip(kind, 6, cfg).frames[0], a.frames[0]);
  }
}

TEST(Synthetic, MotionSignaturesOverTwentySeeds) {
  const auto cfg = small_config();
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Clip live = generate_clip(ClipKind::Live, seed, cfg);
    const Clip print = generate_clip(ClipKind::Print, seed, cfg);
    EXPECT_LT(translation_energy(live), translation_energy(print)) << seed;
    EXPECT_GT(eye_deviation(live), eye_deviation(print)) << seed;
  }
}

TEST(Synthetic, PrintKeypointsMoveRigidly) {
  const Clip clip = generate_clip(ClipKind::Print, 3, small_config());
  const auto& first = clip.keypoints[0].points;
  for (const auto& k : clip.keypoints)
    for (std::size_t i = 0; i < first.size(); ++i)
      for (std::size_t j = i + 1; j < first.size(); ++j) {
        const double d0 = std::hypot(first[i].x - first[j].x, first[i].y - first[j].y);
        const double d = std::hypot(k.points[i].x - k.points[j].x, k.points[i].y - k.points[j].y);
        EXPECT_NEAR(d, d0, 1e-6);
      }
}

TEST(Synthetic, FramesAndKeypointsAreValid) {
  const auto cfg = small_config();
  for (ClipKind kind : kAllKinds) {
    const Clip clip = generate_clip(kind, 9, cfg);
    ASSERT_EQ(clip.keypoints.size(), clip.frames.size());
    for (const auto& f : clip.frames) {
      EXPECT_EQ(f.shape, (Shape{64, 64, 3}));
      for (float v : f.data) {
        EXPECT_GE(v, 0.0f);
        EXPECT_LE(v, 1.0f);
      }
    }
    for (const auto& k : clip.keypoints) {
      ASSERT_EQ(k.points.size(), static_cast<std::size_t>(kp::kCount));
      for (const auto& p : k.points) {
        EXPECT_GT(p.x, 0);
        EXPECT_LT(p.x, 64);
        EXPECT_GT(p.y, 0);
        EXPECT_LT(p.y, 64);
      }
    }
  }
}

TEST(Synthetic, SplitIsBalancedAndStable) {
  SynthConfig cfg = small_config();
  cfg.clips_per_class = 30;
  const auto a = split_clip_ids(cfg), b = split_clip_ids(cfg);
  EXPECT_EQ(a.train, b.train);
  EXPECT_EQ(a.test, b.test);
  for (ClipKind kind : kAllKinds) {
    const std::string prefix = to_string(kind) + "_";
    auto count = [&](const std::vector<std::string>& ids) {
      return std::count_if(ids.begin(), ids.end(), [&](const auto& id) { return id.rfind(prefix, 0) == 0; });
    };
    EXPECT_EQ(count(a.train), 24);
    EXPECT_EQ(count(a.test), 6);
  }
  cfg.seed = 8;
  EXPECT_NE(split_clip_ids(cfg).test, a.test);
}

TEST(Synthetic, DatasetLayoutAndByteIdenticalRegeneration) {
  SynthConfig cfg = small_config();
  cfg.clips_per_class = 3;
  const fs::path a = temp_dir("synth_a"), b = temp_dir("synth_b");
  const auto split = generate_dataset(cfg, a);
  generate_dataset(cfg, b);
  EXPECT_EQ(io::list_clip_dirs(a / "train").size() + io::list_clip_dirs(a / "test").size(), 9u);
  EXPECT_EQ(tree_bytes(a), tree_bytes(b));
  const Clip back = io::read_clip(a / "train" / split.train[0]);
  const Clip want = generate_clip(parse_clip_kind(back.label), clip_seed(cfg.seed, split.train[0]), cfg);
  ASSERT_EQ(back.frames.size(), want.frames.size());
  // frames are stored as 8-bit images
  EXPECT_LE(max_abs_diff(back.frames[3], want.frames[3]), 0.5f / 255.0f + 1e-6f);
  for (std::size_t i = 0; i < want.keypoints[3].points.size(); ++i)
    EXPECT_NEAR(back.keypoints[3].points[i].x, want.keypoints[3].points[i].x, 1e-6);
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Synthetic, MeanDifferenceBaselineSeparatesClasses) {
  SynthConfig cfg;
  cfg.clips_per_class = 30;
  cfg.seed = 7;
  const auto split = split_clip_ids(cfg);
  auto feature = [&](const std::string& id) {
    const Clip c = generate_clip(parse_clip_kind(id.substr(0, id.find('_'))), clip_seed(cfg.seed, id), cfg, id);
    double s = 0;
    for (std::size_t t = 1; t < c.frames.size(); ++t) s += oracle::mean_abs_diff(c.frames[t - 1], c.frames[t]);
    return std::pair{s / static_cast<double>(c.frames.size() - 1), c.label == "live" ? 1.0 : 0.0};
  };
  std::vector<std::pair<double, double>> train, test;
  for (const auto& id : split.train) train.push_back(feature(id));
  for (const auto& id : split.test) test.push_back(feature(id));

  double mu = 0, sd = 0;
  for (const auto& [x, y] : train) mu += x / static_cast<double>(train.size());
  for (const auto& [x, y] : train) sd += (x - mu) * (x - mu) / static_cast<double>(train.size());
  sd = std::sqrt(sd);
  // class-balanced logistic regression on the standardised statistic
  const double w_live = 0.5 / (static_cast<double>(train.size()) / 3), w_spoof = 0.5 / (2 * static_cast<double>(train.size()) / 3);
  double a = 0, b = 0;
  for (int it = 0; it < 5000; ++it) {
    double ga = 0, gb = 0;
    for (const auto& [x, y] : train) {
      const double z = (x - mu) / sd;
      const double err = (oracle::sigmoid(a * z + b) - y) * (y > 0 ? w_live : w_spoof);
      ga += err * z;
      gb += err;
    }
    a -= 0.5 * ga;
    b -= 0.5 * gb;
  }
  int correct = 0;
  for (const auto& [x, y] : test) correct += (oracle::sigmoid(a * (x - mu) / sd + b) > 0.5) == (y > 0);
  const double acc = static_cast<double>(correct) / static_cast<double>(test.size());
  EXPECT_GE(acc, 0.8);
  std::cout << "[ baseline ] mean |diff| logistic test accuracy " << acc << "\n";
}

TEST(Synthetic, ConfigValidation) {
  SynthConfig c;
  c.frames_per_clip = 10;
  EXPECT_THROW(c.validate(), Error);
  c = {};
  c.split_fraction = 1.0;
  EXPECT_THROW(c.validate(), Error);
  EXPECT_EQ(parse_clip_kind("replay"), ClipKind::Replay);
  EXPECT_THROW(parse_clip_kind("mask"), Error);
}
