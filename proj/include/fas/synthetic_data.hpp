#pragma once

// Procedural toy clips for the three presentation classes.
//
//   live    static pose, eyelids and mouth oscillate
//   print   rigid random-walk jitter of the whole pattern, fine grid overlay
//   replay  slow projective wobble, rolling horizontal banding, weak local motion
//
// Every class shares the same colour and texture distributions so that only
// motion statistics and surface texture separate them.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numbers>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "fas/io.hpp"
#include "fas/media_prep.hpp"
#include "fas/rng.hpp"

namespace fas {

enum class ClipKind { Live, Print, Replay };

inline constexpr std::array<ClipKind, 3> kAllKinds{ClipKind::Live, ClipKind::Print, ClipKind::Replay};

inline std::string to_string(ClipKind k) {
  switch (k) {
    case ClipKind::Live: return "live";
    case ClipKind::Print: return "print";
    case ClipKind::Replay: return "replay";
  }
  return "?";
}

inline ClipKind parse_clip_kind(const std::string& s) {
  if (s == "live") return ClipKind::Live;
  if (s == "print") return ClipKind::Print;
  if (s == "replay") return ClipKind::Replay;
  throw Error(ErrorCode::InvalidConfig, "unknown clip kind '" + s + "'");
}

struct SynthConfig {
  int clips_per_class = 10;
  int frames_per_clip = 16;
  int frame_size = 96;
  std::uint64_t seed = 7;
  double noise_std = 0.02;
  double split_fraction = 0.8;
  double live_local_motion = 1.0;    // eyelid / mouth amplitude (fraction of full range)
  double print_jitter_px = 0.8;      // random-walk step, pixels
  double print_jitter_rad = 0.01;    // random-walk rotation step
  double replay_wobble = 0.03;       // projective distortion amplitude
  double replay_local_motion = 0.3;  // relative to live
  double replay_band_depth = 0.12;
  double print_grid_depth = 0.15;

  void validate() const {
    require(clips_per_class >= 1, ErrorCode::InvalidConfig, "synth.clips_per_class must be >= 1");
    require(frames_per_clip >= 11, ErrorCode::InvalidConfig, "synth.frames_per_clip must be >= 11");
    require(frame_size >= 48, ErrorCode::InvalidConfig, "synth.frame_size must be >= 48");
    require(noise_std >= 0, ErrorCode::InvalidConfig, "synth.noise_std must be >= 0");
    require(split_fraction > 0 && split_fraction < 1, ErrorCode::InvalidConfig, "synth.split_fraction must be in (0, 1)");
    require(live_local_motion >= 0 && replay_local_motion >= 0 && print_jitter_px >= 0 && print_jitter_rad >= 0 &&
                replay_wobble >= 0 && replay_band_depth >= 0 && print_grid_depth >= 0,
            ErrorCode::InvalidConfig, "synth motion amplitudes must be >= 0");
  }

  nlohmann::json to_json() const {
    return {{"clips_per_class", clips_per_class},
            {"frames_per_clip", frames_per_clip},
            {"frame_size", frame_size},
            {"seed", seed},
            {"noise_std", noise_std},
            {"split_fraction", split_fraction},
            {"live_local_motion", live_local_motion},
            {"print_jitter_px", print_jitter_px},
            {"print_jitter_rad", print_jitter_rad},
            {"replay_wobble", replay_wobble},
            {"replay_local_motion", replay_local_motion},
            {"replay_band_depth", replay_band_depth},
            {"print_grid_depth", print_grid_depth}};
  }
};

namespace synth_detail {

/// Per-clip appearance, fixed over time.
struct Face {
  double cx, cy, rx, ry;
  std::array<double, 3> skin, background, eye, mouth;
  std::array<double, 6> texture;  // two plane waves: fx, fy, phase each
};

/// Per-frame state.
struct Pose {
  Eigen::Matrix3d g = Eigen::Matrix3d::Identity();  // pattern -> image
  double eye_open = 0.6;
  double mouth_open = 0.3;
  double band_phase = 0.0;
};

inline Face draw_face(Rng& rng, int s) {
  Face f;
  f.cx = s * rng.uniform(0.47, 0.53);
  f.cy = s * rng.uniform(0.42, 0.48);
  f.rx = s * rng.uniform(0.21, 0.23);
  f.ry = s * rng.uniform(0.27, 0.29);
  for (int c = 0; c < 3; ++c) {
    f.skin[c] = std::array<double, 3>{0.78, 0.6, 0.5}[c] + rng.uniform(-0.08, 0.08);
    f.background[c] = rng.uniform(0.2, 0.5);
    f.eye[c] = rng.uniform(0.08, 0.18);
    f.mouth[c] = std::array<double, 3>{0.55, 0.18, 0.2}[c] + rng.uniform(-0.05, 0.05);
  }
  for (int w = 0; w < 2; ++w) {
    const double angle = rng.uniform(0, std::numbers::pi), freq = rng.uniform(0.05, 0.1);
    f.texture[3 * w] = freq * std::cos(angle);
    f.texture[3 * w + 1] = freq * std::sin(angle);
    f.texture[3 * w + 2] = rng.uniform(0, 2 * std::numbers::pi);
  }
  return f;
}

struct Geometry {
  double lex, rex, ey, ew, eh, mx, my, mw, mh, nx, ny;
};

inline Geometry geometry(const Face& f, const Pose& p) {
  Geometry g;
  g.lex = f.cx - 0.4 * f.rx;
  g.rex = f.cx + 0.4 * f.rx;
  g.ey = f.cy - 0.25 * f.ry;
  g.ew = 0.22 * f.rx;
  g.eh = 0.02 * f.ry + 0.1 * f.ry * p.eye_open;
  g.mx = f.cx;
  g.my = f.cy + 0.45 * f.ry;
  g.mw = 0.35 * f.rx;
  g.mh = 0.03 * f.ry + 0.1 * f.ry * p.mouth_open;
  g.nx = f.cx;
  g.ny = f.cy + 0.1 * f.ry;
  return g;
}

/// Keypoints in pattern coordinates, kp:: order.
inline std::vector<Point2> pattern_keypoints(const Face& f, const Pose& p) {
  const Geometry g = geometry(f, p);
  const double jaw = 0.5;
  std::vector<Point2> k(kp::kCount);
  k[kp::kLeftEyeOuter] = {g.lex - g.ew, g.ey};
  k[kp::kLeftEyeInner] = {g.lex + g.ew, g.ey};
  k[kp::kRightEyeInner] = {g.rex - g.ew, g.ey};
  k[kp::kRightEyeOuter] = {g.rex + g.ew, g.ey};
  k[kp::kLeftUpperLid] = {g.lex, g.ey - g.eh};
  k[kp::kLeftLowerLid] = {g.lex, g.ey + g.eh};
  k[kp::kRightUpperLid] = {g.rex, g.ey - g.eh};
  k[kp::kRightLowerLid] = {g.rex, g.ey + g.eh};
  k[kp::kNoseTip] = {g.nx, g.ny};
  k[kp::kMouthLeft] = {g.mx - g.mw, g.my};
  k[kp::kMouthRight] = {g.mx + g.mw, g.my};
  k[kp::kUpperLip] = {g.mx, g.my - g.mh};
  k[kp::kLowerLip] = {g.mx, g.my + g.mh};
  k[kp::kJawLeft] = {f.cx - f.rx * std::cos(jaw), f.cy + f.ry * std::sin(jaw)};
  k[kp::kJawRight] = {f.cx + f.rx * std::cos(jaw), f.cy + f.ry * std::sin(jaw)};
  k[kp::kChin] = {f.cx, f.cy + f.ry};
  return k;
}

inline Point2 apply(const Eigen::Matrix3d& m, const Point2& p) {
  const Eigen::Vector3d v = m * Eigen::Vector3d(p.x, p.y, 1.0);
  return {v.x() / v.z(), v.y() / v.z()};
}

/// Coverage of an ellipse with a one-pixel soft edge.
inline double ellipse_alpha(double x, double y, double cx, double cy, double ax, double ay) {
  const double d = std::hypot((x - cx) / ax, (y - cy) / ay);
  return std::clamp(0.5 + (1.0 - d) * std::min(ax, ay), 0.0, 1.0);
}

inline Image render(const Face& f, const Pose& p, ClipKind kind, const SynthConfig& cfg, Rng& noise) {
  const int s = cfg.frame_size;
  const Geometry g = geometry(f, p);
  const Eigen::Matrix3d inv = p.g.inverse();
  const double two_pi = 2 * std::numbers::pi;
  Image img({s, s, 3});
  for (int y = 0; y < s; ++y)
    for (int x = 0; x < s; ++x) {
      const Point2 q = apply(inv, {static_cast<double>(x), static_cast<double>(y)});
      const double face = ellipse_alpha(q.x, q.y, f.cx, f.cy, f.rx, f.ry);
      const double eye = std::max(ellipse_alpha(q.x, q.y, g.lex, g.ey, g.ew, g.eh),
                                  ellipse_alpha(q.x, q.y, g.rex, g.ey, g.ew, g.eh));
      const double mouth = ellipse_alpha(q.x, q.y, g.mx, g.my, g.mw, g.mh);
      const double nose = 0.35 * ellipse_alpha(q.x, q.y, g.nx, g.ny, 0.08 * f.rx, 0.1 * f.ry);
      const double tex = 1.0 + 0.06 * std::sin(two_pi * (f.texture[0] * q.x + f.texture[1] * q.y) + f.texture[2]) +
                         0.04 * std::sin(two_pi * (f.texture[3] * q.x + f.texture[4] * q.y) + f.texture[5]);
      double gain = 1.0;
      if (kind == ClipKind::Print)
        gain *= 1.0 + cfg.print_grid_depth * std::cos(two_pi * q.x / 4.0) * std::cos(two_pi * q.y / 4.0);
      if (kind == ClipKind::Replay)
        gain *= 1.0 + cfg.replay_band_depth * std::sin(two_pi * (y / 6.0 + p.band_phase));
      for (int c = 0; c < 3; ++c) {
        double v = f.skin[c] * tex * (1.0 - nose * 0.25);
        v = (1 - eye) * v + eye * f.eye[c];
        v = (1 - mouth) * v + mouth * f.mouth[c];
        v = (1 - face) * f.background[c] * (1.0 + 0.1 * (q.y / s - 0.5)) + face * v;
        v = v * gain + noise.normal(0.0, cfg.noise_std);
        img[(static_cast<std::size_t>(y) * s + x) * 3 + c] = static_cast<float>(v);
      }
    }
  return img;
}

inline Eigen::Matrix3d about(const Eigen::Matrix3d& m, double cx, double cy) {
  Eigen::Matrix3d to, back;
  to << 1, 0, -cx, 0, 1, -cy, 0, 0, 1;
  back << 1, 0, cx, 0, 1, cy, 0, 0, 1;
  return back * m * to;
}

}  // namespace synth_detail

/// One seeded clip of `cfg.frames_per_clip` frames with exact keypoints.
inline Clip generate_clip(ClipKind kind, std::uint64_t seed, const SynthConfig& cfg, const std::string& clip_id = "") {
  using namespace synth_detail;
  cfg.validate();
  Rng rng(seed);
  const Face face = draw_face(rng, cfg.frame_size);
  Rng motion(mix_seed(seed, 1)), noise(mix_seed(seed, 2));
  const double two_pi = 2 * std::numbers::pi;

  const double eye_f = motion.uniform(0.12, 0.25), eye_ph = motion.uniform(0, two_pi);
  const double mouth_f = motion.uniform(0.08, 0.2), mouth_ph = motion.uniform(0, two_pi);
  const double eye_rest = motion.uniform(0.4, 0.8), mouth_rest = motion.uniform(0.2, 0.5);
  std::array<double, 6> wobble_ph{}, wobble_amp{};
  for (int i = 0; i < 6; ++i) {
    wobble_ph[i] = motion.uniform(0, two_pi);
    wobble_amp[i] = motion.uniform(0.5, 1.0);
  }
  const double wobble_f = motion.uniform(0.04, 0.08);
  const double band_speed = motion.uniform(0.15, 0.35) * (motion.bernoulli(0.5) ? 1 : -1);
  const double band_ph = motion.uniform(0, 1);

  Clip clip;
  clip.label = to_string(kind);
  clip.clip_id = clip_id;
  double tx = 0, ty = 0, rot = 0;
  for (int t = 0; t < cfg.frames_per_clip; ++t) {
    Pose p;
    double local = 0;
    if (kind == ClipKind::Live) local = cfg.live_local_motion;
    if (kind == ClipKind::Replay) local = cfg.replay_local_motion;
    p.eye_open = std::clamp(eye_rest + 0.5 * local * std::cos(two_pi * eye_f * t + eye_ph), 0.0, 1.0);
    p.mouth_open = std::clamp(mouth_rest + 0.5 * local * std::sin(two_pi * mouth_f * t + mouth_ph), 0.0, 1.0);
    if (kind == ClipKind::Print) {
      if (t > 0) {
        tx += motion.normal(0.0, cfg.print_jitter_px);
        ty += motion.normal(0.0, cfg.print_jitter_px);
        rot += motion.normal(0.0, cfg.print_jitter_rad);
      }
      Eigen::Matrix3d m;
      m << std::cos(rot), -std::sin(rot), tx, std::sin(rot), std::cos(rot), ty, 0, 0, 1;
      p.g = about(m, face.cx, face.cy);
    }
    if (kind == ClipKind::Replay) {
      const double a = cfg.replay_wobble, s = cfg.frame_size;
      auto w = [&](int i) { return wobble_amp[i] * std::sin(two_pi * wobble_f * t + wobble_ph[i]); };
      Eigen::Matrix3d m;
      m << 1 + a * w(0), a * w(1), a * s * 0.1 * w(4), a * w(2), 1 + a * w(3), a * s * 0.1 * w(5),
          a * w(4) / s, a * w(5) / s, 1;
      p.g = about(m, face.cx, face.cy);
      p.band_phase = band_ph + band_speed * t;
    }
    clip.frames.push_back(render(face, p, kind, cfg, noise));
    Keypoints k;
    for (const auto& q : pattern_keypoints(face, p)) k.points.push_back(apply(p.g, q));
    clip.keypoints.push_back(std::move(k));
  }
  return clip;
}

inline std::string synthetic_clip_id(ClipKind kind, int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s_%03d", to_string(kind).c_str(), index);
  return buf;
}

inline std::uint64_t clip_seed(std::uint64_t seed, const std::string& clip_id) {
  return mix_seed(seed, hash_string(clip_id));
}

struct DatasetSplit {
  std::vector<std::string> train, test;
};

/// Per class, clips are ordered by a seeded hash of their id and the first
/// round(split_fraction * n) go to train.
inline DatasetSplit split_clip_ids(const SynthConfig& cfg) {
  DatasetSplit split;
  const int n_train = static_cast<int>(std::lround(cfg.split_fraction * cfg.clips_per_class));
  for (ClipKind kind : kAllKinds) {
    std::vector<std::pair<std::uint64_t, std::string>> order;
    for (int i = 0; i < cfg.clips_per_class; ++i) {
      const auto id = synthetic_clip_id(kind, i);
      order.emplace_back(mix_seed(cfg.seed ^ 0x5eed, hash_string(id)), id);
    }
    std::sort(order.begin(), order.end());
    for (int i = 0; i < cfg.clips_per_class; ++i) (i < n_train ? split.train : split.test).push_back(order[i].second);
  }
  std::sort(split.train.begin(), split.train.end());
  std::sort(split.test.begin(), split.test.end());
  return split;
}

/// Writes root/train/<clip_id>, root/test/<clip_id> and root/dataset.json.
inline DatasetSplit generate_dataset(const SynthConfig& cfg, const std::filesystem::path& root) {
  cfg.validate();
  const DatasetSplit split = split_clip_ids(cfg);
  std::error_code ec;
  std::filesystem::create_directories(root, ec);
  require(!ec && std::filesystem::is_directory(root), ErrorCode::IOFailure, "cannot create " + root.string());
  auto emit = [&](const std::vector<std::string>& ids, const char* part) {
    for (const auto& id : ids) {
      const ClipKind kind = parse_clip_kind(id.substr(0, id.find('_')));
      io::write_clip(root / part / id, generate_clip(kind, clip_seed(cfg.seed, id), cfg, id));
    }
  };
  emit(split.train, "train");
  emit(split.test, "test");
  nlohmann::json meta{{"config", cfg.to_json()}, {"train", split.train}, {"test", split.test}};
  io::write_text(root / "dataset.json", meta.dump(2) + "\n");
  return split;
}

}  // namespace fas
