#pragma once

// Clip preprocessing: projective registration of every frame onto the first
// frame's geometry, one crop box from the first frame's keypoints, greedy
// keyframe sampling, resize, and the RGB-difference stack.

#include <array>
#include <cmath>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "fas/error.hpp"
#include "fas/tensor.hpp"

namespace fas {

/// Images are [H, W, C] float tensors, RGB in [0, 1].
using Image = Tensor<float>;

struct Point2 {
  double x = 0;
  double y = 0;
};

/// Keypoint index convention used by the dataset sidecar files.
namespace kp {
inline constexpr int kLeftEyeOuter = 0;
inline constexpr int kLeftEyeInner = 1;
inline constexpr int kRightEyeInner = 2;
inline constexpr int kRightEyeOuter = 3;
inline constexpr int kLeftUpperLid = 4;
inline constexpr int kLeftLowerLid = 5;
inline constexpr int kRightUpperLid = 6;
inline constexpr int kRightLowerLid = 7;
inline constexpr int kNoseTip = 8;
inline constexpr int kMouthLeft = 9;
inline constexpr int kMouthRight = 10;
inline constexpr int kUpperLip = 11;
inline constexpr int kLowerLip = 12;
inline constexpr int kJawLeft = 13;
inline constexpr int kJawRight = 14;
inline constexpr int kChin = 15;
inline constexpr int kCount = 16;
}  // namespace kp

struct Keypoints {
  std::vector<Point2> points;

  void validate() const {
    require(points.size() >= 5, ErrorCode::InvalidInput, "need at least 5 keypoints");
    for (const auto& p : points)
      require(std::isfinite(p.x) && std::isfinite(p.y), ErrorCode::InvalidInput, "non-finite keypoint");
  }

  std::vector<Point2> subset(std::span<const int> indices) const {
    std::vector<Point2> out;
    for (int i : indices) {
      require(i >= 0 && static_cast<std::size_t>(i) < points.size(), ErrorCode::InvalidInput,
              "anchor index " + std::to_string(i) + " out of range");
      out.push_back(points[static_cast<std::size_t>(i)]);
    }
    return out;
  }
};

/// 3x3 projective map, row-major W1..W9. Maps output (reference) pixel
/// coordinates to source-image coordinates.
struct RegistrationTransform {
  std::array<double, 9> w{1, 0, 0, 0, 1, 0, 0, 0, 1};

  static RegistrationTransform identity() { return {}; }
  static RegistrationTransform translation(double dx, double dy) { return {{1, 0, dx, 0, 1, dy, 0, 0, 1}}; }

  Point2 apply(double x, double y) const {
    const double d = w[6] * x + w[7] * y + w[8];
    return {(w[0] * x + w[1] * y + w[2]) / d, (w[3] * x + w[4] * y + w[5]) / d};
  }
  Point2 apply(const Point2& p) const { return apply(p.x, p.y); }

  double determinant() const {
    return w[0] * (w[4] * w[8] - w[5] * w[7]) - w[1] * (w[3] * w[8] - w[5] * w[6]) +
           w[2] * (w[3] * w[7] - w[4] * w[6]);
  }
  bool invertible() const { return std::abs(determinant()) > 1e-12; }

  Eigen::Matrix3d matrix() const { return Eigen::Map<const Eigen::Matrix<double, 3, 3, Eigen::RowMajor>>(w.data()); }
  static RegistrationTransform from_matrix(const Eigen::Matrix3d& m) {
    RegistrationTransform t;
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) t.w[static_cast<std::size_t>(r * 3 + c)] = m(r, c);
    return t;
  }
};

namespace detail {

/// Similarity that moves the centroid to the origin and scales the mean
/// distance from it to sqrt(2).
inline Eigen::Matrix3d normalizing_transform(const std::vector<Point2>& pts) {
  double cx = 0, cy = 0;
  for (const auto& p : pts) {
    cx += p.x;
    cy += p.y;
  }
  cx /= static_cast<double>(pts.size());
  cy /= static_cast<double>(pts.size());
  double mean_dist = 0;
  for (const auto& p : pts) mean_dist += std::hypot(p.x - cx, p.y - cy);
  mean_dist /= static_cast<double>(pts.size());
  require(mean_dist > 1e-12, ErrorCode::DegenerateAnchors, "anchor points coincide");
  const double s = std::sqrt(2.0) / mean_dist;
  Eigen::Matrix3d t;
  t << s, 0, -s * cx, 0, s, -s * cy, 0, 0, 1;
  return t;
}

inline bool collinear(const Point2& a, const Point2& b, const Point2& c) {
  const double cross = (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x);
  const double scale = std::max({std::hypot(b.x - a.x, b.y - a.y), std::hypot(c.x - a.x, c.y - a.y), 1e-300});
  return std::abs(cross) <= 1e-9 * scale * scale;
}

}  // namespace detail

/// Normalised DLT least-squares homography with fit.apply(src[i]) ~= dst[i],
/// scaled so W9 = 1.
inline RegistrationTransform fit_registration(const std::vector<Point2>& src, const std::vector<Point2>& dst) {
  require(src.size() == dst.size(), ErrorCode::LengthMismatch, "anchor lists differ in length");
  require(src.size() >= 4, ErrorCode::DegenerateAnchors, "need at least 4 anchor correspondences");
  if (src.size() == 4) {
    for (const auto* pts : {&src, &dst})
      for (int i = 0; i < 4; ++i)
        for (int j = i + 1; j < 4; ++j)
          for (int k = j + 1; k < 4; ++k)
            require(!detail::collinear((*pts)[i], (*pts)[j], (*pts)[k]), ErrorCode::DegenerateAnchors,
                    "three of four anchors are collinear");
  }
  const Eigen::Matrix3d ts = detail::normalizing_transform(src);
  const Eigen::Matrix3d td = detail::normalizing_transform(dst);
  const int n = static_cast<int>(src.size());
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(std::max(2 * n, 9), 9);
  for (int i = 0; i < n; ++i) {
    const Eigen::Vector3d p = ts * Eigen::Vector3d(src[i].x, src[i].y, 1.0);
    const Eigen::Vector3d q = td * Eigen::Vector3d(dst[i].x, dst[i].y, 1.0);
    const double x = p.x() / p.z(), y = p.y() / p.z(), u = q.x() / q.z(), v = q.y() / q.z();
    a.row(2 * i) << -x, -y, -1, 0, 0, 0, u * x, u * y, u;
    a.row(2 * i + 1) << 0, 0, 0, -x, -y, -1, v * x, v * y, v;
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeFullV);
  const auto& sv = svd.singularValues();
  require(sv(7) > 1e-10 * sv(0), ErrorCode::DegenerateAnchors, "anchor configuration is rank deficient");
  const Eigen::VectorXd h = svd.matrixV().col(8);
  Eigen::Matrix3d hn;
  hn << h(0), h(1), h(2), h(3), h(4), h(5), h(6), h(7), h(8);
  Eigen::Matrix3d full = td.inverse() * hn * ts;
  require(std::abs(full(2, 2)) > 1e-12, ErrorCode::DegenerateAnchors, "fitted transform has W9 = 0");
  full /= full(2, 2);
  auto t = RegistrationTransform::from_matrix(full);
  require(t.invertible(), ErrorCode::DegenerateAnchors, "fitted transform is singular");
  return t;
}

/// Bilinear tap with zero padding outside the image.
inline float sample_bilinear(const Image& img, double x, double y, int c) {
  const int h = img.shape[0], w = img.shape[1], ch = img.shape[2];
  const double fx0 = std::floor(x), fy0 = std::floor(y);
  const int x0 = static_cast<int>(fx0), y0 = static_cast<int>(fy0);
  const double ax = x - fx0, ay = y - fy0;
  auto tap = [&](int yy, int xx) -> double {
    if (xx < 0 || yy < 0 || xx >= w || yy >= h) return 0.0;
    return img[(static_cast<std::size_t>(yy) * w + xx) * ch + c];
  };
  double v = 0;
  if ((1 - ax) * (1 - ay) != 0) v += (1 - ax) * (1 - ay) * tap(y0, x0);
  if (ax * (1 - ay) != 0) v += ax * (1 - ay) * tap(y0, x0 + 1);
  if ((1 - ax) * ay != 0) v += (1 - ax) * ay * tap(y0 + 1, x0);
  if (ax * ay != 0) v += ax * ay * tap(y0 + 1, x0 + 1);
  return static_cast<float>(v);
}

/// out(x, y) = frame(t.apply(x, y)), bilinear, zero outside the frame.
inline Image warp_frame(const Image& frame, const RegistrationTransform& t, int out_h, int out_w) {
  require(frame.rank() == 3, ErrorCode::ShapeMismatch, "frame must be [H, W, C]");
  require(t.invertible(), ErrorCode::SingularTransform, "registration transform is not invertible");
  const int c = frame.shape[2];
  Image out({out_h, out_w, c});
  for (int y = 0; y < out_h; ++y)
    for (int x = 0; x < out_w; ++x) {
      const Point2 s = t.apply(x, y);
      for (int ch = 0; ch < c; ++ch) out[(static_cast<std::size_t>(y) * out_w + x) * c + ch] = sample_bilinear(frame, s.x, s.y, ch);
    }
  return out;
}

inline Image warp_frame(const Image& frame, const RegistrationTransform& t, int out_size) {
  return warp_frame(frame, t, out_size, out_size);
}

/// Half-open integer pixel box.
struct CropBox {
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;

  int width() const { return x1 - x0; }
  int height() const { return y1 - y0; }
  bool operator==(const CropBox&) const = default;
};

/// Keypoint bounding box grown by `margin` of its extent on each side,
/// clamped to a frame of `frame_h` x `frame_w`.
inline CropBox compute_crop_box(const Keypoints& kps, double margin, int frame_h, int frame_w) {
  kps.validate();
  double xmin = kps.points[0].x, xmax = xmin, ymin = kps.points[0].y, ymax = ymin;
  for (const auto& p : kps.points) {
    xmin = std::min(xmin, p.x);
    xmax = std::max(xmax, p.x);
    ymin = std::min(ymin, p.y);
    ymax = std::max(ymax, p.y);
  }
  const double mx = margin * (xmax - xmin), my = margin * (ymax - ymin);
  CropBox box;
  box.x0 = std::max(0, static_cast<int>(std::floor(xmin - mx)));
  box.y0 = std::max(0, static_cast<int>(std::floor(ymin - my)));
  box.x1 = std::min(frame_w, static_cast<int>(std::ceil(xmax + mx)));
  box.y1 = std::min(frame_h, static_cast<int>(std::ceil(ymax + my)));
  require(box.x1 > box.x0 && box.y1 > box.y0, ErrorCode::EmptyBox, "keypoints span an empty box");
  return box;
}

inline Image crop(const Image& img, const CropBox& box) {
  const int c = img.shape[2], w = img.shape[1];
  Image out({box.height(), box.width(), c});
  for (int y = 0; y < box.height(); ++y)
    std::copy_n(img.ptr() + ((static_cast<std::size_t>(box.y0 + y) * w) + box.x0) * c,
                static_cast<std::size_t>(box.width()) * c, out.ptr() + static_cast<std::size_t>(y) * box.width() * c);
  return out;
}

/// Bilinear resize with half-pixel centres and edge clamping.
inline Image resize_bilinear(const Image& img, int out_h, int out_w) {
  const int h = img.shape[0], w = img.shape[1], c = img.shape[2];
  if (h == out_h && w == out_w) return img;
  Image out({out_h, out_w, c});
  const double sy = static_cast<double>(h) / out_h, sx = static_cast<double>(w) / out_w;
  for (int y = 0; y < out_h; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(h - 1));
    const int y0 = static_cast<int>(fy), y1 = std::min(y0 + 1, h - 1);
    const double ay = fy - y0;
    for (int x = 0; x < out_w; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(w - 1));
      const int x0 = static_cast<int>(fx), x1 = std::min(x0 + 1, w - 1);
      const double ax = fx - x0;
      for (int ch = 0; ch < c; ++ch) {
        auto px = [&](int yy, int xx) { return static_cast<double>(img[(static_cast<std::size_t>(yy) * w + xx) * c + ch]); };
        const double v = (1 - ay) * ((1 - ax) * px(y0, x0) + ax * px(y0, x1)) + ay * ((1 - ax) * px(y1, x0) + ax * px(y1, x1));
        out[(static_cast<std::size_t>(y) * out_w + x) * c + ch] = static_cast<float>(v);
      }
    }
  }
  return out;
}

/// Mean absolute per-pixel, per-channel difference.
inline double difference_deviation(const Image& a, const Image& b) {
  require(a.shape == b.shape, ErrorCode::ShapeMismatch,
          "difference_deviation " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  require(!a.empty(), ErrorCode::ShapeMismatch, "difference_deviation of empty images");
  double acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i]));
  return acc / static_cast<double>(a.size());
}

/// Half-open frame-index ranges, one per stack.
using StackBounds = std::vector<std::pair<int, int>>;

/// Frames 1..n-1 split into k contiguous stacks, sizes as equal as possible
/// with the remainder going to the earliest stacks.
inline StackBounds partition_stacks(int frame_count, int k) {
  require(k >= 1, ErrorCode::InvalidConfig, "k must be >= 1");
  require(frame_count >= k + 1, ErrorCode::TooFewFrames,
          "need at least " + std::to_string(k + 1) + " frames, got " + std::to_string(frame_count));
  const int pool = frame_count - 1;
  const int base = pool / k, extra = pool % k;
  StackBounds stacks;
  int start = 1;
  for (int s = 0; s < k; ++s) {
    const int len = base + (s < extra ? 1 : 0);
    stacks.emplace_back(start, start + len);
    start += len;
  }
  return stacks;
}

/// Greedy onset-frame selection over the given stacks: in each stack take
/// the frame deviating most from the current onset (smallest index on
/// ties), which then becomes the onset.
inline std::vector<int> select_in_stacks(std::span<const Image> frames, const StackBounds& stacks) {
  std::vector<int> picked{0};
  int onset = 0;
  for (const auto& [lo, hi] : stacks) {
    require(lo >= 1 && hi > lo && hi <= static_cast<int>(frames.size()), ErrorCode::InvalidInput, "bad stack bounds");
    int best = lo;
    double best_dev = -1.0;
    for (int i = lo; i < hi; ++i) {
      const double d = difference_deviation(frames[static_cast<std::size_t>(onset)], frames[static_cast<std::size_t>(i)]);
      if (d > best_dev) {
        best_dev = d;
        best = i;
      }
    }
    picked.push_back(best);
    onset = best;
  }
  return picked;
}

inline std::vector<int> select_keyframes(std::span<const Image> frames, int k) {
  return select_in_stacks(frames, partition_stacks(static_cast<int>(frames.size()), k));
}

struct FrameSequence {
  Tensor<float> frames;  // [T, H, W, 3]
  std::vector<int> source_indices;
  std::string label;
  std::string clip_id;

  int length() const { return frames.shape.empty() ? 0 : frames.shape[0]; }

  Image frame(int t) const {
    const int h = frames.shape[1], w = frames.shape[2], c = frames.shape[3];
    const std::size_t n = static_cast<std::size_t>(h) * w * c;
    return Image({h, w, c}, std::vector<float>(frames.ptr() + t * n, frames.ptr() + (t + 1) * n));
  }
};

struct DiffStack {
  Tensor<float> diffs;  // [H, W, 3k]
  std::string label;
  std::string clip_id;
};

/// Packs equally shaped [H, W, C] images into [T, H, W, C].
inline Tensor<float> stack_frames(std::span<const Image> images) {
  require(!images.empty(), ErrorCode::TooFewFrames, "no frames to stack");
  const auto& s = images[0].shape;
  Tensor<float> out({static_cast<int>(images.size()), s[0], s[1], s[2]});
  for (std::size_t i = 0; i < images.size(); ++i) {
    require(images[i].shape == s, ErrorCode::ShapeMismatch, "frames differ in shape");
    std::copy(images[i].data.begin(), images[i].data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(i * images[i].size()));
  }
  return out;
}

/// Channel-stacked consecutive differences frames[t+1] - frames[t], clamped to [-1, 1].
inline DiffStack compute_diff_stack(const FrameSequence& seq) {
  require(seq.frames.rank() == 4, ErrorCode::ShapeMismatch, "frame sequence must be [T, H, W, C]");
  const int t = seq.frames.shape[0], h = seq.frames.shape[1], w = seq.frames.shape[2], c = seq.frames.shape[3];
  require(t >= 2, ErrorCode::TooFewFrames, "difference stack needs at least 2 frames");
  const int k = t - 1;
  DiffStack out{Tensor<float>({h, w, c * k}), seq.label, seq.clip_id};
  const std::size_t plane = static_cast<std::size_t>(h) * w * c;
  for (int d = 0; d < k; ++d) {
    const float* a = seq.frames.ptr() + d * plane;
    const float* b = seq.frames.ptr() + (d + 1) * plane;
    for (std::size_t p = 0; p < static_cast<std::size_t>(h) * w; ++p)
      for (int ch = 0; ch < c; ++ch)
        out.diffs[p * c * k + static_cast<std::size_t>(d) * c + ch] =
            std::clamp(b[p * c + ch] - a[p * c + ch], -1.0f, 1.0f);
  }
  return out;
}

/// A labelled raw clip: frames plus per-frame keypoints.
struct Clip {
  std::vector<Image> frames;
  std::vector<Keypoints> keypoints;
  std::string label;  // live | print | replay
  std::string clip_id;

  bool bona_fide() const { return label == "live"; }
};

struct PreprocessConfig {
  int k = 4;
  int out_size = 224;
  double crop_margin = 0.25;
  std::vector<int> anchor_indices{kp::kLeftEyeOuter, kp::kRightEyeOuter, kp::kNoseTip, kp::kJawLeft, kp::kJawRight};

  void validate() const {
    require(k >= 1, ErrorCode::InvalidConfig, "preprocess.k must be >= 1");
    require(out_size >= 32, ErrorCode::InvalidConfig, "preprocess.out_size must be >= 32");
    require(crop_margin >= 0.0 && crop_margin <= 1.0, ErrorCode::InvalidConfig, "preprocess.crop_margin must be in [0, 1]");
    require(anchor_indices.size() >= 4, ErrorCode::InvalidConfig, "need at least 4 anchor indices");
  }
};

/// Every frame registered to frame 0 and cropped with frame 0's box, at
/// crop resolution. Keyframe selection (deterministic or jittered) runs on this.
struct RegisteredClip {
  std::vector<Image> frames;
  std::string label;
  std::string clip_id;
};

inline RegisteredClip register_and_crop(const Clip& clip, const PreprocessConfig& cfg) {
  cfg.validate();
  require(!clip.frames.empty(), ErrorCode::TooFewFrames, "clip has no frames");
  require(clip.frames.size() == clip.keypoints.size(), ErrorCode::LengthMismatch, "frames and keypoints differ in count");
  const auto& ref = clip.frames[0];
  require(ref.rank() == 3, ErrorCode::ShapeMismatch, "frame must be [H, W, C]");
  const int h = ref.shape[0], w = ref.shape[1];
  const auto ref_anchors = clip.keypoints[0].subset(cfg.anchor_indices);
  const CropBox box = compute_crop_box(clip.keypoints[0], cfg.crop_margin, h, w);
  RegisteredClip out{{}, clip.label, clip.clip_id};
  out.frames.reserve(clip.frames.size());
  for (std::size_t i = 0; i < clip.frames.size(); ++i) {
    require(clip.frames[i].shape == ref.shape, ErrorCode::ShapeMismatch, "frames differ in shape");
    require(clip.keypoints[i].points.size() == clip.keypoints[0].points.size(), ErrorCode::InvalidInput,
            "keypoint count changes within the clip");
    if (i == 0) {
      out.frames.push_back(crop(ref, box));
      continue;
    }
    const auto t = fit_registration(ref_anchors, clip.keypoints[i].subset(cfg.anchor_indices));
    out.frames.push_back(crop(warp_frame(clip.frames[i], t, h, w), box));
  }
  return out;
}

/// Keyframes at the given indices, resized to out_size.
inline FrameSequence gather_sequence(const RegisteredClip& reg, const std::vector<int>& indices, int out_size) {
  std::vector<Image> picked;
  for (int i : indices) picked.push_back(resize_bilinear(reg.frames[static_cast<std::size_t>(i)], out_size, out_size));
  return {stack_frames(picked), indices, reg.label, reg.clip_id};
}

inline std::pair<FrameSequence, DiffStack> preprocess_clip(const Clip& clip, const PreprocessConfig& cfg) {
  require(static_cast<int>(clip.frames.size()) >= cfg.k + 1, ErrorCode::TooFewFrames,
          "clip " + clip.clip_id + " has " + std::to_string(clip.frames.size()) + " frames, need " +
              std::to_string(cfg.k + 1));
  const RegisteredClip reg = register_and_crop(clip, cfg);
  FrameSequence seq = gather_sequence(reg, select_keyframes(reg.frames, cfg.k), cfg.out_size);
  DiffStack diff = compute_diff_stack(seq);
  return {std::move(seq), std::move(diff)};
}

}  // namespace fas
