#pragma once

// Multi-frame branch: per-frame pyramid features, global-average pooled per
// level into sequences, one Bi-LSTM per level, concatenated final states and
// a fully-connected live/spoof classifier.

#include <array>
#include <string>
#include <vector>

#include "fas/backbone.hpp"
#include "fas/fusion_metrics.hpp"

namespace fas {

struct MultiFrameConfig {
  BackboneConfig backbone{};
  FpmConfig fpm{FpmDirection::CoarseToFine, 48};
  bool use_ppm = true;
  PpmConfig ppm{};
  int lstm_hidden = 32;
  double dropout = 0.2;
};

/// Global average pool of every level of a pyramid whose batch axis is
/// time: level l becomes a [T, D_l] sequence.
template <typename T>
std::vector<Var<T>> pool_levels(const FeaturePyramid<T>& pyr) {
  require(!pyr.levels.empty(), ErrorCode::InconsistentShapes, "empty pyramid");
  const int steps = pyr.batch();
  std::vector<Var<T>> seqs;
  for (const auto& level : pyr.levels) {
    require(level->shape().size() == 4 && level->shape()[0] == steps, ErrorCode::InconsistentShapes,
            "pyramid levels disagree on frame count");
    seqs.push_back(ag::global_avg_pool(level));
  }
  return seqs;
}

/// Same as above for one single-frame pyramid per time step.
template <typename T>
std::vector<Var<T>> pool_levels(const std::vector<FeaturePyramid<T>>& frames) {
  require(!frames.empty(), ErrorCode::InconsistentShapes, "no frames");
  const std::size_t levels = frames[0].levels.size();
  std::vector<Var<T>> seqs;
  for (std::size_t l = 0; l < levels; ++l) {
    std::vector<Var<T>> rows;
    for (const auto& f : frames) {
      require(f.levels.size() == levels && f.batch() == 1, ErrorCode::InconsistentShapes,
              "per-frame pyramids must have equal level counts and batch 1");
      require(f.levels[l]->shape() == frames[0].levels[l]->shape(), ErrorCode::InconsistentShapes,
              "per-frame pyramid level shapes differ");
      rows.push_back(ag::global_avg_pool(f.levels[l]));
    }
    seqs.push_back(ag::stack_rows(rows));
  }
  return seqs;
}

struct TemporalHead {
  std::vector<nn::Lstm> forward, backward;
  nn::Linear fc;
  double dropout = 0.0;
  int hidden = 0;

  template <typename T>
  static TemporalHead create(nn::ParamStore<T>& store, const std::string& prefix, const std::vector<int>& level_dims,
                             int hidden, double dropout, Rng& rng) {
    TemporalHead h;
    h.hidden = hidden;
    h.dropout = dropout;
    for (std::size_t l = 0; l < level_dims.size(); ++l) {
      const std::string base = prefix + ".lstm" + std::to_string(l);
      h.forward.push_back(nn::Lstm::create(store, base + ".fwd", level_dims[l], hidden, rng));
      h.backward.push_back(nn::Lstm::create(store, base + ".bwd", level_dims[l], hidden, rng));
    }
    h.fc = nn::Linear::create(store, prefix + ".fc", 2 * hidden * static_cast<int>(level_dims.size()), 2, rng);
    return h;
  }

  /// Concatenated [fwd_final | bwd_final] embeddings of every level, [1, 2H*L].
  template <typename T>
  Var<T> embed(nn::Binder<T>& p, const std::vector<Var<T>>& seqs) const {
    require(seqs.size() == forward.size(), ErrorCode::WrongLevelCount, "temporal head level count");
    const int steps = seqs[0]->shape()[0];
    std::vector<Var<T>> parts;
    for (std::size_t l = 0; l < seqs.size(); ++l) {
      require(seqs[l]->shape()[0] == steps, ErrorCode::InconsistentShapes, "level sequences differ in length");
      parts.push_back(forward[l].final_hidden(p, seqs[l], false));
      parts.push_back(backward[l].final_hidden(p, seqs[l], true));
    }
    return ag::concat_last(parts);
  }

  /// Logits [1, 2] (live, spoof). Dropout is active only when `train_rng` is set.
  template <typename T>
  Var<T> logits(nn::Binder<T>& p, const std::vector<Var<T>>& seqs, Rng* train_rng = nullptr) const {
    return logits_batch(p, seqs, 1, train_rng);
  }

  /// `seqs[l]` holds `clips` sequences of equal length stacked along rows;
  /// returns logits [clips, 2].
  template <typename T>
  Var<T> logits_batch(nn::Binder<T>& p, const std::vector<Var<T>>& seqs, int clips, Rng* train_rng = nullptr) const {
    require(clips >= 1 && !seqs.empty() && seqs[0]->shape()[0] % clips == 0, ErrorCode::InconsistentShapes,
            "sequence rows must split evenly into clips");
    const int steps = seqs[0]->shape()[0] / clips;
    Var<T> e;
    if (clips == 1) {
      e = embed(p, seqs);
    } else {
      std::vector<Var<T>> rows;
      for (int b = 0; b < clips; ++b) {
        std::vector<Var<T>> clip_seqs;
        for (const auto& s : seqs) clip_seqs.push_back(ag::slice_rows(s, b * steps, steps));
        rows.push_back(embed(p, clip_seqs));
      }
      e = ag::stack_rows(rows);
    }
    if (train_rng) e = ag::dropout(e, dropout, *train_rng);
    return fc(p, e);
  }
};

template <typename T>
ScorePair classify_multiframe(nn::Binder<T>& p, const TemporalHead& head, const std::vector<Var<T>>& seqs) {
  return scores_from_logits(head.logits(p, seqs)->val());
}

inline constexpr std::array<double, 3> kRgbMean{0.485, 0.456, 0.406};
inline constexpr std::array<double, 3> kRgbStd{0.229, 0.224, 0.225};

/// Full multi-frame branch with its own parameter store.
template <typename T>
struct MultiFrameModel {
  MultiFrameConfig cfg;
  nn::ParamStore<T> params;
  PyramidFeatures features;
  TemporalHead head;

  static MultiFrameModel create(const MultiFrameConfig& cfg) {
    require(cfg.backbone.in_channels == 3, ErrorCode::InvalidConfig, "multi-frame backbone takes RGB input");
    MultiFrameModel m;
    m.cfg = cfg;
    Rng rng(cfg.backbone.seed);
    m.features = PyramidFeatures::create(m.params, "multi", cfg.backbone, cfg.fpm, cfg.use_ppm, cfg.ppm, rng);
    m.head = TemporalHead::create(m.params, "multi.head", m.features.level_dims, cfg.lstm_hidden, cfg.dropout, rng);
    return m;
  }

  /// Per-channel mean/std standardisation of unit-interval RGB frames.
  static Tensor<T> standardize(const Tensor<T>& frames) {
    Tensor<T> out(frames.shape);
    for (std::size_t i = 0; i < frames.size(); ++i) {
      const std::size_t c = i % 3;
      out[i] = static_cast<T>((frames[i] - kRgbMean[c]) / kRgbStd[c]);
    }
    return out;
  }

  /// frames: [T, S, S, 3] unit-interval RGB. Returns logits [1, 2].
  Var<T> logits(nn::Binder<T>& p, const Tensor<T>& frames, Rng* train_rng = nullptr) const {
    return logits_batch(p, frames, 1, train_rng);
  }

  /// frames: `clips` sequences of T frames stacked as [clips * T, S, S, 3].
  Var<T> logits_batch(nn::Binder<T>& p, const Tensor<T>& frames, int clips, Rng* train_rng = nullptr) const {
    require(frames.rank() == 4 && frames.shape[3] == 3, ErrorCode::ChannelMismatch,
            "multi-frame input must be [T, S, S, 3], got " + shape_str(frames.shape));
    auto pyr = features(p, ag::constant(standardize(frames)));
    return head.logits_batch(p, pool_levels(pyr), clips, train_rng);
  }

  ScorePair score(const Tensor<T>& frames) const {
    nn::Binder<T> p(params, false);
    return scores_from_logits(logits(p, frames)->val());
  }
};

}  // namespace fas
