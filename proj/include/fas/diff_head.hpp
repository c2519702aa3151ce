#pragma once

// RGB-difference branch: the shared backbone read with 3k input channels,
// fine-to-coarse FPM and PPM, pooled levels concatenated and batch-normalised,
// then a fully-connected classifier (no recurrence).

#include <algorithm>
#include <string>
#include <vector>

#include "fas/backbone.hpp"
#include "fas/fusion_metrics.hpp"

namespace fas {

/// Turns an RGB first-layer kernel [F, 3, h, w] into one for 3k channels:
/// the mean over the RGB axis replicated 3k times.
template <typename T>
Tensor<T> adapt_first_layer(const Tensor<T>& rgb_kernel, int k) {
  require(rgb_kernel.rank() == 4 && rgb_kernel.shape[1] == 3, ErrorCode::WrongChannelCount,
          "first-layer kernel must be [F, 3, h, w], got " + shape_str(rgb_kernel.shape));
  require(k >= 1, ErrorCode::InvalidConfig, "k must be >= 1");
  const int f = rgb_kernel.shape[0], hw = rgb_kernel.shape[2] * rgb_kernel.shape[3], out_c = 3 * k;
  Tensor<T> out({f, out_c, rgb_kernel.shape[2], rgb_kernel.shape[3]});
  for (int o = 0; o < f; ++o)
    for (int i = 0; i < hw; ++i) {
      const std::size_t base = static_cast<std::size_t>(o) * 3 * hw + i;
      const T mean = (rgb_kernel[base] + rgb_kernel[base + hw] + rgb_kernel[base + 2 * hw]) / T(3);
      for (int c = 0; c < out_c; ++c) out[(static_cast<std::size_t>(o) * out_c + c) * hw + i] = mean;
    }
  return out;
}

struct DiffBranchConfig {
  int k = 4;
  BackboneConfig backbone{.in_channels = 12};
  FpmConfig fpm{FpmDirection::FineToCoarse, 48};
  bool use_ppm = true;
  PpmConfig ppm{};
  bool embed_norm = true;  // BatchNorm over the pooled embedding before the classifier
};

template <typename T>
struct DiffModel {
  DiffBranchConfig cfg;
  nn::ParamStore<T> params;
  PyramidFeatures features;
  nn::Linear fc;
  nn::BatchNorm norm;

  /// Random-initialises an RGB stem, then widens it with adapt_first_layer.
  static DiffModel create(const DiffBranchConfig& cfg) {
    require(cfg.backbone.in_channels == 3 * cfg.k, ErrorCode::InvalidConfig,
            "diff backbone in_channels must equal 3k");
    DiffModel m;
    m.cfg = cfg;
    Rng rng(cfg.backbone.seed);
    m.features = PyramidFeatures::create(m.params, "diff", cfg.backbone, cfg.fpm, cfg.use_ppm, cfg.ppm, rng);
    auto& stem = m.params.value(m.features.backbone.stem.weight);
    const int f = stem.shape[0], kh = stem.shape[2], kw = stem.shape[3];
    Rng rgb_rng(mix_seed(cfg.backbone.seed, 3));
    stem = adapt_first_layer(nn::he_normal<T>({f, 3, kh, kw}, 3 * kh * kw, rgb_rng), cfg.k);
    int total = 0;
    for (int d : m.features.level_dims) total += d;
    if (cfg.embed_norm) m.norm = nn::BatchNorm::create(m.params, "diff.embed_norm", total);
    m.fc = nn::Linear::create(m.params, "diff.fc", total, 2, rng);
    return m;
  }

  /// Pooled, concatenated level features [N, sum(D_l)] of stacks
  /// [S, S, 3k] or [N, S, S, 3k].
  Var<T> embed(nn::Binder<T>& p, const Tensor<T>& stacks) const {
    const int c = cfg.backbone.in_channels;
    require((stacks.rank() == 3 || stacks.rank() == 4) && stacks.shape.back() == c, ErrorCode::ChannelMismatch,
            "diff stack must be [S, S, " + std::to_string(c) + "], got " + shape_str(stacks.shape));
    Shape shape = stacks.shape;
    if (shape.size() == 3) shape.insert(shape.begin(), 1);
    Tensor<T> input(shape);
    for (std::size_t i = 0; i < stacks.size(); ++i) input[i] = std::clamp(stacks[i], T(-1), T(1));
    auto pyr = features(p, ag::constant(std::move(input)));
    std::vector<Var<T>> pooled;
    for (const auto& level : pyr.levels) pooled.push_back(ag::global_avg_pool(level));
    auto e = ag::concat_last(pooled);
    if (!cfg.embed_norm) return e;
    const int n = e->shape()[0], d = e->shape()[1];
    return ag::reshape(norm(p, ag::reshape(e, {n, 1, 1, d})), {n, d});
  }

  /// Logits [N, 2] (live, spoof).
  Var<T> logits(nn::Binder<T>& p, const Tensor<T>& stacks) const { return fc(p, embed(p, stacks)); }

  ScorePair score(const Tensor<T>& stack) const {
    nn::Binder<T> p(params, false);
    return scores_from_logits(logits(p, stack)->val());
  }
};

template <typename T>
ScorePair classify_diff(const DiffModel<T>& model, const Tensor<T>& stack) {
  return model.score(stack);
}

}  // namespace fas
