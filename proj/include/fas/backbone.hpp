#pragma once

// MobileNetV3-Small-style feature extractor with five stride-2 stages, plus
// the directional feature-pyramid module (FPM) and the pyramid-pooling
// module (PPM) that both branches stack on top of it.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "fas/nn.hpp"

namespace fas {

using ag::Var;

inline constexpr int kPyramidLevels = 5;

enum class FpmDirection {
  None,          // pyramid passed through unfused (ablation)
  CoarseToFine,  // upsample the coarser fused map into each finer level
  FineToCoarse,  // max-pool the finer fused map into each coarser level
};

inline std::string to_string(FpmDirection d) {
  switch (d) {
    case FpmDirection::None: return "none";
    case FpmDirection::CoarseToFine: return "coarse_to_fine";
    case FpmDirection::FineToCoarse: return "fine_to_coarse";
  }
  return "none";
}

inline FpmDirection parse_fpm_direction(const std::string& s) {
  if (s == "none") return FpmDirection::None;
  if (s == "coarse_to_fine") return FpmDirection::CoarseToFine;
  if (s == "fine_to_coarse") return FpmDirection::FineToCoarse;
  throw Error(ErrorCode::InvalidConfig, "unknown FPM direction '" + s + "'");
}

enum class PyramidStage { Raw, Fpm, Ppm };

struct BackboneConfig {
  int in_channels = 3;
  std::array<int, kPyramidLevels> stage_channels{16, 24, 40, 64, 96};
  std::array<int, kPyramidLevels> blocks_per_stage{1, 2, 2, 2, 2};
  std::array<int, kPyramidLevels> kernel_sizes{3, 3, 3, 5, 5};
  int expansion = 6;
  bool use_squeeze_excite = true;
  std::uint64_t seed = 0;

  void validate() const {
    require(in_channels >= 1, ErrorCode::InvalidConfig, "backbone in_channels must be >= 1");
    for (int s = 0; s < kPyramidLevels; ++s) {
      require(stage_channels[s] >= 4, ErrorCode::InvalidConfig, "backbone stage channels must be >= 4");
      require(blocks_per_stage[s] >= 1, ErrorCode::InvalidConfig, "every stage needs at least one block");
      require(kernel_sizes[s] % 2 == 1, ErrorCode::InvalidConfig, "kernel sizes must be odd");
    }
    require(expansion >= 1, ErrorCode::InvalidConfig, "expansion must be >= 1");
  }
};

template <typename T>
struct FeaturePyramid {
  std::vector<Var<T>> levels;  // finest first, each [N, H_l, W_l, C_l]
  PyramidStage stage = PyramidStage::Raw;

  int batch() const { return levels.empty() ? 0 : levels[0]->val().shape[0]; }
};

struct FpmConfig {
  FpmDirection direction = FpmDirection::CoarseToFine;
  int channels = 48;
};

struct PpmConfig {
  std::vector<int> bins{1, 2, 3, 6};

  void validate() const {
    require(!bins.empty(), ErrorCode::InvalidConfig, "PPM needs at least one bin");
    for (std::size_t i = 0; i < bins.size(); ++i)
      require(bins[i] > 0 && (i == 0 || bins[i] > bins[i - 1]), ErrorCode::InvalidConfig,
              "PPM bins must be strictly increasing positive integers");
  }
};

inline int ppm_reduced_channels(int c) { return (c + 3) / 4; }

/// Expand (1x1) -> depthwise (k x k, maybe strided) -> squeeze-excite ->
/// project (1x1), each convolution batch-normalised; identity shortcut when
/// shape is preserved.
struct InvertedResidual {
  bool has_expand = false;
  nn::Conv expand, depthwise, project;
  nn::BatchNorm expand_bn, depthwise_bn, project_bn;
  bool has_se = false;
  nn::Linear se_reduce, se_expand;
  bool residual = false;
  bool hardswish = false;

  template <typename T>
  static InvertedResidual create(nn::ParamStore<T>& store, const std::string& name, int in_ch, int out_ch,
                                 int expansion, int kernel, int stride, bool se, bool hardswish, Rng& rng) {
    InvertedResidual b;
    const int hidden = in_ch * expansion;
    b.has_expand = hidden != in_ch;
    if (b.has_expand) {
      b.expand = nn::Conv::create(store, name + ".expand", in_ch, hidden, 1, 1, rng, false, 1.0, false);
      b.expand_bn = nn::BatchNorm::create(store, name + ".expand_bn", hidden);
    }
    b.depthwise = nn::Conv::create(store, name + ".dw", hidden, hidden, kernel, stride, rng, true, 1.0, false);
    b.depthwise_bn = nn::BatchNorm::create(store, name + ".dw_bn", hidden);
    b.has_se = se;
    if (se) {
      const int squeezed = ppm_reduced_channels(hidden);
      b.se_reduce = nn::Linear::create(store, name + ".se_reduce", hidden, squeezed, rng);
      b.se_expand = nn::Linear::create(store, name + ".se_expand", squeezed, hidden, rng);
    }
    b.residual = stride == 1 && in_ch == out_ch;
    b.project = nn::Conv::create(store, name + ".project", hidden, out_ch, 1, 1, rng, false, 1.0, false);
    // Residual branches start damped so the identity path dominates early.
    b.project_bn = nn::BatchNorm::create(store, name + ".project_bn", out_ch, b.residual ? 0.5 : 1.0);
    b.hardswish = hardswish;
    return b;
  }

  template <typename T>
  Var<T> activate(const Var<T>& x) const {
    return hardswish ? ag::hardswish(x) : ag::relu(x);
  }

  template <typename T>
  Var<T> operator()(nn::Binder<T>& p, const Var<T>& x) const {
    Var<T> h = has_expand ? activate(expand_bn(p, expand(p, x))) : x;
    h = activate(depthwise_bn(p, depthwise(p, h)));
    if (has_se) {
      auto s = ag::relu(se_reduce(p, ag::global_avg_pool(h)));
      s = ag::hardsigmoid(se_expand(p, s));
      h = ag::scale_channels(h, s);
    }
    h = project_bn(p, project(p, h));
    return residual ? ag::add(h, x) : h;
  }
};

/// Five stride-2 stages; the stem convolution is stage 0's downsampler.
struct Backbone {
  BackboneConfig cfg;
  nn::Conv stem;
  nn::BatchNorm stem_bn;
  std::array<std::vector<InvertedResidual>, kPyramidLevels> stages;

  template <typename T>
  static Backbone create(nn::ParamStore<T>& store, const std::string& prefix, const BackboneConfig& cfg, Rng& rng) {
    cfg.validate();
    Backbone b;
    b.cfg = cfg;
    const auto& ch = cfg.stage_channels;
    b.stem = nn::Conv::create(store, prefix + ".stem", cfg.in_channels, ch[0], 3, 2, rng, false, 1.0, false);
    b.stem_bn = nn::BatchNorm::create(store, prefix + ".stem_bn", ch[0]);
    for (int s = 0; s < kPyramidLevels; ++s) {
      const bool hswish = s >= 3;
      const bool se = cfg.use_squeeze_excite && s >= 1;
      const int first = s == 0 ? 1 : 0;  // the stem already downsampled stage 0
      for (int i = first; i < cfg.blocks_per_stage[s]; ++i) {
        const bool downsample = i == 0;
        const int in_ch = downsample ? ch[s - 1] : ch[s];
        b.stages[s].push_back(InvertedResidual::create(store,
                                                       prefix + ".stage" + std::to_string(s) + ".block" + std::to_string(i),
                                                       in_ch, ch[s], cfg.expansion, cfg.kernel_sizes[s],
                                                       downsample ? 2 : 1, se, hswish, rng));
      }
    }
    return b;
  }

  /// Raw pyramid captured after each stage. Input [N, S, S, C], S % 32 == 0.
  template <typename T>
  FeaturePyramid<T> extract(nn::Binder<T>& p, const Var<T>& x) const {
    const auto& shape = x->shape();
    require(shape.size() == 4, ErrorCode::BadSpatialSize, "backbone input must be [N, S, S, C]");
    require(shape[1] > 0 && shape[1] % 32 == 0 && shape[2] % 32 == 0, ErrorCode::BadSpatialSize,
            "backbone input spatial size must be divisible by 32, got " + shape_str(shape));
    require(shape[3] == cfg.in_channels, ErrorCode::ChannelMismatch,
            "backbone expects " + std::to_string(cfg.in_channels) + " input channels, got " + std::to_string(shape[3]));
    FeaturePyramid<T> pyr;
    Var<T> h = ag::hardswish(stem_bn(p, stem(p, x)));
    for (int s = 0; s < kPyramidLevels; ++s) {
      for (const auto& block : stages[s]) h = block(p, h);
      pyr.levels.push_back(h);
    }
    return pyr;
  }
};

/// The two FPM recurrences applied to already-projected lateral maps.
template <typename T>
std::vector<Var<T>> fpm_merge(const std::vector<Var<T>>& lateral, FpmDirection direction) {
  const int n = static_cast<int>(lateral.size());
  std::vector<Var<T>> fused(lateral.size());
  if (direction == FpmDirection::CoarseToFine) {
    fused[n - 1] = lateral[n - 1];
    for (int i = n - 2; i >= 0; --i) {
      const auto& s = lateral[i]->shape();
      fused[i] = ag::add(lateral[i], ag::upsample_nearest(fused[i + 1], s[1], s[2]));
    }
  } else if (direction == FpmDirection::FineToCoarse) {
    fused[0] = lateral[0];
    for (int i = 1; i < n; ++i) fused[i] = ag::add(lateral[i], ag::maxpool2x2(fused[i - 1]));
  } else {
    fused = lateral;
  }
  return fused;
}

/// Learned 1x1 laterals to a shared width, then the directional merge.
struct Fpm {
  FpmConfig cfg;
  std::vector<nn::Conv> lateral;

  template <typename T>
  static Fpm create(nn::ParamStore<T>& store, const std::string& prefix, const std::vector<int>& level_channels,
                    const FpmConfig& cfg, Rng& rng) {
    require(cfg.channels >= 4, ErrorCode::InvalidConfig, "FPM channels must be >= 4");
    Fpm f;
    f.cfg = cfg;
    for (std::size_t i = 0; i < level_channels.size(); ++i)
      f.lateral.push_back(nn::Conv::create(store, prefix + ".lateral" + std::to_string(i), level_channels[i],
                                           cfg.channels, 1, 1, rng));
    return f;
  }

  template <typename T>
  FeaturePyramid<T> operator()(nn::Binder<T>& p, const FeaturePyramid<T>& raw) const {
    require(raw.levels.size() == lateral.size(), ErrorCode::WrongLevelCount,
            "FPM expects " + std::to_string(lateral.size()) + " levels, got " + std::to_string(raw.levels.size()));
    std::vector<Var<T>> lat;
    for (std::size_t i = 0; i < lateral.size(); ++i) lat.push_back(lateral[i](p, raw.levels[i]));
    return {fpm_merge(lat, cfg.direction), PyramidStage::Fpm};
  }
};

/// Pyramid pooling for one feature map: [N, H, W, C] -> [N, H, W, C + bins*ceil(C/4)].
struct Ppm {
  PpmConfig cfg;
  std::vector<nn::Conv> reduce;

  int out_channels(int c) const { return c + static_cast<int>(cfg.bins.size()) * ppm_reduced_channels(c); }

  template <typename T>
  static Ppm create(nn::ParamStore<T>& store, const std::string& prefix, int channels, const PpmConfig& cfg, Rng& rng) {
    cfg.validate();
    Ppm m;
    m.cfg = cfg;
    for (int b : cfg.bins)
      m.reduce.push_back(nn::Conv::create(store, prefix + ".bin" + std::to_string(b), channels,
                                          ppm_reduced_channels(channels), 1, 1, rng));
    return m;
  }

  template <typename T>
  Var<T> operator()(nn::Binder<T>& p, const Var<T>& x) const {
    const auto& s = x->shape();
    std::vector<Var<T>> parts{x};
    for (std::size_t i = 0; i < cfg.bins.size(); ++i) {
      auto pooled = ag::adaptive_avg_pool(x, cfg.bins[i]);
      parts.push_back(ag::upsample_nearest(reduce[i](p, pooled), s[1], s[2]));
    }
    return ag::concat_last(parts);
  }
};

/// Backbone + optional FPM + optional per-level PPM: the spatial feature
/// stack shared by both branches.
struct PyramidFeatures {
  Backbone backbone;
  FpmDirection direction = FpmDirection::None;
  Fpm fpm;
  bool use_ppm = false;
  std::vector<Ppm> ppm;
  std::vector<int> level_dims;  // channels of each emitted level

  template <typename T>
  static PyramidFeatures create(nn::ParamStore<T>& store, const std::string& prefix, const BackboneConfig& bcfg,
                                const FpmConfig& fcfg, bool use_ppm, const PpmConfig& pcfg, Rng& rng) {
    PyramidFeatures f;
    f.backbone = Backbone::create(store, prefix + ".backbone", bcfg, rng);
    f.direction = fcfg.direction;
    std::vector<int> dims(bcfg.stage_channels.begin(), bcfg.stage_channels.end());
    if (fcfg.direction != FpmDirection::None) {
      f.fpm = Fpm::create(store, prefix + ".fpm", dims, fcfg, rng);
      dims.assign(kPyramidLevels, fcfg.channels);
    }
    f.use_ppm = use_ppm;
    if (use_ppm) {
      for (int l = 0; l < kPyramidLevels; ++l) {
        f.ppm.push_back(Ppm::create(store, prefix + ".ppm" + std::to_string(l), dims[l], pcfg, rng));
        dims[l] = f.ppm.back().out_channels(dims[l]);
      }
    }
    f.level_dims = dims;
    return f;
  }

  template <typename T>
  FeaturePyramid<T> operator()(nn::Binder<T>& p, const Var<T>& x) const {
    FeaturePyramid<T> pyr = backbone.extract(p, x);
    if (direction != FpmDirection::None) pyr = fpm(p, pyr);
    if (use_ppm) {
      for (int l = 0; l < kPyramidLevels; ++l) pyr.levels[l] = ppm[l](p, pyr.levels[l]);
      pyr.stage = PyramidStage::Ppm;
    }
    return pyr;
  }
};

/// A standalone backbone with its own parameters.
template <typename T>
struct BackboneModel {
  nn::ParamStore<T> params;
  Backbone net;

  std::size_t parameter_count() const { return params.numel(); }
};

template <typename T>
BackboneModel<T> init_backbone(const BackboneConfig& cfg) {
  BackboneModel<T> m;
  Rng rng(cfg.seed);
  m.net = Backbone::create(m.params, "backbone", cfg, rng);
  return m;
}

}  // namespace fas
