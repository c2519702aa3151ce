#pragma once

// Independent SGD training of the two branches, augmentation, and
// evaluation of single or fused branches.

#include <algorithm>
#include <chrono>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include <nlohmann/json.hpp>

#include "fas/config.hpp"
#include "fas/diff_head.hpp"
#include "fas/fusion_metrics.hpp"
#include "fas/io.hpp"
#include "fas/media_prep.hpp"
#include "fas/temporal_head.hpp"

namespace fas {

enum class Branch { Multi, Diff };

inline std::string to_string(Branch b) { return b == Branch::Multi ? "multi" : "diff"; }

inline Branch parse_branch(const std::string& s) {
  if (s == "multi") return Branch::Multi;
  if (s == "diff") return Branch::Diff;
  throw Error(ErrorCode::InvalidConfig, "unknown branch '" + s + "'");
}

// ---------------------------------------------------------------- augmentation

struct SpatialCrop {
  int x0 = 0, y0 = 0, w = 0, h = 0;
  bool flip = false;
};

/// Square window covering a uniform fraction in [min_scale, 1] of the side.
inline SpatialCrop draw_spatial_crop(Rng& rng, int height, int width, double min_scale, bool allow_flip) {
  const double scale = rng.uniform(min_scale, 1.0);
  SpatialCrop c;
  c.w = std::clamp(static_cast<int>(std::lround(scale * width)), 1, width);
  c.h = std::clamp(static_cast<int>(std::lround(scale * height)), 1, height);
  c.x0 = rng.uniform_int(0, width - c.w);
  c.y0 = rng.uniform_int(0, height - c.h);
  c.flip = allow_flip && rng.bernoulli(0.5);
  return c;
}

/// Crops every frame with the same window, resizes back and optionally mirrors.
inline FrameSequence apply_spatial_crop(const FrameSequence& seq, const SpatialCrop& c) {
  const int t = seq.frames.shape[0], h = seq.frames.shape[1], w = seq.frames.shape[2];
  require(c.x0 >= 0 && c.y0 >= 0 && c.x0 + c.w <= w && c.y0 + c.h <= h && c.w > 0 && c.h > 0, ErrorCode::EmptyBox,
          "crop window outside the frame");
  std::vector<Image> out;
  for (int i = 0; i < t; ++i) {
    Image img = resize_bilinear(crop(seq.frame(i), {c.x0, c.y0, c.x0 + c.w, c.y0 + c.h}), h, w);
    if (c.flip)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w / 2; ++x)
          for (int ch = 0; ch < 3; ++ch)
            std::swap(img[(static_cast<std::size_t>(y) * w + x) * 3 + ch],
                      img[(static_cast<std::size_t>(y) * w + (w - 1 - x)) * 3 + ch]);
    out.push_back(std::move(img));
  }
  return {stack_frames(out), seq.source_indices, seq.label, seq.clip_id};
}

inline FrameSequence augment_spatial(const FrameSequence& seq, Rng& rng, double min_scale = 0.8, bool flip = true) {
  return apply_spatial_crop(seq, draw_spatial_crop(rng, seq.frames.shape[1], seq.frames.shape[2], min_scale, flip));
}

/// Shifts each inner stack boundary by up to +-max_shift frames, keeping
/// every stack non-empty.
inline StackBounds jitter_stacks(const StackBounds& stacks, Rng& rng, int max_shift) {
  StackBounds out = stacks;
  const int k = static_cast<int>(stacks.size());
  const int end = stacks.back().second;
  for (int i = 1; i < k; ++i) {
    const int shift = max_shift > 0 ? rng.uniform_int(-max_shift, max_shift) : 0;
    const int b = std::clamp(stacks[i].first + shift, out[i - 1].first + 1, end - (k - i));
    out[i - 1].second = b;
    out[i].first = b;
  }
  return out;
}

/// Keyframe indices from a jittered stack partition.
inline std::vector<int> augment_temporal(std::span<const Image> frames, Rng& rng, int k, int max_shift = 1) {
  const auto stacks = partition_stacks(static_cast<int>(frames.size()), k);
  return select_in_stacks(frames, jitter_stacks(stacks, rng, max_shift));
}

// ---------------------------------------------------------------- data

inline std::vector<Clip> load_split(const std::filesystem::path& dir) {
  std::vector<Clip> clips;
  for (const auto& d : io::list_clip_dirs(dir)) clips.push_back(io::read_clip(d));
  return clips;
}

/// Registration and cropping of every clip, parallel over clips.
inline std::vector<RegisteredClip> prepare_clips(const std::vector<Clip>& clips, const PreprocessConfig& cfg) {
  for (const auto& c : clips)
    require(static_cast<int>(c.frames.size()) >= cfg.k + 1, ErrorCode::TooFewFrames,
            "clip " + c.clip_id + " has " + std::to_string(c.frames.size()) + " frames, need " +
                std::to_string(cfg.k + 1));
  std::vector<RegisteredClip> out(clips.size());
  std::vector<std::string> errors(clips.size());
#pragma omp parallel for schedule(dynamic)
  for (std::size_t i = 0; i < clips.size(); ++i) {
    try {
      out[i] = register_and_crop(clips[i], cfg);
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  }
  for (std::size_t i = 0; i < clips.size(); ++i)
    require(errors[i].empty(), ErrorCode::InvalidInput, "clip " + clips[i].clip_id + ": " + errors[i]);
  return out;
}

inline FrameSequence eval_sequence(const RegisteredClip& reg, const PreprocessConfig& cfg) {
  return gather_sequence(reg, select_keyframes(reg.frames, cfg.k), cfg.out_size);
}

inline FrameSequence train_sequence(const RegisteredClip& reg, const PreprocessConfig& cfg, const HyperParams& hp,
                                    Rng& rng) {
  if (!hp.augment) return eval_sequence(reg, cfg);
  auto idx = augment_temporal(reg.frames, rng, cfg.k, hp.temporal_jitter);
  return augment_spatial(gather_sequence(reg, idx, cfg.out_size), rng, hp.min_crop_scale, hp.flip);
}

// ---------------------------------------------------------------- branch adapters

template <typename T>
Var<T> branch_logits(const MultiFrameModel<T>& m, nn::Binder<T>& p, const FrameSequence& seq, Rng* train_rng) {
  return m.logits(p, seq.frames.template cast<T>(), train_rng);
}

template <typename T>
Var<T> branch_logits(const DiffModel<T>& m, nn::Binder<T>& p, const FrameSequence& seq, Rng*) {
  return m.logits(p, compute_diff_stack(seq).diffs.template cast<T>());
}

/// Logits [B, 2] for a batch of sequences in one graph.
template <typename T>
Var<T> batch_logits(const MultiFrameModel<T>& m, nn::Binder<T>& p, const std::vector<FrameSequence>& seqs,
                    Rng* train_rng) {
  Shape shape = seqs[0].frames.shape;
  const int t = shape[0];
  shape[0] = t * static_cast<int>(seqs.size());
  Tensor<T> frames(shape);
  const std::size_t per = seqs[0].frames.size();
  for (std::size_t b = 0; b < seqs.size(); ++b) {
    require(seqs[b].frames.shape == seqs[0].frames.shape, ErrorCode::InconsistentShapes, "batch sequences differ in shape");
    for (std::size_t i = 0; i < per; ++i) frames[b * per + i] = static_cast<T>(seqs[b].frames[i]);
  }
  return m.logits_batch(p, frames, static_cast<int>(seqs.size()), train_rng);
}

template <typename T>
Var<T> batch_logits(const DiffModel<T>& m, nn::Binder<T>& p, const std::vector<FrameSequence>& seqs, Rng*) {
  std::vector<Tensor<float>> diffs;
  for (const auto& s : seqs) diffs.push_back(compute_diff_stack(s).diffs);
  Shape shape = diffs[0].shape;
  shape.insert(shape.begin(), static_cast<int>(diffs.size()));
  Tensor<T> stacks(shape);
  const std::size_t per = diffs[0].size();
  for (std::size_t b = 0; b < diffs.size(); ++b) {
    require(diffs[b].shape == diffs[0].shape, ErrorCode::InconsistentShapes, "batch stacks differ in shape");
    for (std::size_t i = 0; i < per; ++i) stacks[b * per + i] = static_cast<T>(diffs[b][i]);
  }
  return m.logits(p, stacks);
}

template <typename Model>
ScorePair branch_score(const Model& m, const FrameSequence& seq) {
  nn::Binder<float> p(m.params, false);
  return scores_from_logits(branch_logits(m, p, seq, nullptr)->val());
}

// ---------------------------------------------------------------- evaluation

enum class FusionMode { Sum, MultiOnly, DiffOnly };

inline std::string to_string(FusionMode f) {
  switch (f) {
    case FusionMode::Sum: return "sum";
    case FusionMode::MultiOnly: return "multi-only";
    case FusionMode::DiffOnly: return "diff-only";
  }
  return "?";
}

inline FusionMode parse_fusion_mode(const std::string& s) {
  if (s == "sum") return FusionMode::Sum;
  if (s == "multi-only") return FusionMode::MultiOnly;
  if (s == "diff-only") return FusionMode::DiffOnly;
  throw Error(ErrorCode::InvalidConfig, "unknown fusion mode '" + s + "'");
}

/// Branch scores for one preprocessed clip; absent models are skipped.
struct ClipScores {
  std::optional<ScorePair> multi, diff;

  FusedScore fused() const {
    if (multi && diff) return fuse(*multi, *diff);
    require(multi || diff, ErrorCode::MissingArtifact, "no branch produced a score");
    return fuse_single(multi ? *multi : *diff);
  }
};

inline ClipScores score_clip(const RegisteredClip& reg, const PreprocessConfig& cfg, const MultiFrameModel<float>* multi,
                             const DiffModel<float>* diff) {
  const FrameSequence seq = eval_sequence(reg, cfg);
  ClipScores s;
  if (multi) s.multi = branch_score(*multi, seq);
  if (diff) s.diff = branch_score(*diff, seq);
  return s;
}

inline std::vector<ClipScores> score_clips(const std::vector<RegisteredClip>& clips, const PreprocessConfig& cfg,
                                           const MultiFrameModel<float>* multi, const DiffModel<float>* diff) {
  std::vector<ClipScores> out(clips.size());
#pragma omp parallel for schedule(dynamic)
  for (std::size_t i = 0; i < clips.size(); ++i) out[i] = score_clip(clips[i], cfg, multi, diff);
  return out;
}

inline std::vector<ScoredSample> to_samples(const std::vector<RegisteredClip>& clips,
                                            const std::vector<ClipScores>& scores) {
  std::vector<ScoredSample> samples;
  for (std::size_t i = 0; i < clips.size(); ++i)
    samples.push_back({scores[i].fused(), clips[i].label == "live", clips[i].label});
  return samples;
}

/// Preprocess, score, fuse, decide and tabulate. A null model drops that
/// branch; the report's `branch` is "sum", "multi" or "diff".
inline MetricsReport evaluate(const MultiFrameModel<float>* multi, const DiffModel<float>* diff,
                              const std::vector<RegisteredClip>& clips, const PreprocessConfig& cfg,
                              double threshold = 1.0) {
  require(!clips.empty(), ErrorCode::EmptyDataset, "evaluation set is empty");
  require(multi || diff, ErrorCode::MissingArtifact, "evaluate needs at least one branch");
  auto report = compute_metrics(to_samples(clips, score_clips(clips, cfg, multi, diff)), threshold);
  report.branch = multi && diff ? "sum" : (multi ? "multi" : "diff");
  return report;
}

inline double accuracy(const MetricsReport& r) {
  return r.total() ? static_cast<double>(r.tp + r.tn) / static_cast<double>(r.total()) : 0.0;
}

// ---------------------------------------------------------------- training

struct EpochRecord {
  int epoch = 0;
  double lr = 0;
  double loss = 0;
  double train_acc = 0;
  double seconds = 0;
  std::optional<MetricsReport> eval;

  nlohmann::json to_json() const {
    return {{"epoch", epoch},
            {"lr", lr},
            {"loss", loss},
            {"train_acc", train_acc},
            {"seconds", seconds},
            {"eval", eval ? eval->to_json() : nlohmann::json(nullptr)}};
  }
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  int best_epoch = -1;

  std::vector<double> losses() const {
    std::vector<double> l;
    for (const auto& e : epochs) l.push_back(e.loss);
    return l;
  }
};

template <typename Model>
struct TrainResult {
  Model model;  // parameters of the best epoch
  TrainHistory history;
};

namespace train_detail {

inline void check_dataset(const std::vector<RegisteredClip>& clips) {
  require(!clips.empty(), ErrorCode::EmptyDataset, "training set is empty");
  bool live = false, spoof = false;
  for (const auto& c : clips) (c.label == "live" ? live : spoof) = true;
  require(live && spoof, ErrorCode::SingleClassDataset, "training set needs both live and spoof clips");
}

inline std::vector<std::size_t> shuffled(std::size_t n, Rng& rng) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(i) - 1))]);
  return order;
}

}  // namespace train_detail

/// Trains with SGD + momentum on softmax cross-entropy, one graph per
/// mini-batch, and returns the parameters of the epoch with the lowest eval
/// ACER (latest on ties; the last epoch when no eval set is given).
template <typename Model>
TrainResult<Model> train_branch(Model model, const std::vector<RegisteredClip>& train_set,
                                const std::vector<RegisteredClip>* eval_set, const PreprocessConfig& cfg,
                                const HyperParams& hp, int batch_size,
                                const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  train_detail::check_dataset(train_set);
  hp.validate();
  require(batch_size >= 1, ErrorCode::InvalidConfig, "batch size must be >= 1");
  constexpr bool is_multi = std::is_same_v<Model, MultiFrameModel<float>>;
  constexpr double kStatMomentum = 0.1;
  Rng order_rng(mix_seed(hp.seed, is_multi ? 101 : 202));
  auto velocity = model.params.zeros();
  TrainResult<Model> result{model, {}};
  double best_acer = 2.0;
  int calm_epochs = 0;

  for (int epoch = 0; epoch < hp.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = hp.lr_at(epoch);
    const auto order = train_detail::shuffled(train_set.size(), order_rng);
    double loss_sum = 0;
    int correct = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(batch_size)) {
      const std::size_t n = std::min(order.size() - start, static_cast<std::size_t>(batch_size));
      std::vector<std::uint64_t> seeds(n);
      for (auto& s : seeds) s = order_rng.next();
      const std::uint64_t batch_seed = order_rng.next();
      std::vector<FrameSequence> seqs(n);
      std::vector<int> targets(n);
      std::vector<std::string> errors(n);
#pragma omp parallel for schedule(dynamic)
      for (std::size_t j = 0; j < n; ++j) {
        try {
          Rng rng(seeds[j]);
          seqs[j] = train_sequence(train_set[order[start + j]], cfg, hp, rng);
        } catch (const std::exception& e) {
          errors[j] = e.what();
        }
      }
      for (const auto& e : errors) require(e.empty(), ErrorCode::InvalidInput, e);
      for (std::size_t j = 0; j < n; ++j) targets[j] = train_set[order[start + j]].label == "live" ? 0 : 1;

      nn::Binder<float> p(model.params, true, true);
      Rng drop(batch_seed);
      auto logits = batch_logits(model, p, seqs, &drop);
      auto loss = ag::softmax_cross_entropy(logits, targets);
      ag::backward(loss);
      auto grads = model.params.zeros();
      p.accumulate(grads);
      p.apply_stats(model.params, kStatMomentum);

      const auto& l = logits->val();
      for (std::size_t j = 0; j < n; ++j) correct += (l[2 * j] > l[2 * j + 1]) == (targets[j] == 0);
      loss_sum += static_cast<double>(loss->val()[0]) * static_cast<double>(n);

      auto& values = model.params.values();
      const float mu = static_cast<float>(hp.momentum), step = static_cast<float>(lr);
      const float decay = static_cast<float>(hp.weight_decay);
      for (std::size_t q = 0; q < values.size(); ++q) {
        if (!model.params.trainable(static_cast<int>(q))) continue;
        for (std::size_t i = 0; i < values[q].size(); ++i) {
          velocity[q][i] = mu * velocity[q][i] + grads[q][i] + decay * values[q][i];
          values[q][i] -= step * velocity[q][i];
        }
      }
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    rec.loss = loss_sum / static_cast<double>(train_set.size());
    rec.train_acc = static_cast<double>(correct) / static_cast<double>(train_set.size());
    if (eval_set && !eval_set->empty()) {
      if constexpr (is_multi)
        rec.eval = evaluate(&model, nullptr, *eval_set, cfg);
      else if constexpr (std::is_same_v<Model, DiffModel<float>>)
        rec.eval = evaluate(nullptr, &model, *eval_set, cfg);
    }
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (!rec.eval || rec.eval->acer <= best_acer) {
      if (rec.eval) best_acer = rec.eval->acer;
      result.model.params = model.params;
      result.history.best_epoch = epoch;
    }
    result.history.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);

    calm_epochs = (hp.stop_loss > 0 && rec.loss < hp.stop_loss && rec.train_acc == 1.0) ? calm_epochs + 1 : 0;
    if (hp.stop_loss > 0 && calm_epochs >= hp.stop_patience) break;
  }
  return result;
}

inline TrainResult<MultiFrameModel<float>> train_multi(const RunConfig& c, const std::vector<RegisteredClip>& train_set,
                                                       const std::vector<RegisteredClip>* eval_set,
                                                       const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  return train_branch(MultiFrameModel<float>::create(c.multi), train_set, eval_set, c.prep, c.train, c.train.batch_multi,
                      on_epoch);
}

inline TrainResult<DiffModel<float>> train_diff(const RunConfig& c, const std::vector<RegisteredClip>& train_set,
                                                const std::vector<RegisteredClip>* eval_set,
                                                const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  return train_branch(DiffModel<float>::create(c.diff), train_set, eval_set, c.prep, c.train, c.train.batch_diff,
                      on_epoch);
}

}  // namespace fas
