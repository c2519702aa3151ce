// Acceptance runner: one PASS/FAIL line per criterion, nonzero exit on any failure.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "fas/config.hpp"
#include "fas/io.hpp"
#include "fas/synthetic_data.hpp"
#include "fas/training.hpp"
#include "oracles.hpp"

using namespace fas;
namespace fs = std::filesystem;

namespace {

// tolerances
constexpr double kMetricTol = 1e-12;
constexpr double kOracleTol = 1e-6;
constexpr double kRefitTol = 1e-6;
constexpr double kGradTol = 1e-4;
constexpr std::size_t kMinParams = 1'200'000, kMaxParams = 2'300'000;
constexpr double kMinFusedAccuracy = 0.95;
constexpr double kFusedAcerSlack = 0.05;
constexpr double kMedianSlack = 0.02;
constexpr double kRuntimeBudgetSeconds = 15 * 60;
constexpr int kMaxEpochs = 120;
constexpr int kMemorizeEpochs = 200;

int failures = 0;

void report(int id, const std::string& name, bool ok, const std::string& detail) {
  std::printf("[%s] %d %s: %s\n", ok ? "PASS" : "FAIL", id, name.c_str(), detail.c_str());
  std::fflush(stdout);
  failures += !ok;
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

const fs::path& work_dir() {
  static const fs::path dir = [] {
    const fs::path d = fs::temp_directory_path() / "fas_acceptance";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

RunConfig synthetic_config(std::uint64_t seed) {
  RunConfig c = load_config(fs::path(FAS_SOURCE_DIR) / "configs" / "synthetic.cfg");
  const std::string s = std::to_string(seed);
  for (const char* key : {"synth.seed", "train.seed", "multi.seed", "diff.seed"}) set_config_value(c, key, s);
  set_config_value(c, "train.epochs", std::to_string(kMaxEpochs));
  c.finalize();
  return c;
}

struct Data {
  std::vector<RegisteredClip> train, test;
};

Data load_data(const RunConfig& c, const fs::path& root) {
  generate_dataset(c.synth, root);
  return {prepare_clips(load_split(root / "train"), c.prep), prepare_clips(load_split(root / "test"), c.prep)};
}

struct SeedRun {
  MetricsReport fused, multi, diff;
  int multi_epochs = 0, diff_epochs = 0;
  double seconds = 0;
};

/// Generate, train both branches without looking at the test split, then score it.
SeedRun run_seed(std::uint64_t seed) {
  const auto t0 = std::chrono::steady_clock::now();
  const RunConfig c = synthetic_config(seed);
  const Data d = load_data(c, work_dir() / ("seed_" + std::to_string(seed)));
  const auto multi = train_multi(c, d.train, nullptr);
  const auto diff = train_diff(c, d.train, nullptr);
  SeedRun r;
  r.fused = evaluate(&multi.model, &diff.model, d.test, c.prep);
  r.multi = evaluate(&multi.model, nullptr, d.test, c.prep);
  r.diff = evaluate(nullptr, &diff.model, d.test, c.prep);
  r.multi_epochs = static_cast<int>(multi.history.epochs.size());
  r.diff_epochs = static_cast<int>(diff.history.epochs.size());
  r.seconds = seconds_since(t0);
  std::printf("  seed %llu: fused acc %.4f acer %.4f | multi acer %.4f (%d ep) | diff acer %.4f (%d ep) | %.1f s\n",
              static_cast<unsigned long long>(seed), accuracy(r.fused), r.fused.acer, r.multi.acer, r.multi_epochs,
              r.diff.acer, r.diff_epochs, r.seconds);
  std::fflush(stdout);
  return r;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// ---------------------------------------------------------------- 1

void metric_arithmetic() {
  auto construct = [](int attacks_accepted, int live_rejected) {
    std::vector<ScoredSample> s;
    for (int i = 0; i < 1000; ++i) s.push_back(oracle::sample(i < attacks_accepted ? 1.5 : 0.5, false, "print"));
    for (int i = 0; i < 1000; ++i) s.push_back(oracle::sample(i < live_rejected ? 0.5 : 1.5, true, ""));
    return compute_metrics(s);
  };
  const auto a = construct(9, 15), b = construct(33, 9);
  const bool ok = std::abs(a.acer - 0.012) <= kMetricTol && std::abs(b.acer - 0.021) <= kMetricTol &&
                  std::abs(a.apcer - 0.009) <= kMetricTol && std::abs(a.bpcer - 0.015) <= kMetricTol &&
                  std::abs(b.apcer - 0.033) <= kMetricTol && std::abs(b.bpcer - 0.009) <= kMetricTol;
  report(1, "metric arithmetic", ok, fmt("ACER(0.9%%, 1.5%%) = %.15g, ACER(3.3%%, 0.9%%) = %.15g", a.acer, b.acer));
}

// ---------------------------------------------------------------- 2

void parameter_budget() {
  const auto multi = MultiFrameModel<float>::create(MultiFrameConfig{});
  const auto diff = DiffModel<float>::create(DiffBranchConfig{});
  const std::size_t total = multi.params.numel() + diff.params.numel();
  report(2, "parameter budget", total >= kMinParams && total <= kMaxParams,
         fmt("multi %zu + diff %zu = %zu trainable (bounds [%zu, %zu])", multi.params.numel(), diff.params.numel(),
             total, kMinParams, kMaxParams));
}

// ---------------------------------------------------------------- 3 and 4

void end_to_end(const std::vector<SeedRun>& runs) {
  const SeedRun& r = runs.front();
  const double best_single = std::min(r.multi.acer, r.diff.acer);
  const bool ok = accuracy(r.fused) >= kMinFusedAccuracy && r.fused.acer <= best_single + kFusedAcerSlack &&
                  r.seconds <= kRuntimeBudgetSeconds;
  report(3, "synthetic end-to-end (seed 7)", ok,
         fmt("fused acc %.4f (>= %.2f), fused ACER %.4f vs best single %.4f + %.2f, %.1f s (<= %.0f s)",
             accuracy(r.fused), kMinFusedAccuracy, r.fused.acer, best_single, kFusedAcerSlack, r.seconds,
             kRuntimeBudgetSeconds));
}

void fusion_over_seeds(const std::vector<SeedRun>& runs) {
  std::vector<double> fused, multi, diff;
  for (const auto& r : runs) {
    fused.push_back(r.fused.acer);
    multi.push_back(r.multi.acer);
    diff.push_back(r.diff.acer);
  }
  const double mf = median(fused), mm = median(multi), md = median(diff);
  report(4, "fusion over 5 seeds", mf <= mm + kMedianSlack && mf <= md + kMedianSlack,
         fmt("median ACER fused %.4f, multi %.4f, diff %.4f (slack %.2f)", mf, mm, md, kMedianSlack));
}

// ---------------------------------------------------------------- 5

void oracle_equivalence() {
  Rng rng(2024);
  int keyframe_bad = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const int n = rng.uniform_int(2, 24), k = rng.uniform_int(1, n - 1);
    std::vector<Image> frames;
    for (int i = 0; i < n; ++i) frames.push_back(oracle::random_image(rng, 5, 6));
    keyframe_bad += select_keyframes(frames, k) != oracle::keyframes(frames, k);
  }

  int metric_bad = 0;
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<ScoredSample> s;
    const int n = rng.uniform_int(2, 60);
    s.push_back(oracle::sample(rng.uniform(0, 2), true, ""));
    s.push_back(oracle::sample(rng.uniform(0, 2), false, "print"));
    for (int i = 0; i < n; ++i) {
      const bool live = rng.uniform(0, 1) < 0.4;
      // quantised scores so some land exactly on the threshold
      const double score = std::round(rng.uniform(0, 2) * 8) / 8;
      s.push_back(oracle::sample(score, live, live ? "" : (rng.uniform(0, 1) < 0.5 ? "print" : "replay")));
    }
    const auto got = compute_metrics(s);
    const auto want = oracle::count_metrics(s, 1.0);
    bool same = std::abs(got.apcer - want.apcer) <= kMetricTol && std::abs(got.bpcer - want.bpcer) <= kMetricTol &&
                std::abs(got.acer - want.acer) <= kMetricTol && std::abs(got.hter - want.hter) <= kMetricTol &&
                std::abs(got.apcer_worst - want.apcer_worst) <= kMetricTol && got.tp == want.tp &&
                got.tn == want.tn && got.fp == want.fp && got.fn == want.fn;
    for (const auto& [type, v] : want.by_type) same = same && std::abs(got.apcer_by_type.at(type) - v) <= kMetricTol;
    metric_bad += !same;
  }

  double pool_err = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const int h = rng.uniform_int(1, 13), w = rng.uniform_int(1, 13);
    const auto x = oracle::random_tensor<double>(rng, {2, h, w, 3});
    for (int bins : {1, 2, 3, 6})
      pool_err = std::max(pool_err, max_abs_diff(ag::adaptive_avg_pool(ag::constant(x), bins)->val(),
                                                 oracle::adaptive_pool(x, bins)));
  }

  double adapt_err = 0;
  for (int k : {1, 2, 4, 9}) {
    const auto w = oracle::random_tensor<double>(rng, {5, 3, 3, 3});
    adapt_err = std::max(adapt_err, max_abs_diff(adapt_first_layer(w, k), oracle::channel_mean_replicated(w, k)));
  }

  double fpm_err = 0;
  for (FpmDirection dir : {FpmDirection::CoarseToFine, FpmDirection::FineToCoarse}) {
    std::vector<Tensor<double>> lat;
    std::vector<ag::Var<double>> vars;
    for (int l = 0; l < 5; ++l) {
      lat.push_back(oracle::random_tensor<double>(rng, {2, 32 >> l, 32 >> l, 4}));
      vars.push_back(ag::constant(lat.back()));
    }
    const auto got = fpm_merge(vars, dir);
    const auto want = dir == FpmDirection::CoarseToFine ? oracle::fpm_coarse_to_fine(lat) : oracle::fpm_fine_to_coarse(lat);
    for (int l = 0; l < 5; ++l) fpm_err = std::max(fpm_err, max_abs_diff(got[l]->val(), want[l]));
  }

  const bool ok = keyframe_bad == 0 && metric_bad == 0 && pool_err <= kOracleTol && adapt_err <= kOracleTol &&
                  fpm_err <= kOracleTol;
  report(5, "oracle equivalence", ok,
         fmt("keyframe mismatches %d/100, metric mismatches %d/100, max err pool %.2g adapt %.2g fpm %.2g", keyframe_bad,
             metric_bad, pool_err, adapt_err, fpm_err));
}

// ---------------------------------------------------------------- 6

void registration() {
  Rng rng(77);
  const std::vector<Point2> square{{0, 0}, {1, 0}, {1, 1}, {0, 1}};
  const auto id = fit_registration(square, square);
  double id_err = 0;
  const std::array<double, 9> eye{1, 0, 0, 0, 1, 0, 0, 0, 1};
  for (int i = 0; i < 9; ++i) id_err = std::max(id_err, std::abs(id.w[i] - eye[i]));

  double refit_err = 0;
  for (int trial = 0; trial < 50; ++trial) {
    Eigen::Matrix3d h;
    h << 1 + rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2), rng.uniform(-20, 20), rng.uniform(-0.2, 0.2),
        1 + rng.uniform(-0.2, 0.2), rng.uniform(-20, 20), rng.uniform(-1e-3, 1e-3), rng.uniform(-1e-3, 1e-3), 1;
    std::vector<Point2> src, dst;
    for (int i = 0; i < 6; ++i) {
      const Point2 p{rng.uniform(0, 200), rng.uniform(0, 200)};
      const Eigen::Vector3d q = h * Eigen::Vector3d(p.x, p.y, 1);
      src.push_back(p);
      dst.push_back({q.x() / q.z(), q.y() / q.z()});
    }
    const auto t = fit_registration(src, dst);
    for (std::size_t i = 0; i < src.size(); ++i) {
      const Point2 p = t.apply(src[i]);
      refit_err = std::max(refit_err, std::hypot(p.x - dst[i].x, p.y - dst[i].y));
    }
  }

  const Image img = oracle::random_image(rng, 17, 17);
  const bool warp_identity = warp_frame(img, RegistrationTransform::identity(), 17) == img;
  bool warp_shift = true;
  for (const auto& [dx, dy] : std::vector<std::pair<int, int>>{{3, 0}, {0, 2}, {-2, 4}}) {
    const Image out = warp_frame(img, RegistrationTransform::translation(dx, dy), 17);
    for (int y = 0; y < 17; ++y)
      for (int x = 0; x < 17; ++x) {
        const int sx = x + dx, sy = y + dy;
        if (sx < 0 || sy < 0 || sx >= 17 || sy >= 17) continue;
        for (int c = 0; c < 3; ++c) warp_shift = warp_shift && out[(y * 17 + x) * 3 + c] == img[(sy * 17 + sx) * 3 + c];
      }
  }
  const bool ok = id_err < kRefitTol && warp_identity && refit_err < kRefitTol && warp_shift;
  report(6, "registration", ok,
         fmt("identity fit err %.2g, identity warp %s, refit max err %.2g, integer shift interior %s", id_err,
             warp_identity ? "exact" : "differs", refit_err, warp_shift ? "exact" : "differs"));
}

// ---------------------------------------------------------------- 7

void gradients() {
  Rng rng(31);
  nn::ParamStore<double> store;
  const auto feats = PyramidFeatures::create(store, "net", oracle::micro_backbone(3),
                                             FpmConfig{FpmDirection::CoarseToFine, 4}, true, PpmConfig{{1, 2}}, rng);
  const auto x = oracle::random_tensor<double>(rng, {2, 64, 64, 3});
  const auto pyramid = oracle::check_gradients(store, [&](nn::Binder<double>& p) {
    const auto pyr = feats(p, ag::constant(x));
    ag::Var<double> total;
    for (const auto& level : pyr.levels) {
      auto term = ag::dot_const(level, Tensor<double>(level->shape(), 1.0));
      total = total ? ag::add(total, term) : term;
    }
    return total;
  });

  nn::ParamStore<double> head_store;
  const std::vector<int> dims{3, 4, 2, 5, 3};
  auto head = TemporalHead::create(head_store, "h", dims, 3, 0.0, rng);
  std::vector<ag::Var<double>> seqs;
  for (int d : dims) seqs.push_back(ag::constant(oracle::random_tensor<double>(rng, {8, d})));
  const auto temporal = oracle::check_gradients(head_store, [&](nn::Binder<double>& p) {
    return ag::softmax_cross_entropy(head.logits_batch(p, seqs, 2), {0, 1});
  });

  DiffBranchConfig dc;
  dc.k = 2;
  dc.backbone = oracle::micro_backbone(6);
  dc.fpm.channels = 4;
  dc.ppm.bins = {1, 2};
  auto dm = DiffModel<double>::create(dc);
  const auto stacks = oracle::random_tensor<double>(rng, {2, 32, 32, 6}, -0.5, 0.5);
  const auto diff = oracle::check_gradients(dm.params, [&](nn::Binder<double>& p) {
    return ag::softmax_cross_entropy(dm.logits(p, stacks), {0, 1});
  });

  bool ok = true;
  std::string detail;
  for (const auto& [name, r] : {std::pair{"backbone+fpm+ppm", pyramid}, {"temporal", temporal}, {"diff", diff}}) {
    ok = ok && r.worst_rel < kGradTol && r.global_rel < kGradTol;
    detail += fmt("%s global %.2g worst %.2g (%s, %zu scalars); ", name, r.global_rel, r.worst_rel,
                  r.worst_param.c_str(), r.checked);
  }
  report(7, "gradient checks", ok, detail + fmt("tol %.0e", kGradTol));
}

// ---------------------------------------------------------------- 8

bool same_tree(const fs::path& a, const fs::path& b) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(a))
    if (e.is_regular_file()) files.push_back(fs::relative(e.path(), a));
  std::size_t count_b = 0;
  for (const auto& e : fs::recursive_directory_iterator(b)) count_b += e.is_regular_file();
  if (files.empty() || files.size() != count_b) return false;
  for (const auto& f : files)
    if (!fs::exists(b / f) || io::read_text(a / f) != io::read_text(b / f)) return false;
  return true;
}

void determinism() {
  RunConfig c = synthetic_config(7);
  set_config_value(c, "train.epochs", "3");
  c.finalize();
  const fs::path a = work_dir() / "det_a", b = work_dir() / "det_b";
  const Data da = load_data(c, a);
  generate_dataset(c.synth, b);
  const bool bytes = same_tree(a, b);

  auto run = [&] {
    const auto m = train_multi(c, da.train, nullptr);
    const auto d = train_diff(c, da.train, nullptr);
    nlohmann::json metrics{{"sum", evaluate(&m.model, &d.model, da.test, c.prep).to_json()},
                           {"multi", evaluate(&m.model, nullptr, da.test, c.prep).to_json()},
                           {"diff", evaluate(nullptr, &d.model, da.test, c.prep).to_json()}};
    return std::tuple{m.history.losses(), d.history.losses(), metrics.dump()};
  };
  const auto [m1, d1, j1] = run();
  const auto [m2, d2, j2] = run();
  const bool curves = m1 == m2 && d1 == d2, json = j1 == j2;
  report(8, "determinism", bytes && curves && json,
         fmt("dataset bytes %s, loss curves %s (%zu + %zu epochs), metrics JSON %s", bytes ? "identical" : "differ",
             curves ? "identical" : "differ", m1.size(), d1.size(), json ? "identical" : "differs"));
}

// ---------------------------------------------------------------- 9

void memorization(const Data& seed7) {
  RunConfig c = synthetic_config(7);
  set_config_value(c, "train.augment", "off");
  set_config_value(c, "train.epochs", std::to_string(kMemorizeEpochs));
  // stop at the first epoch with every training clip classified correctly
  set_config_value(c, "train.stop_loss", "1e30");
  set_config_value(c, "train.stop_patience", "1");
  c.finalize();

  std::vector<RegisteredClip> few;
  std::map<std::string, int> quota{{"live", 3}, {"print", 3}, {"replay", 2}};
  for (const auto& clip : seed7.train)
    if (quota[clip.label]-- > 0) few.push_back(clip);

  auto first_perfect = [](const TrainHistory& h) {
    for (const auto& e : h.epochs)
      if (e.train_acc == 1.0) return e.epoch + 1;
    return -1;
  };
  const auto m = train_multi(c, few, nullptr);
  const auto d = train_diff(c, few, nullptr);
  const int em = first_perfect(m.history), ed = first_perfect(d.history);
  const double acer_m = evaluate(&m.model, nullptr, few, c.prep).acer;
  const double acer_d = evaluate(nullptr, &d.model, few, c.prep).acer;
  report(9, "8-clip memorization", em > 0 && ed > 0,
         fmt("%zu clips; train acc 1.0 at epoch multi %d, diff %d (limit %d); eval-mode train ACER multi %.3f, diff %.3f",
             few.size(), em, ed, kMemorizeEpochs, acer_m, acer_d));
}

}  // namespace

int main() {
  try {
    const auto t0 = std::chrono::steady_clock::now();
    metric_arithmetic();
    parameter_budget();
    oracle_equivalence();
    registration();
    gradients();
    determinism();
    {
      const RunConfig c = synthetic_config(7);
      memorization(load_data(c, work_dir() / "memorize"));
    }
    std::vector<SeedRun> runs;
    for (std::uint64_t seed : {7, 8, 9, 10, 11}) runs.push_back(run_seed(seed));
    end_to_end(runs);
    fusion_over_seeds(runs);
    std::printf("%d criteria failed, %.1f s total\n", failures, seconds_since(t0));
  } catch (const std::exception& e) {
    std::printf("[FAIL] acceptance aborted: %s\n", e.what());
    return 1;
  }
  fs::remove_all(work_dir());
  return failures == 0 ? 0 : 1;
}
