// fas: generate synthetic data, train the two branches, evaluate and predict.
//
// Exit codes: 0 success, 2 config/usage error, 3 missing artifact,
// 4 bad input data.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include "fas/checkpoint.hpp"
#include "fas/config.hpp"
#include "fas/synthetic_data.hpp"
#include "fas/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace fas;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitMissing = 3;
constexpr int kExitData = 4;

int exit_code(ErrorCode c) {
  switch (c) {
    case ErrorCode::InvalidConfig: return kExitConfig;
    case ErrorCode::MissingArtifact:
    case ErrorCode::IOFailure: return kExitMissing;
    default: return kExitData;
  }
}

std::string sha256_hex(const std::string& data) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_Digest(data.data(), data.size(), md, &len, EVP_sha256(), nullptr);
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
  return os.str();
}

/// Git-style tree hash: every file hashed as "blob <size>\0<bytes>", then
/// the sorted "<relative path> <hash>" lines hashed together.
std::string content_hash(const fs::path& root) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::string tree;
  for (const auto& f : files) {
    const std::string bytes = io::read_text(f);
    std::string blob = "blob " + std::to_string(bytes.size());
    blob.push_back('\0');
    tree += fs::relative(f, root).generic_string() + " " + sha256_hex(blob + bytes) + "\n";
  }
  return sha256_hex(tree);
}

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string command_line(int argc, char** argv) {
  std::string s;
  for (int i = 0; i < argc; ++i) s += (i ? " " : "") + std::string(argv[i]);
  return s;
}

struct CommonOptions {
  std::string config_path;
  std::vector<std::string> overrides;
};

RunConfig build_config(const CommonOptions& o, const ConfigPairs& extra = {}) {
  RunConfig c = load_config(o.config_path);
  for (const auto& kv : o.overrides) {
    const auto eq = kv.find('=');
    require(eq != std::string::npos, ErrorCode::InvalidConfig, "--set expects key=value, got '" + kv + "'");
    set_config_value(c, config_detail::trim(kv.substr(0, eq)), kv.substr(eq + 1));
  }
  apply_config(c, extra);
  c.finalize();
  return c;
}

json checkpoint_header(const RunConfig& c, Branch b, const TrainHistory& h) {
  return {{"branch", to_string(b)},
          {"seed", c.train.seed},
          {"best_epoch", h.best_epoch},
          {"epochs_run", h.epochs.size()},
          {"config", config_json(c)}};
}

std::string history_jsonl(const TrainHistory& h) {
  std::string s;
  for (const auto& e : h.epochs) s += e.to_json().dump() + "\n";
  return s;
}

// ---------------------------------------------------------------- generate

int cmd_generate(const CommonOptions& o, const std::string& out) {
  ConfigPairs extra;
  if (!out.empty()) extra.emplace_back("paths.dataset", out);
  const RunConfig c = build_config(o, extra);
  const auto split = generate_dataset(c.synth, c.dataset);
  std::cout << json{{"dataset", c.dataset},
                    {"train", split.train.size()},
                    {"test", split.test.size()},
                    {"content_hash", content_hash(c.dataset)}}
                   .dump(2)
            << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------- train

struct LoadedModels {
  RunConfig config;
  std::optional<MultiFrameModel<float>> multi;
  std::optional<DiffModel<float>> diff;
};

fs::path checkpoint_path(const fs::path& run_dir, Branch b) { return run_dir / (to_string(b) + ".ckpt"); }

int cmd_train(const CommonOptions& o, const std::string& branch, const std::string& run_dir_flag,
              const std::string& dataset_flag, const std::string& multi_fpm, const std::string& diff_fpm,
              const std::string& ppm, const std::string& argv_line) {
  ConfigPairs extra;
  if (!run_dir_flag.empty()) extra.emplace_back("paths.run_dir", run_dir_flag);
  if (!dataset_flag.empty()) extra.emplace_back("paths.dataset", dataset_flag);
  if (!multi_fpm.empty()) extra.emplace_back("multi.fpm_direction", multi_fpm);
  if (!diff_fpm.empty()) extra.emplace_back("diff.fpm_direction", diff_fpm);
  if (!ppm.empty()) {
    extra.emplace_back("multi.ppm", ppm);
    extra.emplace_back("diff.ppm", ppm);
  }
  const RunConfig c = build_config(o, extra);
  std::vector<Branch> branches;
  if (branch == "multi" || branch == "both") branches.push_back(Branch::Multi);
  if (branch == "diff" || branch == "both") branches.push_back(Branch::Diff);

  const fs::path dataset(c.dataset), run_dir(c.run_dir);
  require(fs::is_directory(dataset / "train"), ErrorCode::MissingArtifact,
          "dataset " + dataset.string() + " has no train split");
  const std::string started = utc_now();
  const std::string data_hash = content_hash(dataset);
  std::cerr << "loading " << dataset.string() << "\n";
  const auto train_set = prepare_clips(load_split(dataset / "train"), c.prep);
  std::vector<RegisteredClip> val_set, test_set;
  if (fs::is_directory(dataset / "val")) val_set = prepare_clips(load_split(dataset / "val"), c.prep);
  if (fs::is_directory(dataset / "test")) test_set = prepare_clips(load_split(dataset / "test"), c.prep);
  const auto* select = val_set.empty() ? nullptr : &val_set;
  const bool has_test = !test_set.empty();

  fs::create_directories(run_dir);
  io::write_text(run_dir / "config.txt", format_config(c));
  json outputs = json::array({"config.txt", "metrics.json"});
  json metrics = json::object();
  std::optional<MultiFrameModel<float>> multi;
  std::optional<DiffModel<float>> diff;

  for (Branch b : branches) {
    const std::string name = to_string(b);
    auto log = [&](const EpochRecord& r) {
      std::cerr << name << " epoch " << r.epoch << " loss " << r.loss << " acc " << r.train_acc;
      if (r.eval) std::cerr << " val_acer " << r.eval->acer;
      std::cerr << " (" << std::llround(r.seconds * 10.0) / 10.0 << "s)\n";
    };
    TrainHistory history;
    if (b == Branch::Multi) {
      auto r = train_multi(c, train_set, select, log);
      save_checkpoint(checkpoint_path(run_dir, b), checkpoint_header(c, b, r.history), r.model.params);
      history = r.history;
      multi = std::move(r.model);
    } else {
      auto r = train_diff(c, train_set, select, log);
      save_checkpoint(checkpoint_path(run_dir, b), checkpoint_header(c, b, r.history), r.model.params);
      history = r.history;
      diff = std::move(r.model);
    }
    io::write_text(run_dir / (name + "_history.jsonl"), history_jsonl(history));
    outputs.push_back(name + ".ckpt");
    outputs.push_back(name + "_history.jsonl");
    if (has_test)
      metrics[name] = evaluate(b == Branch::Multi ? &*multi : nullptr, b == Branch::Diff ? &*diff : nullptr, test_set,
                               c.prep)
                          .to_json();
  }
  if (has_test && multi && diff) metrics["sum"] = evaluate(&*multi, &*diff, test_set, c.prep).to_json();
  io::write_text(run_dir / "metrics.json", metrics.dump(2) + "\n");

  json manifest{{"command", argv_line},
                {"subcommand", "train"},
                {"branch", branch},
                {"seed", c.train.seed},
                {"config", config_json(c)},
                {"dataset", {{"path", c.dataset}, {"content_hash", data_hash}}},
                {"started", started},
                {"finished", utc_now()},
                {"outputs", outputs}};
  io::write_text(run_dir / "manifest.json", manifest.dump(2) + "\n");
  std::cout << metrics.dump(2) << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------- evaluate / predict

LoadedModels load_models(const fs::path& run_dir, bool need_multi, bool need_diff) {
  require(fs::is_directory(run_dir), ErrorCode::MissingArtifact, "run directory " + run_dir.string() + " not found");
  LoadedModels m;
  bool have_config = false;
  for (Branch b : {Branch::Multi, Branch::Diff}) {
    const bool needed = b == Branch::Multi ? need_multi : need_diff;
    const fs::path path = checkpoint_path(run_dir, b);
    if (!fs::exists(path)) {
      require(!needed, ErrorCode::MissingArtifact, "missing checkpoint " + path.string());
      continue;
    }
    if (!needed && (need_multi || need_diff)) continue;
    Checkpoint ck = load_checkpoint(path);
    RunConfig c = config_from_json(ck.header.at("config"));
    if (!have_config) {
      m.config = c;
      have_config = true;
    } else {
      require(c.prep.k == m.config.prep.k && c.prep.out_size == m.config.prep.out_size &&
                  c.prep.crop_margin == m.config.prep.crop_margin,
              ErrorCode::InvalidConfig, "checkpoints in " + run_dir.string() + " disagree on preprocessing");
    }
    if (b == Branch::Multi) {
      m.multi = MultiFrameModel<float>::create(c.multi);
      restore_params(m.multi->params, ck.params);
    } else {
      m.diff = DiffModel<float>::create(c.diff);
      restore_params(m.diff->params, ck.params);
    }
  }
  require(m.multi || m.diff, ErrorCode::MissingArtifact, "no checkpoints in " + run_dir.string());
  return m;
}

int cmd_evaluate(const std::string& run_dir, const std::string& dataset_flag, const std::string& split,
                 const std::string& fusion_flag, double threshold, const std::string& argv_line) {
  const FusionMode fusion = parse_fusion_mode(fusion_flag);
  const bool need_multi = fusion != FusionMode::DiffOnly, need_diff = fusion != FusionMode::MultiOnly;
  const LoadedModels m = load_models(run_dir, need_multi, need_diff);
  const fs::path dataset = dataset_flag.empty() ? fs::path(m.config.dataset) : fs::path(dataset_flag);
  require(fs::is_directory(dataset / split), ErrorCode::MissingArtifact,
          "dataset split " + (dataset / split).string() + " not found");
  const auto clips = prepare_clips(load_split(dataset / split), m.config.prep);
  auto report = evaluate(need_multi ? &*m.multi : nullptr, need_diff ? &*m.diff : nullptr, clips, m.config.prep,
                         threshold);
  json out = report.to_json();
  out["fusion"] = to_string(fusion);
  out["split"] = split;
  out["clips"] = clips.size();
  out["accuracy"] = accuracy(report);
  const json record{{"command", argv_line}, {"dataset_hash", content_hash(dataset / split)}, {"metrics", out}};
  io::write_text(fs::path(run_dir) / ("eval_" + to_string(fusion) + "_" + split + ".json"), record.dump(2) + "\n");
  std::cout << out.dump(2) << "\n";
  return kExitOk;
}

int cmd_predict(const std::string& run_dir, const std::string& clip_dir, double threshold) {
  const LoadedModels m = load_models(run_dir, false, false);
  const Clip clip = io::read_clip(clip_dir);
  const auto reg = prepare_clips({clip}, m.config.prep);
  const ClipScores s = score_clip(reg[0], m.config.prep, m.multi ? &*m.multi : nullptr, m.diff ? &*m.diff : nullptr);
  const FusedScore f = s.fused();
  json branches = json::object();
  if (s.multi) branches["multi"] = {{"live", s.multi->live}, {"spoof", s.multi->spoof}};
  if (s.diff) branches["diff"] = {{"live", s.diff->live}, {"spoof", s.diff->spoof}};
  const json out{{"clip_id", clip.clip_id},
                 {"branches", branches},
                 {"live_sum", f.live_sum},
                 {"spoof_sum", f.spoof_sum},
                 {"threshold", threshold},
                 {"decision", to_string(decide(f, threshold))}};
  std::cout << out.dump(2) << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Two-stream face anti-spoofing: synthetic data, training, evaluation, prediction"};
  app.require_subcommand(1);
  const std::string argv_line = command_line(argc, argv);

  CommonOptions gen_opts, train_opts;
  std::string gen_out;
  auto* gen = app.add_subcommand("generate", "Write a synthetic live/print/replay dataset");
  gen->add_option("-c,--config", gen_opts.config_path, "Config file (key = value lines)")->required();
  gen->add_option("--set", gen_opts.overrides, "Override a config key: key=value (repeatable)");
  gen->add_option("-o,--out", gen_out, "Dataset directory (overrides paths.dataset)");

  std::string branch = "both", run_dir, dataset, multi_fpm, diff_fpm, ppm;
  auto* train = app.add_subcommand("train", "Train one or both branches");
  train->add_option("-c,--config", train_opts.config_path, "Config file (key = value lines)")->required();
  train->add_option("--set", train_opts.overrides, "Override a config key: key=value (repeatable)");
  train->add_option("--branch", branch, "Branch to train")->check(CLI::IsMember({"multi", "diff", "both"}));
  train->add_option("--run-dir", run_dir, "Run directory (overrides paths.run_dir)");
  train->add_option("--dataset", dataset, "Dataset root with train/ and test/ (overrides paths.dataset)");
  train->add_option("--multi-fpm-direction", multi_fpm, "Multi-frame FPM direction")
      ->check(CLI::IsMember({"none", "coarse_to_fine", "fine_to_coarse"}));
  train->add_option("--diff-fpm-direction", diff_fpm, "Difference-branch FPM direction")
      ->check(CLI::IsMember({"none", "coarse_to_fine", "fine_to_coarse"}));
  train->add_option("--ppm", ppm, "Pyramid pooling in both branches")->check(CLI::IsMember({"on", "off"}));

  std::string eval_run, eval_dataset, split = "test", fusion = "sum";
  double threshold = 1.0;
  auto* ev = app.add_subcommand("evaluate", "Score a dataset split with trained checkpoints");
  ev->add_option("--run-dir", eval_run, "Run directory with checkpoints")->required();
  ev->add_option("--dataset", eval_dataset, "Dataset root (default: the one used for training)");
  ev->add_option("--split", split, "Split to evaluate")->check(CLI::IsMember({"train", "test"}));
  ev->add_option("--fusion", fusion, "Score fusion")->check(CLI::IsMember({"sum", "multi-only", "diff-only"}));
  ev->add_option("--threshold", threshold, "Decision threshold on the fused live score (range [0, 2])");

  std::string pred_run, clip_dir;
  double pred_threshold = 1.0;
  auto* pred = app.add_subcommand("predict", "Score one clip directory");
  pred->add_option("--run-dir", pred_run, "Run directory with checkpoints")->required();
  pred->add_option("--clip", clip_dir, "Clip directory (frames, keypoints.txt, label.txt)")->required();
  pred->add_option("--threshold", pred_threshold, "Decision threshold on the fused live score");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (gen->parsed()) return cmd_generate(gen_opts, gen_out);
    if (train->parsed())
      return cmd_train(train_opts, branch, run_dir, dataset, multi_fpm, diff_fpm, ppm, argv_line);
    if (ev->parsed()) return cmd_evaluate(eval_run, eval_dataset, split, fusion, threshold, argv_line);
    if (pred->parsed()) return cmd_predict(pred_run, clip_dir, pred_threshold);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  }
  return kExitConfig;
}
