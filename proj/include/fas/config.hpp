#pragma once

// Flat `section.key = value` configuration covering every tunable of a run.
// Lines starting with '#' are comments. Unknown keys and unparsable values
// are InvalidConfig errors naming the key.

#include <charconv>
#include <functional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "fas/diff_head.hpp"
#include "fas/io.hpp"
#include "fas/media_prep.hpp"
#include "fas/synthetic_data.hpp"
#include "fas/temporal_head.hpp"

namespace fas {

struct HyperParams {
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  double lr_decay = 0.1;
  int lr_step = 50;
  int epochs = 120;
  int batch_multi = 8;
  int batch_diff = 16;
  std::uint64_t seed = 0;
  bool augment = true;
  bool flip = true;
  double min_crop_scale = 0.8;
  int temporal_jitter = 1;
  double stop_loss = 0.0;  // > 0: stop once train loss < stop_loss with train accuracy 1
  int stop_patience = 1;   // consecutive epochs the stop condition must hold

  void validate() const {
    require(lr >= 0, ErrorCode::InvalidConfig, "train.lr must be >= 0");
    require(momentum >= 0 && momentum < 1, ErrorCode::InvalidConfig, "train.momentum must be in [0, 1)");
    require(weight_decay >= 0, ErrorCode::InvalidConfig, "train.weight_decay must be >= 0");
    require(lr_decay > 0, ErrorCode::InvalidConfig, "train.lr_decay must be > 0");
    require(lr_step >= 1, ErrorCode::InvalidConfig, "train.lr_step must be >= 1");
    require(epochs >= 1, ErrorCode::InvalidConfig, "train.epochs must be >= 1");
    require(batch_multi >= 1 && batch_diff >= 1, ErrorCode::InvalidConfig, "batch sizes must be >= 1");
    require(min_crop_scale > 0 && min_crop_scale <= 1, ErrorCode::InvalidConfig, "train.min_crop_scale must be in (0, 1]");
    require(temporal_jitter >= 0, ErrorCode::InvalidConfig, "train.temporal_jitter must be >= 0");
    require(stop_loss >= 0 && stop_patience >= 1, ErrorCode::InvalidConfig, "bad early-stop settings");
  }

  double lr_at(int epoch) const { return lr * std::pow(lr_decay, epoch / lr_step); }
};

struct RunConfig {
  SynthConfig synth;
  PreprocessConfig prep;
  MultiFrameConfig multi;
  DiffBranchConfig diff;
  HyperParams train;
  std::string dataset = "data/synthetic";
  std::string run_dir = "runs/default";

  /// Propagates shared settings (k) into the branch configs and validates.
  void finalize() {
    synth.validate();
    prep.validate();
    train.validate();
    diff.k = prep.k;
    diff.backbone.in_channels = 3 * prep.k;
    multi.backbone.in_channels = 3;
    multi.backbone.validate();
    diff.backbone.validate();
    multi.ppm.validate();
    diff.ppm.validate();
    require(multi.lstm_hidden >= 1, ErrorCode::InvalidConfig, "multi.lstm_hidden must be >= 1");
    require(multi.dropout >= 0 && multi.dropout < 1, ErrorCode::InvalidConfig, "multi.dropout must be in [0, 1)");
    require(multi.fpm.channels >= 1 && diff.fpm.channels >= 1, ErrorCode::InvalidConfig, "fpm channels must be >= 1");
    require(prep.out_size % 32 == 0, ErrorCode::InvalidConfig, "preprocess.out_size must be a multiple of 32");
    require(synth.frames_per_clip >= prep.k + 2, ErrorCode::InvalidConfig, "synth.frames_per_clip must be >= k + 2");
  }
};

namespace config_detail {

inline std::string fmt(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r\n") - b + 1);
}

[[noreturn]] inline void bad(const std::string& key, const std::string& value, const char* want) {
  throw Error(ErrorCode::InvalidConfig, "config key '" + key + "': cannot parse '" + value + "' as " + want);
}

template <typename I>
I parse_int(const std::string& key, const std::string& v) {
  I out{};
  auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size()) bad(key, v, "an integer");
  return out;
}

inline double parse_double(const std::string& key, const std::string& v) {
  double out = 0;
  auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size()) bad(key, v, "a number");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "on" || v == "true" || v == "1") return true;
  if (v == "off" || v == "false" || v == "0") return false;
  bad(key, v, "on/off");
}

inline std::vector<int> parse_int_list(const std::string& key, const std::string& v) {
  std::vector<int> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_int<int>(key, trim(item)));
  if (out.empty()) bad(key, v, "a comma-separated integer list");
  return out;
}

template <std::size_t N>
std::array<int, N> parse_int_array(const std::string& key, const std::string& v) {
  const auto list = parse_int_list(key, v);
  if (list.size() != N) bad(key, v, "a list of 5 integers");
  std::array<int, N> out{};
  std::copy(list.begin(), list.end(), out.begin());
  return out;
}

template <typename C>
std::string join(const C& c) {
  std::string s;
  for (auto v : c) s += (s.empty() ? "" : ",") + std::to_string(v);
  return s;
}

struct Entry {
  std::string key;
  std::function<std::string()> get;
  std::function<void(const std::string&)> set;
};

template <typename I>
Entry int_entry(std::string key, I& ref) {
  return {key, [&ref] { return std::to_string(ref); }, [&ref, key](const std::string& v) { ref = parse_int<I>(key, v); }};
}

inline Entry double_entry(std::string key, double& ref) {
  return {key, [&ref] { return fmt(ref); }, [&ref, key](const std::string& v) { ref = parse_double(key, v); }};
}

inline Entry bool_entry(std::string key, bool& ref) {
  return {key, [&ref] { return std::string(ref ? "on" : "off"); },
          [&ref, key](const std::string& v) { ref = parse_bool(key, v); }};
}

inline Entry string_entry(std::string key, std::string& ref) {
  return {key, [&ref] { return ref; }, [&ref](const std::string& v) { ref = v; }};
}

inline Entry fpm_entry(std::string key, FpmDirection& ref) {
  return {key, [&ref] { return to_string(ref); }, [&ref, key](const std::string& v) {
            try {
              ref = parse_fpm_direction(v);
            } catch (const Error&) {
              bad(key, v, "none/coarse_to_fine/fine_to_coarse");
            }
          }};
}

inline void backbone_entries(std::vector<Entry>& e, const std::string& p, BackboneConfig& b) {
  e.push_back(int_entry(p + ".seed", b.seed));
  e.push_back({p + ".stage_channels", [&b] { return join(b.stage_channels); },
               [&b, k = p + ".stage_channels"](const std::string& v) { b.stage_channels = parse_int_array<5>(k, v); }});
  e.push_back({p + ".blocks_per_stage", [&b] { return join(b.blocks_per_stage); },
               [&b, k = p + ".blocks_per_stage"](const std::string& v) { b.blocks_per_stage = parse_int_array<5>(k, v); }});
  e.push_back({p + ".kernel_sizes", [&b] { return join(b.kernel_sizes); },
               [&b, k = p + ".kernel_sizes"](const std::string& v) { b.kernel_sizes = parse_int_array<5>(k, v); }});
  e.push_back(int_entry(p + ".expansion", b.expansion));
  e.push_back(bool_entry(p + ".squeeze_excite", b.use_squeeze_excite));
}

inline void pyramid_entries(std::vector<Entry>& e, const std::string& p, FpmConfig& f, bool& use_ppm, PpmConfig& ppm) {
  e.push_back(fpm_entry(p + ".fpm_direction", f.direction));
  e.push_back(int_entry(p + ".fpm_channels", f.channels));
  e.push_back(bool_entry(p + ".ppm", use_ppm));
  e.push_back({p + ".ppm_bins", [&ppm] { return join(ppm.bins); },
               [&ppm, k = p + ".ppm_bins"](const std::string& v) { ppm.bins = parse_int_list(k, v); }});
}

inline std::vector<Entry> entries(RunConfig& c) {
  std::vector<Entry> e;
  e.push_back(string_entry("paths.dataset", c.dataset));
  e.push_back(string_entry("paths.run_dir", c.run_dir));
  auto& s = c.synth;
  e.push_back(int_entry("synth.clips_per_class", s.clips_per_class));
  e.push_back(int_entry("synth.frames_per_clip", s.frames_per_clip));
  e.push_back(int_entry("synth.frame_size", s.frame_size));
  e.push_back(int_entry("synth.seed", s.seed));
  e.push_back(double_entry("synth.noise_std", s.noise_std));
  e.push_back(double_entry("synth.split_fraction", s.split_fraction));
  e.push_back(double_entry("synth.live_local_motion", s.live_local_motion));
  e.push_back(double_entry("synth.print_jitter_px", s.print_jitter_px));
  e.push_back(double_entry("synth.print_jitter_rad", s.print_jitter_rad));
  e.push_back(double_entry("synth.replay_wobble", s.replay_wobble));
  e.push_back(double_entry("synth.replay_local_motion", s.replay_local_motion));
  e.push_back(double_entry("synth.replay_band_depth", s.replay_band_depth));
  e.push_back(double_entry("synth.print_grid_depth", s.print_grid_depth));
  e.push_back(int_entry("preprocess.k", c.prep.k));
  e.push_back(int_entry("preprocess.out_size", c.prep.out_size));
  e.push_back(double_entry("preprocess.crop_margin", c.prep.crop_margin));
  e.push_back({"preprocess.anchors", [&c] { return join(c.prep.anchor_indices); },
               [&c](const std::string& v) { c.prep.anchor_indices = parse_int_list("preprocess.anchors", v); }});
  backbone_entries(e, "multi", c.multi.backbone);
  pyramid_entries(e, "multi", c.multi.fpm, c.multi.use_ppm, c.multi.ppm);
  e.push_back(int_entry("multi.lstm_hidden", c.multi.lstm_hidden));
  e.push_back(double_entry("multi.dropout", c.multi.dropout));
  backbone_entries(e, "diff", c.diff.backbone);
  pyramid_entries(e, "diff", c.diff.fpm, c.diff.use_ppm, c.diff.ppm);
  e.push_back(bool_entry("diff.embed_norm", c.diff.embed_norm));
  auto& t = c.train;
  e.push_back(double_entry("train.lr", t.lr));
  e.push_back(double_entry("train.momentum", t.momentum));
  e.push_back(double_entry("train.weight_decay", t.weight_decay));
  e.push_back(double_entry("train.lr_decay", t.lr_decay));
  e.push_back(int_entry("train.lr_step", t.lr_step));
  e.push_back(int_entry("train.epochs", t.epochs));
  e.push_back(int_entry("train.batch_multi", t.batch_multi));
  e.push_back(int_entry("train.batch_diff", t.batch_diff));
  e.push_back(int_entry("train.seed", t.seed));
  e.push_back(bool_entry("train.augment", t.augment));
  e.push_back(bool_entry("train.flip", t.flip));
  e.push_back(double_entry("train.min_crop_scale", t.min_crop_scale));
  e.push_back(int_entry("train.temporal_jitter", t.temporal_jitter));
  e.push_back(double_entry("train.stop_loss", t.stop_loss));
  e.push_back(int_entry("train.stop_patience", t.stop_patience));
  return e;
}

}  // namespace config_detail

using ConfigPairs = std::vector<std::pair<std::string, std::string>>;

inline void set_config_value(RunConfig& c, const std::string& key, const std::string& value) {
  for (auto& e : config_detail::entries(c))
    if (e.key == key) {
      e.set(config_detail::trim(value));
      return;
    }
  throw Error(ErrorCode::InvalidConfig, "unknown config key '" + key + "'");
}

/// Parses `key = value` lines. Keys are not checked here.
inline ConfigPairs parse_config_text(const std::string& text, const std::string& origin = "config") {
  ConfigPairs out;
  std::istringstream in(text);
  std::string line;
  for (int lineno = 1; std::getline(in, line); ++lineno) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = config_detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw Error(ErrorCode::InvalidConfig,
                  origin + ":" + std::to_string(lineno) + ": expected 'key = value', got '" + line + "'");
    const std::string key = config_detail::trim(line.substr(0, eq));
    if (key.empty()) throw Error(ErrorCode::InvalidConfig, origin + ":" + std::to_string(lineno) + ": empty key");
    out.emplace_back(key, config_detail::trim(line.substr(eq + 1)));
  }
  return out;
}

inline void apply_config(RunConfig& c, const ConfigPairs& pairs) {
  for (const auto& [k, v] : pairs) set_config_value(c, k, v);
}

inline RunConfig load_config(const std::filesystem::path& path) {
  require(std::filesystem::is_regular_file(path), ErrorCode::InvalidConfig, "config file " + path.string() + " not found");
  RunConfig c;
  apply_config(c, parse_config_text(io::read_text(path), path.string()));
  return c;
}

/// Every key with its current value, in canonical order.
inline ConfigPairs config_pairs(const RunConfig& c) {
  ConfigPairs out;
  for (auto& e : config_detail::entries(const_cast<RunConfig&>(c))) out.emplace_back(e.key, e.get());
  return out;
}

inline std::string format_config(const RunConfig& c) {
  std::string s;
  for (const auto& [k, v] : config_pairs(c)) s += k + " = " + v + "\n";
  return s;
}

inline nlohmann::json config_json(const RunConfig& c) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [k, v] : config_pairs(c)) j[k] = v;
  return j;
}

inline RunConfig config_from_json(const nlohmann::json& j) {
  RunConfig c;
  for (const auto& [k, v] : j.items()) set_config_value(c, k, v.get<std::string>());
  c.finalize();
  return c;
}

}  // namespace fas
