#pragma once

// Score fusion and presentation-attack-detection metrics.
//
// Positive class is bona fide (live). A sample is accepted as live when its
// fused live score is strictly above the threshold; ties are rejected.

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fas/error.hpp"
#include "fas/tensor.hpp"

namespace fas {

/// Softmax output of one branch.
struct ScorePair {
  double live = 0.5;
  double spoof = 0.5;
};

/// Softmax of a [1, 2] logit row ordered (live, spoof).
template <typename T>
ScorePair scores_from_logits(const Tensor<T>& logits) {
  const double a = static_cast<double>(logits[0]);
  const double b = static_cast<double>(logits[1]);
  const double m = std::max(a, b);
  const double ea = std::exp(a - m), eb = std::exp(b - m);
  return {ea / (ea + eb), eb / (ea + eb)};
}

struct FusedScore {
  double live_sum = 1.0;
  double spoof_sum = 1.0;
  std::vector<ScorePair> branches;
};

inline FusedScore fuse(const ScorePair& a, const ScorePair& b) {
  return {a.live + b.live, a.spoof + b.spoof, {a, b}};
}

/// Single-branch runs are put on the same [0, 2] scale by doubling, so the
/// default threshold of 1.0 means "live score above one half".
inline FusedScore fuse_single(const ScorePair& a) { return {2.0 * a.live, 2.0 * a.spoof, {a}}; }

enum class Decision { Live, Spoof };

inline std::string to_string(Decision d) { return d == Decision::Live ? "live" : "spoof"; }

inline Decision decide(const FusedScore& f, double threshold = 1.0) {
  return f.live_sum > threshold ? Decision::Live : Decision::Spoof;
}

/// One evaluated presentation. `attack_type` is "live" for bona fide.
struct ScoredSample {
  FusedScore fused;
  bool bona_fide = false;
  std::string attack_type;
};

struct MetricsReport {
  double apcer = 0, bpcer = 0, acer = 0;
  double far = 0, frr = 0, hter = 0;
  double apcer_worst = 0;
  std::map<std::string, double> apcer_by_type;
  double threshold = 1.0;
  long tp = 0, tn = 0, fp = 0, fn = 0;
  std::string branch = "sum";

  long total() const { return tp + tn + fp + fn; }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["apcer"] = apcer;
    j["bpcer"] = bpcer;
    j["acer"] = acer;
    j["far"] = far;
    j["frr"] = frr;
    j["hter"] = hter;
    j["apcer_worst"] = apcer_worst;
    j["threshold"] = threshold;
    j["counts"] = {{"tp", tp}, {"tn", tn}, {"fp", fp}, {"fn", fn}};
    j["apcer_by_type"] = apcer_by_type;
    j["branch"] = branch;
    return j;
  }

  static MetricsReport from_json(const nlohmann::json& j) {
    MetricsReport r;
    r.apcer = j.at("apcer");
    r.bpcer = j.at("bpcer");
    r.acer = j.at("acer");
    r.far = j.at("far");
    r.frr = j.at("frr");
    r.hter = j.at("hter");
    r.apcer_worst = j.value("apcer_worst", r.apcer);
    r.threshold = j.at("threshold");
    const auto& c = j.at("counts");
    r.tp = c.at("tp");
    r.tn = c.at("tn");
    r.fp = c.at("fp");
    r.fn = c.at("fn");
    r.apcer_by_type = j.at("apcer_by_type").get<std::map<std::string, double>>();
    r.branch = j.value("branch", std::string("sum"));
    return r;
  }
};

inline MetricsReport compute_metrics(const std::vector<ScoredSample>& samples, double threshold = 1.0) {
  require(!samples.empty(), ErrorCode::MissingClass, "no samples to score");
  MetricsReport r;
  r.threshold = threshold;
  std::map<std::string, std::pair<long, long>> per_type;  // (accepted, total)
  for (const auto& s : samples) {
    const bool accepted = decide(s.fused, threshold) == Decision::Live;
    if (s.bona_fide) {
      accepted ? ++r.tp : ++r.fn;
    } else {
      accepted ? ++r.fp : ++r.tn;
      auto& [acc, tot] = per_type[s.attack_type];
      acc += accepted;
      ++tot;
    }
  }
  const long live = r.tp + r.fn;
  const long attacks = r.fp + r.tn;
  require(live > 0, ErrorCode::MissingClass, "no bona fide samples");
  require(attacks > 0, ErrorCode::MissingClass, "no attack samples");
  r.bpcer = static_cast<double>(r.fn) / static_cast<double>(live);
  r.apcer = static_cast<double>(r.fp) / static_cast<double>(attacks);
  r.frr = r.bpcer;
  r.far = r.apcer;
  r.acer = (r.apcer + r.bpcer) / 2.0;
  r.hter = (r.far + r.frr) / 2.0;
  for (const auto& [type, counts] : per_type) {
    const double v = static_cast<double>(counts.first) / static_cast<double>(counts.second);
    r.apcer_by_type[type] = v;
    r.apcer_worst = std::max(r.apcer_worst, v);
  }
  return r;
}

struct RocPoint {
  double threshold = 0;
  double far = 0;
  double frr = 0;
};

struct ThresholdSweep {
  double eer_threshold = 1.0;
  std::vector<RocPoint> roc;
};

/// Scans thresholds that separate the observed live scores: one below all
/// of them, the midpoint of every consecutive distinct pair, and the
/// maximum. Returns the candidate minimising |far - frr| (smallest on ties).
inline ThresholdSweep sweep_threshold(const std::vector<ScoredSample>& samples) {
  long live = 0, attacks = 0;
  std::vector<double> values;
  for (const auto& s : samples) {
    (s.bona_fide ? live : attacks)++;
    values.push_back(s.fused.live_sum);
  }
  require(live > 0 && attacks > 0, ErrorCode::MissingClass, "threshold sweep needs both classes");
  std::sort(values.begin(), values.end());
  values.erase(std::unique(values.begin(), values.end()), values.end());
  std::vector<double> candidates{values.front() - 1.0};
  for (std::size_t i = 0; i + 1 < values.size(); ++i) candidates.push_back(0.5 * (values[i] + values[i + 1]));
  candidates.push_back(values.back());

  ThresholdSweep out;
  double best = 2.0;
  for (double t : candidates) {
    long false_accept = 0, false_reject = 0;
    for (const auto& s : samples) {
      const bool accepted = s.fused.live_sum > t;
      if (s.bona_fide && !accepted) ++false_reject;
      if (!s.bona_fide && accepted) ++false_accept;
    }
    RocPoint p{t, static_cast<double>(false_accept) / attacks, static_cast<double>(false_reject) / live};
    out.roc.push_back(p);
    const double gap = std::abs(p.far - p.frr);
    if (gap < best) {
      best = gap;
      out.eer_threshold = t;
    }
  }
  return out;
}

}  // namespace fas
