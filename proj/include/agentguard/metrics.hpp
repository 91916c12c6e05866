#pragma once

// Prefix-level detection metrics, session-level attack-success replay,
// latency measurement and percentile bootstrap intervals.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <span>
#include <utility>
#include <vector>

#include "agentguard/detector.hpp"
#include "agentguard/error.hpp"
#include "agentguard/policy.hpp"
#include "agentguard/rng.hpp"
#include "agentguard/trace.hpp"

namespace agentguard {

// Mann-Whitney estimate of P(score_pos > score_neg), ties counted half.
inline double auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw Error("shape-mismatch", "scores and labels differ in length");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum_pos = 0.0;
  double n_pos = 0.0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double mid_rank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (std::size_t k = i; k < j; ++k) {
      if (labels[order[k]] == 1) {
        rank_sum_pos += mid_rank;
        n_pos += 1.0;
      }
    }
    i = j;
  }
  const double n_neg = static_cast<double>(scores.size()) - n_pos;
  if (n_pos == 0.0 || n_neg == 0.0) throw Error("degenerate-auc", "both classes are required");
  return (rank_sum_pos - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg);
}

struct PrecisionRecall {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  bool precision_undefined = false;  // no predicted positives; precision reported as 0
};

// Predicted positive iff score >= threshold.
inline PrecisionRecall prf1(std::span<const double> scores, std::span<const int> labels, double threshold) {
  if (scores.size() != labels.size()) throw Error("shape-mismatch", "scores and labels differ in length");
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool predicted = scores[i] >= threshold;
    if (labels[i] == 1) {
      (predicted ? tp : fn) += 1;
    } else if (predicted) {
      ++fp;
    }
  }
  if (tp + fn == 0 || tp + fn == scores.size()) throw Error("degenerate-labels", "both classes are required");
  PrecisionRecall r;
  r.precision_undefined = tp + fp == 0;
  r.precision = r.precision_undefined ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fp);
  r.recall = static_cast<double>(tp) / static_cast<double>(tp + fn);
  r.f1 = r.precision + r.recall > 0 ? 2.0 * r.precision * r.recall / (r.precision + r.recall) : 0.0;
  return r;
}

// Best-F1 operating point over the observed scores.
inline std::pair<double, PrecisionRecall> best_f1(std::span<const double> scores, std::span<const int> labels) {
  std::vector<double> candidates(scores.begin(), scores.end());
  std::sort(candidates.begin(), candidates.end());
  candidates.erase(std::unique(candidates.begin(), candidates.end()), candidates.end());
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::size_t total_pos = 0;
  for (int y : labels) total_pos += static_cast<std::size_t>(y);
  // Sweep thresholds from high to low, accumulating tp/fp.
  double best_thr = candidates.empty() ? 1.0 : candidates.back();
  double best = -1.0;
  std::size_t tp = 0;
  std::size_t fp = 0;
  for (std::size_t i = 0; i < order.size();) {
    const double thr = scores[order[i]];
    while (i < order.size() && scores[order[i]] == thr) {
      (labels[order[i]] == 1 ? tp : fp) += 1;
      ++i;
    }
    const double p = static_cast<double>(tp) / static_cast<double>(tp + fp);
    const double r = total_pos ? static_cast<double>(tp) / static_cast<double>(total_pos) : 0.0;
    const double f = p + r > 0 ? 2 * p * r / (p + r) : 0.0;
    if (f > best) {
      best = f;
      best_thr = thr;
    }
  }
  return {best_thr, prf1(scores, labels, best_thr)};
}

// Per-prefix risks of each session, with session metadata.
struct ScoredSession {
  const Session* session = nullptr;
  SessionScores scores;
};

inline std::vector<ScoredSession> score_sessions(const Detector& detector, std::span<const Session> sessions) {
  std::vector<ScoredSession> out;
  out.reserve(sessions.size());
  for (const Session& s : sessions) {
    out.push_back({&s, {s.label == Label::adversarial, s.unsafe_turn, score_session(detector, s)}});
  }
  return out;
}

// Fraction of attack sessions blocked at or before their unsafe turn.
inline double asr_reduction(std::span<const ScoredSession> scored, const Thresholds& th) {
  std::size_t attacks = 0;
  std::size_t stopped = 0;
  for (const auto& s : scored) {
    if (!s.scores.adversarial) continue;
    if (!s.scores.unsafe_turn) throw Error("invalid-session", "attack session without unsafe_turn");
    ++attacks;
    stopped += detail::prevented(s.scores, th.tau2) ? 1 : 0;
  }
  return attacks ? static_cast<double>(stopped) / static_cast<double>(attacks) : 0.0;
}

inline double asr_reduction(const Detector& detector, const Thresholds& th, std::span<const Session> attacks) {
  const auto scored = score_sessions(detector, attacks);
  return asr_reduction(scored, th);
}

// Attack-success rate (1 - prevented fraction) per family.
inline std::map<Family, double> per_family_asr(std::span<const ScoredSession> scored, const Thresholds& th) {
  std::array<std::size_t, kFamilyCount> total{};
  std::array<std::size_t, kFamilyCount> succeeded{};
  for (const auto& s : scored) {
    if (!s.scores.adversarial || !s.session->family) continue;
    const auto f = static_cast<std::size_t>(*s.session->family);
    ++total[f];
    succeeded[f] += detail::prevented(s.scores, th.tau2) ? 0 : 1;
  }
  std::map<Family, double> out;
  for (Family f : kAllFamilies) {
    const auto i = static_cast<std::size_t>(f);
    if (total[i]) out[f] = static_cast<double>(succeeded[i]) / static_cast<double>(total[i]);
  }
  return out;
}

inline std::map<Family, double> per_family_asr(const Detector& detector, const Thresholds& th,
                                               std::span<const Session> attacks) {
  const auto scored = score_sessions(detector, attacks);
  return per_family_asr(scored, th);
}

inline double median(std::vector<double> values) {
  if (values.empty()) throw Error("empty-input", "median of nothing");
  const std::size_t mid = values.size() / 2;
  std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(mid), values.end());
  const double upper = values[mid];
  if (values.size() % 2 == 1) return upper;
  const double lower = *std::max_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(mid));
  return (lower + upper) / 2.0;
}

// Linear-interpolated percentile, q in [0,1].
inline double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw Error("empty-input", "percentile of nothing");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = static_cast<std::size_t>(std::ceil(pos));
  return values[lo] + (values[hi] - values[lo]) * (pos - static_cast<double>(lo));
}

struct LatencyStats {
  double p50_ms = 0.0;
  double p95_ms = 0.0;
  std::size_t prefixes = 0;
};

// Wall time of one streaming score call (feature update + inference) per
// prefix, single worker. A full untimed pass warms caches first.
inline LatencyStats measure_latency(const Detector& detector, std::span<const Session> sessions) {
  std::size_t prefixes = 0;
  for (const Session& s : sessions) prefixes += s.turns.size();
  if (prefixes < 100) throw Error("too-few-prefixes", "latency needs at least 100 prefixes");
  volatile double sink = 0.0;
  for (const Session& s : sessions) {
    auto run = detector.start();
    for (const Turn& t : s.turns) sink = sink + run->score(t);
  }
  std::vector<double> ms;
  ms.reserve(prefixes);
  for (const Session& s : sessions) {
    auto run = detector.start();
    for (const Turn& t : s.turns) {
      const auto t0 = std::chrono::steady_clock::now();
      sink = sink + run->score(t);
      const auto t1 = std::chrono::steady_clock::now();
      ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    }
  }
  return {median(ms), percentile(ms, 0.95), prefixes};
}

struct Interval {
  double lower = 0.0;
  double upper = 0.0;
};

inline constexpr std::size_t kDefaultBootstrapSamples = 500;

// 95% percentile bootstrap. `metric` evaluates a resample given as item
// indices into the caller's data; resamples on which it throws an Error
// (e.g. a single-class draw for AUC) are redrawn.
inline Interval bootstrap_ci(const std::function<double(std::span<const std::size_t>)>& metric,
                             std::size_t n_items, std::size_t n_samples = kDefaultBootstrapSamples,
                             std::uint64_t seed = 0) {
  if (n_samples < 100) throw Error("bad-config", "bootstrap needs at least 100 samples");
  if (n_items == 0) throw Error("empty-input", "bootstrap over nothing");
  SplitMix64 rng(seed);
  std::vector<std::size_t> idx(n_items);
  std::vector<double> values;
  values.reserve(n_samples);
  std::size_t attempts = 0;
  while (values.size() < n_samples) {
    if (++attempts > n_samples * 10) throw Error("degenerate-bootstrap", "too many invalid resamples");
    for (auto& i : idx) i = rng.below(n_items);
    try {
      values.push_back(metric(idx));
    } catch (const Error&) {
    }
  }
  return {percentile(values, 0.025), percentile(values, 0.975)};
}

}  // namespace agentguard
