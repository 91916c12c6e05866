#pragma once

// Two-threshold allow / restrict / block rule and its calibration on
// validation sessions.

#include <algorithm>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "agentguard/error.hpp"

namespace agentguard {

struct Thresholds {
  double tau1 = 0.5;
  double tau2 = 0.5;

  bool valid() const noexcept { return 0.0 <= tau1 && tau1 <= tau2 && tau2 <= 1.0; }
};

enum class Verdict : std::uint8_t { allow, restrict, block };

constexpr std::string_view verdict_name(Verdict v) noexcept {
  switch (v) {
    case Verdict::allow: return "allow";
    case Verdict::restrict: return "restrict";
    case Verdict::block: return "block";
  }
  return "?";
}

struct Decision {
  Verdict verdict = Verdict::allow;
  double risk = 0.0;
  Thresholds thresholds;
};

// allow iff r < tau1; restrict iff tau1 <= r < tau2; block iff r >= tau2.
inline Decision decide(double risk, const Thresholds& th) {
  if (!th.valid()) {
    throw Error("bad-thresholds", "need 0 <= tau1 <= tau2 <= 1");
  }
  if (!(risk >= 0.0 && risk <= 1.0)) throw Error("bad-risk", "risk must lie in [0,1]");
  Verdict v = Verdict::allow;
  if (risk >= th.tau2) {
    v = Verdict::block;
  } else if (risk >= th.tau1) {
    v = Verdict::restrict;
  }
  return {v, risk, th};
}

struct CalibrationConstraints {
  double max_benign_block_rate = 0.01;
  double max_benign_restrict_rate = 0.05;
};

// Risk of every prefix of one validation session, in turn order.
struct SessionScores {
  bool adversarial = false;
  std::optional<std::uint32_t> unsafe_turn;
  std::vector<double> risks;
};

struct Calibration {
  Thresholds thresholds;
  CalibrationConstraints constraints;
  // Set when no observed score meets the block cap and tau2 fell back to 1.
  bool warning = false;
  double benign_block_rate = 0.0;
  double benign_restrict_rate = 0.0;  // sessions with any prefix at or above tau1
  double asr_reduction = 0.0;         // on the calibration sessions
};

namespace detail {

inline double session_max(const SessionScores& s) {
  return s.risks.empty() ? 0.0 : *std::max_element(s.risks.begin(), s.risks.end());
}

// Prevented iff some prefix at or before the unsafe turn reaches tau2.
inline bool prevented(const SessionScores& s, double tau2) {
  const std::size_t last = s.unsafe_turn ? std::min<std::size_t>(*s.unsafe_turn, s.risks.size()) : s.risks.size();
  for (std::size_t i = 0; i < last; ++i) {
    if (s.risks[i] >= tau2) return true;
  }
  return false;
}

// Smallest candidate whose benign session hit rate stays within `cap`.
// Returns nullopt when no candidate qualifies.
inline std::optional<double> smallest_feasible(std::span<const double> candidates,
                                               std::span<const double> benign_max, double cap) {
  // benign_max sorted ascending; hits(tau) = #{m >= tau}.
  for (double tau : candidates) {
    const auto hits = static_cast<double>(benign_max.end() -
                                          std::lower_bound(benign_max.begin(), benign_max.end(), tau));
    if (hits <= cap * static_cast<double>(benign_max.size())) return tau;
  }
  return std::nullopt;
}

}  // namespace detail

// Searches the observed validation scores. tau2 is the smallest score whose
// benign session block rate (any blocked prefix) is within the cap, which
// maximizes validation ASR reduction; tau1 likewise under the restrict cap,
// clamped to tau2.
inline Calibration calibrate(std::span<const SessionScores> sessions, const CalibrationConstraints& constraints = {}) {
  std::vector<double> benign_max;
  std::vector<double> observed;
  std::size_t attacks = 0;
  for (const auto& s : sessions) {
    observed.insert(observed.end(), s.risks.begin(), s.risks.end());
    if (s.adversarial) {
      ++attacks;
    } else {
      benign_max.push_back(detail::session_max(s));
    }
  }
  if (attacks == 0 || benign_max.empty()) {
    throw Error("degenerate-validation", "calibration needs benign and adversarial sessions");
  }
  std::sort(benign_max.begin(), benign_max.end());
  std::sort(observed.begin(), observed.end());
  observed.erase(std::unique(observed.begin(), observed.end()), observed.end());

  Calibration cal;
  cal.constraints = constraints;
  const auto tau2 = detail::smallest_feasible(observed, benign_max, constraints.max_benign_block_rate);
  cal.warning = !tau2.has_value();
  cal.thresholds.tau2 = tau2.value_or(1.0);
  const auto tau1 = detail::smallest_feasible(observed, benign_max, constraints.max_benign_restrict_rate);
  cal.thresholds.tau1 = std::min(tau1.value_or(1.0), cal.thresholds.tau2);

  auto rate_at = [&](double tau) {
    const auto hits = benign_max.end() - std::lower_bound(benign_max.begin(), benign_max.end(), tau);
    return static_cast<double>(hits) / static_cast<double>(benign_max.size());
  };
  cal.benign_block_rate = rate_at(cal.thresholds.tau2);
  cal.benign_restrict_rate = rate_at(cal.thresholds.tau1);
  std::size_t stopped = 0;
  for (const auto& s : sessions) {
    if (s.adversarial && detail::prevented(s, cal.thresholds.tau2)) ++stopped;
  }
  cal.asr_reduction = static_cast<double>(stopped) / static_cast<double>(attacks);
  return cal;
}

inline void to_json(nlohmann::json& j, const Thresholds& t) { j = {{"tau1", t.tau1}, {"tau2", t.tau2}}; }

inline void from_json(const nlohmann::json& j, Thresholds& t) {
  t.tau1 = j.at("tau1").get<double>();
  t.tau2 = j.at("tau2").get<double>();
  if (!t.valid()) throw Error("bad-thresholds", "need 0 <= tau1 <= tau2 <= 1");
}

inline void to_json(nlohmann::json& j, const CalibrationConstraints& c) {
  j = {{"max_benign_block_rate", c.max_benign_block_rate}, {"max_benign_restrict_rate", c.max_benign_restrict_rate}};
}

inline void from_json(const nlohmann::json& j, CalibrationConstraints& c) {
  c.max_benign_block_rate = j.value("max_benign_block_rate", c.max_benign_block_rate);
  c.max_benign_restrict_rate = j.value("max_benign_restrict_rate", c.max_benign_restrict_rate);
}

}  // namespace agentguard
