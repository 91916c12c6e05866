#pragma once

// Pluggable prefix detectors: the structured GBDT detector and the
// keyword rule-filter baseline share one streaming interface.

#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "agentguard/features.hpp"
#include "agentguard/gbdt.hpp"
#include "agentguard/text.hpp"
#include "agentguard/trace.hpp"

namespace agentguard {

// Scores one session turn by turn. Implementations only see turns that
// were passed in, so every score is prefix-causal.
class DetectorSession {
 public:
  virtual ~DetectorSession() = default;
  virtual double score(const Turn& turn) = 0;
};

class Detector {
 public:
  virtual ~Detector() = default;
  virtual std::string name() const = 0;
  virtual std::unique_ptr<DetectorSession> start() const = 0;
};

inline std::vector<double> score_session(const Detector& detector, const Session& session) {
  auto run = detector.start();
  std::vector<double> risks;
  risks.reserve(session.turns.size());
  for (const Turn& t : session.turns) risks.push_back(run->score(t));
  return risks;
}

// Everything needed to score prefixes with a trained model.
struct StructuredScorer {
  std::shared_ptr<const GbdtModel> model;
  std::shared_ptr<const BenignProfile> profile;
  std::shared_ptr<const FeatureConfig> features;
};

class StructuredDetector final : public Detector {
 public:
  explicit StructuredDetector(StructuredScorer scorer, std::string name = "ours")
      : scorer_(std::move(scorer)), name_(std::move(name)) {}

  std::string name() const override { return name_; }

  std::unique_ptr<DetectorSession> start() const override { return std::make_unique<Run>(scorer_); }

  const StructuredScorer& scorer() const noexcept { return scorer_; }

 private:
  class Run final : public DetectorSession {
   public:
    explicit Run(const StructuredScorer& s) : scorer_(s), extractor_(*s.profile, *s.features) {}
    double score(const Turn& turn) override { return scorer_.model->predict(extractor_.update(turn)); }

   private:
    const StructuredScorer& scorer_;
    FeatureExtractor extractor_;
  };

  StructuredScorer scorer_;
  std::string name_;
};

inline constexpr std::size_t kRuleFilterThreshold = 3;

// Lexicon hits in the turn's prompt plus its external content.
inline std::size_t rule_filter_matches(const Turn& turn, const RuleLexicon& lexicon) {
  auto count = [&](const std::string& text) {
    std::size_t n = 0;
    for (const auto& tok : word_tokens(text)) {
      if (in_lexicon(tok, lexicon.override_terms) || in_lexicon(tok, lexicon.secret_terms) ||
          in_lexicon(tok, lexicon.action_terms)) {
        ++n;
      }
    }
    return n;
  };
  return count(turn.prompt) + (turn.external_content ? count(*turn.external_content) : 0);
}

// 1 when the latest turn of the prefix has at least three lexicon hits.
inline double rule_filter(std::span<const Turn> prefix, const RuleLexicon& lexicon = {}) {
  if (prefix.empty()) return 0.0;
  return rule_filter_matches(prefix.back(), lexicon) >= kRuleFilterThreshold ? 1.0 : 0.0;
}

class RuleFilterDetector final : public Detector {
 public:
  explicit RuleFilterDetector(RuleLexicon lexicon = {}) : lexicon_(std::move(lexicon)) {}

  std::string name() const override { return "rule_filter"; }

  std::unique_ptr<DetectorSession> start() const override { return std::make_unique<Run>(lexicon_); }

 private:
  class Run final : public DetectorSession {
   public:
    explicit Run(const RuleLexicon& lexicon) : lexicon_(lexicon) {}
    double score(const Turn& turn) override {
      return rule_filter(std::span<const Turn>(&turn, 1), lexicon_);
    }

   private:
    const RuleLexicon& lexicon_;
  };

  RuleLexicon lexicon_;
};

}  // namespace agentguard
