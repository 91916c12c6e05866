#include <gtest/gtest.h>

#include "agentguard/pipeline.hpp"
#include "agentguard/policy.hpp"

using namespace agentguard;

namespace {

SessionScores benign(std::vector<double> r) { return {false, std::nullopt, std::move(r)}; }

SessionScores attack(std::vector<double> r, std::uint32_t unsafe) { return {true, unsafe, std::move(r)}; }

// Brute-force block rate over sessions: any prefix at or above tau.
double block_rate(const std::vector<SessionScores>& ss, double tau) {
  std::size_t n = 0;
  std::size_t hit = 0;
  for (const auto& s : ss) {
    if (s.adversarial) continue;
    ++n;
    hit += std::any_of(s.risks.begin(), s.risks.end(), [&](double r) { return r >= tau; });
  }
  return static_cast<double>(hit) / static_cast<double>(n);
}

}  // namespace

TEST(Decide, ThresholdBoundaries) {
  const Thresholds th{0.3, 0.7};
  EXPECT_EQ(decide(0.2, th).verdict, Verdict::allow);
  EXPECT_EQ(decide(0.3, th).verdict, Verdict::restrict);
  EXPECT_EQ(decide(0.69, th).verdict, Verdict::restrict);
  EXPECT_EQ(decide(0.7, th).verdict, Verdict::block);
  EXPECT_EQ(decide(1.0, th).verdict, Verdict::block);
  EXPECT_EQ(decide(0.0, Thresholds{0.0, 0.0}).verdict, Verdict::block);
}

TEST(Decide, RejectsBadInput) {
  try {
    decide(0.5, Thresholds{0.8, 0.7});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), "bad-thresholds");
  }
  EXPECT_THROW(decide(0.5, Thresholds{-0.1, 0.7}), Error);
  EXPECT_THROW(decide(0.5, Thresholds{0.1, 1.2}), Error);
  EXPECT_THROW(decide(1.5, Thresholds{0.3, 0.7}), Error);
  EXPECT_THROW(nlohmann::json::parse(R"({"tau1":0.9,"tau2":0.1})").get<Thresholds>(), Error);
}

TEST(Calibrate, MatchesBruteForceSearch) {
  SplitMix64 rng(3);
  std::vector<SessionScores> ss;
  for (int i = 0; i < 300; ++i) {
    std::vector<double> r(2 + rng.below(4));
    for (double& v : r) v = rng.uniform() * 0.6;
    ss.push_back(benign(r));
  }
  for (int i = 0; i < 100; ++i) {
    std::vector<double> r = {rng.uniform() * 0.5, 0.4 + rng.uniform() * 0.6};
    ss.push_back(attack(r, 2));
  }
  const auto cal = calibrate(ss);

  std::vector<double> observed;
  for (const auto& s : ss) observed.insert(observed.end(), s.risks.begin(), s.risks.end());
  std::sort(observed.begin(), observed.end());
  double tau2 = 1.0;
  double tau1 = 1.0;
  for (auto it = observed.rbegin(); it != observed.rend(); ++it) {
    if (block_rate(ss, *it) <= 0.01) tau2 = *it;
    if (block_rate(ss, *it) <= 0.05) tau1 = *it;
  }
  EXPECT_FALSE(cal.warning);
  EXPECT_EQ(cal.thresholds.tau2, tau2);
  EXPECT_EQ(cal.thresholds.tau1, std::min(tau1, tau2));
  EXPECT_LE(cal.benign_block_rate, 0.01);
  EXPECT_DOUBLE_EQ(cal.benign_block_rate, block_rate(ss, tau2));
}

TEST(Calibrate, SeparatedScoresStopEveryAttack) {
  std::vector<SessionScores> ss;
  for (int i = 0; i < 100; ++i) ss.push_back(benign({0.001 * i, 0.002 * i}));
  for (int i = 0; i < 50; ++i) ss.push_back(attack({0.05, 0.9 + 0.001 * i}, 2));
  const auto cal = calibrate(ss);
  EXPECT_EQ(cal.asr_reduction, 1.0);
  EXPECT_LE(cal.thresholds.tau1, cal.thresholds.tau2);
  EXPECT_LE(cal.thresholds.tau2, 0.9);
  EXPECT_GT(cal.thresholds.tau2, 0.002 * 98);
}

TEST(Calibrate, BlockAfterUnsafeTurnDoesNotCount) {
  std::vector<SessionScores> ss;
  for (int i = 0; i < 200; ++i) ss.push_back(benign({0.1}));
  ss.push_back(attack({0.1, 0.1, 0.95}, 2));
  EXPECT_EQ(calibrate(ss).asr_reduction, 0.0);
}

TEST(Calibrate, IdenticalScoresFallBackToOne) {
  std::vector<SessionScores> ss;
  for (int i = 0; i < 50; ++i) ss.push_back(benign({0.5, 0.5}));
  for (int i = 0; i < 50; ++i) ss.push_back(attack({0.5, 0.5}, 2));
  const auto cal = calibrate(ss);
  EXPECT_TRUE(cal.warning);
  EXPECT_EQ(cal.thresholds.tau2, 1.0);
  EXPECT_EQ(cal.thresholds.tau1, 1.0);
  EXPECT_EQ(cal.benign_block_rate, 0.0);
}

TEST(Calibrate, NeedsBothClasses) {
  for (const auto& ss : {std::vector<SessionScores>{benign({0.1})}, std::vector<SessionScores>{attack({0.1}, 1)}}) {
    try {
      calibrate(ss);
      FAIL();
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), "degenerate-validation");
    }
  }
}

TEST(Calibrate, HeldOutBenignBlockRateWithinTwiceCap) {
  const PipelineConfig cfg;
  const Corpus corpus = gen_corpus(cfg.gen);
  const TrainedDetector td = train_detector(corpus, cfg);
  const StructuredDetector det(td.scorer());
  std::size_t benign_sessions = 0;
  std::size_t blocked = 0;
  for (const Session& s : corpus.test) {
    if (s.label != Label::benign) continue;
    ++benign_sessions;
    const auto r = score_session(det, s);
    blocked += std::any_of(r.begin(), r.end(), [&](double v) { return v >= td.thresholds().tau2; });
  }
  const double rate = static_cast<double>(blocked) / static_cast<double>(benign_sessions);
  EXPECT_LE(rate, 2 * cfg.calibration.max_benign_block_rate) << rate;
  EXPECT_LE(td.calibration.benign_block_rate, cfg.calibration.max_benign_block_rate);
}
