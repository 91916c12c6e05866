#include <gtest/gtest.h>

#include <cmath>

#include "agentguard/gbdt.hpp"
#include "agentguard/metrics.hpp"
#include "agentguard/rng.hpp"
#include "agentguard/tracegen.hpp"

using namespace agentguard;

namespace {

struct Dataset {
  Matrix x;
  std::vector<int> y;
};

// Small real feature matrix from a generated corpus.
const Dataset& corpus_rows() {
  static const Dataset d = [] {
    GenConfig cfg;
    cfg.n_total = 600;
    const Corpus c = gen_corpus(cfg);
    const auto rows = extract_rows(c.train, fit_profile(c.train));
    Dataset out;
    std::vector<FeatureVector> z;
    for (const auto& r : rows) {
      z.push_back(r.z);
      out.y.push_back(r.label);
    }
    const auto cols = all_feature_columns();
    out.x = to_matrix(z, cols);
    return out;
  }();
  return d;
}

Matrix column(const std::vector<double>& v) {
  Matrix m(v.size(), 1);
  for (std::size_t i = 0; i < v.size(); ++i) m(i, 0) = v[i];
  return m;
}

const std::vector<std::string> kOneName = {"prompt_char_len"};
const std::vector<std::string> kTwoNames = {"prompt_char_len", "prompt_token_count"};

}  // namespace

TEST(Loss, DerivativesMatchFiniteDifferences) {
  const double h = 1e-5;
  for (double y : {0.0, 1.0}) {
    for (double f : {-6.0, -1.5, -0.2, 0.0, 0.4, 2.0, 7.0}) {
      const double fd_grad = (logistic_loss(y, f + h) - logistic_loss(y, f - h)) / (2 * h);
      EXPECT_NEAR(logistic_gradient(y, f), fd_grad, 1e-6) << "y=" << y << " f=" << f;
      const double fd_hess = (logistic_gradient(y, f + h) - logistic_gradient(y, f - h)) / (2 * h);
      EXPECT_NEAR(logistic_hessian(f), fd_hess, 1e-6) << "f=" << f;
    }
  }
}

TEST(Loss, StableAtExtremes) {
  EXPECT_TRUE(std::isfinite(logistic_loss(1.0, -800.0)));
  EXPECT_NEAR(logistic_loss(1.0, -800.0), 800.0, 1e-9);
  EXPECT_NEAR(logistic_loss(0.0, 800.0), 800.0, 1e-9);
  EXPECT_EQ(sigmoid(-1000.0), 0.0);
  EXPECT_EQ(sigmoid(1000.0), 1.0);
}

TEST(Train, LossNeverIncreases) {
  const auto& d = corpus_rows();
  std::vector<double> history;
  train(d.x, d.y, TrainConfig{}, GbdtModel::canonical_names(), &history);
  ASSERT_EQ(history.size(), 181u);
  for (std::size_t i = 1; i < history.size(); ++i) {
    EXPECT_LE(history[i], history[i - 1] * (1 + 1e-12)) << "round " << i;
  }
  EXPECT_LT(history.back(), history.front() * 0.5);
}

TEST(Split, HistogramMatchesExhaustiveSearch) {
  SplitMix64 rng(17);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 5 + rng.below(60);
    const std::size_t cols = 1 + rng.below(4);
    Matrix x(n, cols);
    std::vector<double> g(n);
    std::vector<double> h(n);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < cols; ++j) x(i, j) = static_cast<double>(rng.below(12)) / 4.0;
      g[i] = rng.uniform() * 2 - 1;
      h[i] = 0.05 + rng.uniform() * 0.2;
    }
    TrainConfig cfg;
    cfg.min_child_weight = trial % 2 ? 0.5 : 0.0;
    cfg.lambda_l2 = trial % 3 ? 1.0 : 0.1;

    // Oracle: every threshold between consecutive distinct values.
    double best_gain = 1e-10;
    std::optional<std::pair<std::size_t, double>> best;
    double gt = 0;
    double ht = 0;
    for (std::size_t i = 0; i < n; ++i) {
      gt += g[i];
      ht += h[i];
    }
    for (std::size_t j = 0; j < cols; ++j) {
      std::vector<double> vals;
      for (std::size_t i = 0; i < n; ++i) vals.push_back(x(i, j));
      std::sort(vals.begin(), vals.end());
      vals.erase(std::unique(vals.begin(), vals.end()), vals.end());
      for (std::size_t k = 1; k < vals.size(); ++k) {
        const double thr = (vals[k - 1] + vals[k]) / 2;
        double gl = 0;
        double hl = 0;
        for (std::size_t i = 0; i < n; ++i) {
          if (x(i, j) < thr) {
            gl += g[i];
            hl += h[i];
          }
        }
        const double gr = gt - gl;
        const double hr = ht - hl;
        if (hl < cfg.min_child_weight || hr < cfg.min_child_weight) continue;
        const double lam = cfg.lambda_l2;
        const double gain = gl * gl / (hl + lam) + gr * gr / (hr + lam) - gt * gt / (ht + lam);
        if (gain > best_gain + 1e-12) {
          best_gain = gain;
          best = {{j, thr}};
        }
      }
    }

    const auto binned = detail::bin_matrix(x, 64);
    std::vector<std::size_t> rows(n);
    for (std::size_t i = 0; i < n; ++i) rows[i] = i;
    const auto got = best_histogram_split(binned, rows, g, h, cfg);
    ASSERT_EQ(got.has_value(), best.has_value()) << "trial " << trial;
    if (!got) continue;
    EXPECT_NEAR(got->gain, best_gain, 1e-9) << "trial " << trial;
    EXPECT_EQ(got->feature, best->first) << "trial " << trial;
    EXPECT_DOUBLE_EQ(got->threshold, best->second) << "trial " << trial;
  }
}

TEST(Split, QuantileBinsRespectLimit) {
  std::vector<double> v;
  for (int i = 0; i < 10000; ++i) v.push_back(i * 0.37);
  const auto thr = bin_thresholds(v, 64);
  EXPECT_LE(thr.size(), 63u);
  EXPECT_GE(thr.size(), 60u);
  EXPECT_TRUE(std::is_sorted(thr.begin(), thr.end()));
  EXPECT_TRUE(bin_thresholds({1.0, 1.0, 1.0}, 64).empty());
}

TEST(Train, SeparableToyReachesPerfectAuc) {
  std::vector<double> v;
  std::vector<int> y;
  for (int i = 0; i < 100; ++i) {
    v.push_back(i / 100.0);
    y.push_back(i >= 50 ? 1 : 0);
  }
  TrainConfig cfg;
  cfg.n_estimators = 10;
  const auto model = train(column(v), y, cfg, kOneName);
  std::vector<double> p;
  for (double x : v) p.push_back(model.predict(std::span<const double>(&x, 1)));
  EXPECT_EQ(auc(p, y), 1.0);
}

TEST(Train, IdenticalRowsPredictPrevalence) {
  std::vector<double> v(200, 3.0);
  std::vector<int> y(200, 0);
  for (int i = 0; i < 60; ++i) y[i] = 1;
  const auto model = train(column(v), y, TrainConfig{}, kOneName);
  const double x = 3.0;
  EXPECT_NEAR(model.predict(std::span<const double>(&x, 1)), 0.3, 1e-6);
}

TEST(Train, LearnsXorAtDepthTwo) {
  SplitMix64 rng(5);
  Matrix x(400, 2);
  std::vector<int> y(400);
  for (std::size_t i = 0; i < 400; ++i) {
    const int a = static_cast<int>(rng.below(2));
    const int b = static_cast<int>(rng.below(2));
    x(i, 0) = a + (rng.uniform() - 0.5) * 0.6;
    x(i, 1) = b + (rng.uniform() - 0.5) * 0.6;
    y[i] = a ^ b;
  }
  TrainConfig cfg;
  cfg.max_depth = 2;
  cfg.n_estimators = 50;
  const auto model = train(x, y, cfg, kTwoNames);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < 400; ++i) correct += (model.predict(x.row(i)) >= 0.5) == (y[i] == 1);
  EXPECT_GE(correct / 400.0, 0.95);
  for (const auto& t : model.trees()) EXPECT_LE(t.depth(), 2u);
}

TEST(Model, EmptyEnsemblePredictsHalf) {
  const GbdtModel m;
  EXPECT_DOUBLE_EQ(m.predict(FeatureVector{}), 0.5);
}

TEST(Model, SingleLeafLogit) {
  Tree t;
  TreeNode leaf;
  leaf.value = 2.0;
  t.nodes = {leaf};
  const GbdtModel m({t}, 0.0, 1.0, GbdtModel::canonical_names());
  EXPECT_DOUBLE_EQ(m.predict(FeatureVector{}), 1.0 / (1.0 + std::exp(-2.0)));
}

TEST(Model, FeatureShapeChecked) {
  const GbdtModel m;
  const double three[3] = {0, 0, 0};
  try {
    m.predict(std::span<const double>(three, 3));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), "feature-shape");
  }
}

TEST(Serialize, RoundTripPredictionsAreBitExact) {
  const auto& d = corpus_rows();
  const auto model = train(d.x, d.y);
  ASSERT_EQ(model.trees().size(), 180u);
  const auto back = deserialize(serialize(model));
  EXPECT_EQ(serialize(back), serialize(model));
  SplitMix64 rng(99);
  for (int i = 0; i < 1000; ++i) {
    FeatureVector z{};
    for (double& v : z) v = rng.uniform() * 4.0 - 0.5;
    ASSERT_EQ(back.predict(z), model.predict(z));
  }
}

TEST(Serialize, Failures) {
  const auto& d = corpus_rows();
  TrainConfig cfg;
  cfg.n_estimators = 3;
  const std::string text = serialize(train(d.x, d.y, cfg));
  try {
    deserialize(text.substr(0, text.size() / 2));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), "malformed-model");
  }
  auto j = nlohmann::json::parse(text);
  j["format_version"] = 2;
  try {
    deserialize(j.dump());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), "version-mismatch");
  }
  j["format_version"] = 1;
  j["trees"][0]["nodes"][0]["left"] = 0;
  try {
    deserialize(j.dump());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), "malformed-model");
  }
}

TEST(Train, InputErrors) {
  auto code_of = [](auto&& fn) {
    try {
      fn();
    } catch (const Error& e) {
      return e.code();
    }
    return std::string("none");
  };
  EXPECT_EQ(code_of([] { train(column({1, 2, 3}), std::vector<int>{1, 1, 1}, {}, kOneName); }), "degenerate-labels");
  EXPECT_EQ(code_of([] { train(column({1, NAN, 3}), std::vector<int>{0, 1, 0}, {}, kOneName); }), "non-finite-input");
  EXPECT_EQ(code_of([] { train(column({1, INFINITY}), std::vector<int>{0, 1}, {}, kOneName); }), "non-finite-input");
  TrainConfig bad;
  bad.n_bins = 1;
  EXPECT_EQ(code_of([&] { train(column({1, 2}), std::vector<int>{0, 1}, bad, kOneName); }), "bad-config");
}

TEST(Train, Deterministic) {
  const auto& d = corpus_rows();
  TrainConfig cfg;
  cfg.n_estimators = 40;
  EXPECT_EQ(serialize(train(d.x, d.y, cfg)), serialize(train(d.x, d.y, cfg)));
}

TEST(TrainConfig, JsonRoundTrip) {
  TrainConfig c;
  c.max_depth = 6;
  c.class_weight = 2.5;
  const auto back = nlohmann::json(c).get<TrainConfig>();
  EXPECT_EQ(nlohmann::json(back).dump(), nlohmann::json(c).dump());
}
