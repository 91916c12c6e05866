#pragma once

// Gradient-boosted regression trees for binary classification under the
// cross-entropy loss: second-order (Newton) boosting with histogram split
// search, flat-array trees and a versioned JSON model format.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "agentguard/error.hpp"
#include "agentguard/features.hpp"

namespace agentguard {

// Dense row-major matrix.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

  std::span<const double> row(std::size_t i) const { return {data.data() + i * cols, cols}; }
  std::span<double> row(std::size_t i) { return {data.data() + i * cols, cols}; }
  double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }
  double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
};

// Selects `columns` of each feature vector, in the given order.
inline Matrix to_matrix(std::span<const FeatureVector> vectors, std::span<const std::size_t> columns) {
  Matrix m(vectors.size(), columns.size());
  for (std::size_t i = 0; i < vectors.size(); ++i) {
    for (std::size_t j = 0; j < columns.size(); ++j) m(i, j) = vectors[i][columns[j]];
  }
  return m;
}

inline std::vector<std::size_t> all_feature_columns() {
  std::vector<std::size_t> cols(kFeatureCount);
  for (std::size_t i = 0; i < kFeatureCount; ++i) cols[i] = i;
  return cols;
}

struct TrainConfig {
  std::size_t n_estimators = 180;
  std::size_t max_depth = 4;
  double learning_rate = 0.1;
  double min_child_weight = 1.0;
  double lambda_l2 = 1.0;
  std::size_t n_bins = 64;
  std::optional<double> class_weight;  // weight of positive rows

  void validate() const {
    auto bad = [](const std::string& why) { throw Error("bad-config", why); };
    if (n_estimators == 0) bad("n_estimators must be positive");
    if (max_depth == 0) bad("max_depth must be positive");
    if (!(learning_rate > 0)) bad("learning_rate must be positive");
    if (!(min_child_weight >= 0)) bad("min_child_weight must be non-negative");
    if (!(lambda_l2 >= 0)) bad("lambda_l2 must be non-negative");
    if (n_bins < 2 || n_bins > 256) bad("n_bins must lie in [2, 256]");
    if (class_weight && !(*class_weight > 0)) bad("class_weight must be positive");
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"n_estimators", c.n_estimators}, {"max_depth", c.max_depth},
       {"learning_rate", c.learning_rate}, {"min_child_weight", c.min_child_weight},
       {"lambda_l2", c.lambda_l2}, {"n_bins", c.n_bins}};
  j["class_weight"] = c.class_weight ? nlohmann::json(*c.class_weight) : nlohmann::json(nullptr);
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  c.n_estimators = j.value("n_estimators", c.n_estimators);
  c.max_depth = j.value("max_depth", c.max_depth);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.min_child_weight = j.value("min_child_weight", c.min_child_weight);
  c.lambda_l2 = j.value("lambda_l2", c.lambda_l2);
  c.n_bins = j.value("n_bins", c.n_bins);
  if (j.contains("class_weight") && !j.at("class_weight").is_null()) {
    c.class_weight = j.at("class_weight").get<double>();
  }
}

inline double sigmoid(double logit) noexcept {
  if (logit >= 0) {
    const double e = std::exp(-logit);
    return 1.0 / (1.0 + e);
  }
  const double e = std::exp(logit);
  return e / (1.0 + e);
}

// Per-row cross-entropy as a function of the logit; stable for large |logit|.
inline double logistic_loss(double y, double logit) noexcept {
  // log(1 + e^logit) - y * logit
  const double softplus = logit > 0 ? logit + std::log1p(std::exp(-logit)) : std::log1p(std::exp(logit));
  return softplus - y * logit;
}

// First and second derivative of logistic_loss in the logit.
inline double logistic_gradient(double y, double logit) noexcept { return sigmoid(logit) - y; }

inline double logistic_hessian(double logit) noexcept {
  const double p = sigmoid(logit);
  return p * (1.0 - p);
}

struct TreeNode {
  // feature < 0 marks a leaf.
  std::int32_t feature = -1;
  double threshold = 0.0;  // rows with x < threshold go left
  std::int32_t left = -1;
  std::int32_t right = -1;
  double value = 0.0;  // leaf contribution to the logit (learning rate applied)

  bool is_leaf() const noexcept { return feature < 0; }
};

struct Tree {
  std::vector<TreeNode> nodes;  // nodes[0] is the root

  double evaluate(std::span<const double> x) const noexcept {
    std::size_t i = 0;
    while (!nodes[i].is_leaf()) {
      const TreeNode& n = nodes[i];
      i = static_cast<std::size_t>(x[static_cast<std::size_t>(n.feature)] < n.threshold ? n.left : n.right);
    }
    return nodes[i].value;
  }

  std::size_t depth() const {
    std::size_t best = 0;
    std::vector<std::pair<std::size_t, std::size_t>> stack = {{0, 0}};
    while (!stack.empty()) {
      auto [i, d] = stack.back();
      stack.pop_back();
      best = std::max(best, d);
      if (!nodes[i].is_leaf()) {
        stack.emplace_back(static_cast<std::size_t>(nodes[i].left), d + 1);
        stack.emplace_back(static_cast<std::size_t>(nodes[i].right), d + 1);
      }
    }
    return best;
  }
};

class GbdtModel {
 public:
  static constexpr int kFormatVersion = 1;

  GbdtModel() : GbdtModel({}, 0.0, 1.0, canonical_names()) {}

  GbdtModel(std::vector<Tree> trees, double base_score, double learning_rate,
            std::vector<std::string> feature_names)
      : trees_(std::move(trees)),
        base_score_(base_score),
        learning_rate_(learning_rate),
        feature_names_(std::move(feature_names)) {
    columns_.reserve(feature_names_.size());
    for (const auto& name : feature_names_) columns_.push_back(feature_index(name));
    canonical_order_ = columns_ == all_feature_columns();
  }

  static std::vector<std::string> canonical_names() {
    return {kFeatureNames.begin(), kFeatureNames.end()};
  }

  const std::vector<Tree>& trees() const noexcept { return trees_; }
  double base_score() const noexcept { return base_score_; }
  double learning_rate() const noexcept { return learning_rate_; }
  const std::vector<std::string>& feature_names() const noexcept { return feature_names_; }
  // Canonical feature index of each model input column.
  const std::vector<std::size_t>& columns() const noexcept { return columns_; }

  double logit(std::span<const double> x) const {
    if (x.size() != feature_names_.size()) {
      throw Error("feature-shape", "expected " + std::to_string(feature_names_.size()) + " features, got " +
                                       std::to_string(x.size()));
    }
    double sum = base_score_;
    for (const Tree& t : trees_) sum += t.evaluate(x);
    return sum;
  }

  // Probability in (0,1) from a row in the model's own column order.
  double predict(std::span<const double> x) const {
    constexpr double kEps = 1e-15;
    return std::clamp(sigmoid(logit(x)), kEps, 1.0 - kEps);
  }

  // Probability from a full canonical feature vector; selects this model's columns.
  double predict(const FeatureVector& z) const {
    if (canonical_order_) return predict(std::span<const double>(z));
    double buf[kFeatureCount];
    for (std::size_t j = 0; j < columns_.size(); ++j) buf[j] = z[columns_[j]];
    return predict(std::span<const double>(buf, columns_.size()));
  }

 private:
  std::vector<Tree> trees_;
  double base_score_;
  double learning_rate_;
  std::vector<std::string> feature_names_;
  std::vector<std::size_t> columns_;
  bool canonical_order_ = false;
};

// ---- histogram binning -----------------------------------------------------

// Split candidates for one feature. bin(x) = #thresholds <= x, so
// "x < thresholds[b]" is exactly "bin(x) <= b".
inline std::vector<double> bin_thresholds(std::vector<double> values, std::size_t n_bins) {
  std::sort(values.begin(), values.end());
  std::vector<double> uniq;
  std::vector<std::size_t> upto;  // rows with value <= uniq[k]
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (uniq.empty() || values[i] != uniq.back()) {
      uniq.push_back(values[i]);
      upto.push_back(0);
    }
    upto.back() = i + 1;
  }
  std::vector<double> thresholds;
  auto midpoint = [&](std::size_t k) { return uniq[k - 1] + (uniq[k] - uniq[k - 1]) / 2.0; };
  if (uniq.size() <= n_bins) {
    for (std::size_t k = 1; k < uniq.size(); ++k) thresholds.push_back(midpoint(k));
    return thresholds;
  }
  // Quantile cuts: the first unique value whose cumulative count passes
  // q * n starts a new bin.
  const double n = static_cast<double>(values.size());
  std::size_t k = 1;
  for (std::size_t q = 1; q < n_bins; ++q) {
    const double target = n * static_cast<double>(q) / static_cast<double>(n_bins);
    while (k < uniq.size() && static_cast<double>(upto[k - 1]) < target) ++k;
    if (k >= uniq.size()) break;
    const double thr = midpoint(k);
    if (thresholds.empty() || thr > thresholds.back()) thresholds.push_back(thr);
    ++k;
  }
  return thresholds;
}

struct SplitCandidate {
  double gain = 0.0;
  std::size_t feature = 0;
  std::size_t bin = 0;  // left = bins 0..bin
  double threshold = 0.0;
};

inline double split_gain(double gl, double hl, double gr, double hr, double lambda) noexcept {
  const double g = gl + gr;
  const double h = hl + hr;
  return gl * gl / (hl + lambda) + gr * gr / (hr + lambda) - g * g / (h + lambda);
}

namespace detail {

inline constexpr double kMinSplitGain = 1e-10;

struct Binned {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::vector<double>> thresholds;  // per column
  std::vector<std::uint8_t> bins;               // column-major

  std::uint8_t at(std::size_t i, std::size_t j) const { return bins[j * rows + i]; }
};

inline Binned bin_matrix(const Matrix& x, std::size_t n_bins) {
  Binned b;
  b.rows = x.rows;
  b.cols = x.cols;
  b.thresholds.resize(x.cols);
  b.bins.resize(x.rows * x.cols);
  std::vector<double> column(x.rows);
  for (std::size_t j = 0; j < x.cols; ++j) {
    for (std::size_t i = 0; i < x.rows; ++i) column[i] = x(i, j);
    b.thresholds[j] = bin_thresholds(column, n_bins);
    const auto& thr = b.thresholds[j];
    for (std::size_t i = 0; i < x.rows; ++i) {
      b.bins[j * x.rows + i] =
          static_cast<std::uint8_t>(std::upper_bound(thr.begin(), thr.end(), column[i]) - thr.begin());
    }
  }
  return b;
}

}  // namespace detail

// Best histogram split over `rows`. Ties keep the lowest feature, then the
// lowest bin. Returns nullopt when no split has positive gain or every
// split violates min_child_weight.
inline std::optional<SplitCandidate> best_histogram_split(const detail::Binned& data,
                                                          std::span<const std::size_t> rows,
                                                          std::span<const double> grad,
                                                          std::span<const double> hess,
                                                          const TrainConfig& cfg) {
  double g_total = 0.0;
  double h_total = 0.0;
  for (std::size_t r : rows) {
    g_total += grad[r];
    h_total += hess[r];
  }
  std::optional<SplitCandidate> best;
  std::vector<double> hg(257);
  std::vector<double> hh(257);
  for (std::size_t j = 0; j < data.cols; ++j) {
    const std::size_t n_bins = data.thresholds[j].size() + 1;
    if (n_bins < 2) continue;
    std::fill_n(hg.begin(), n_bins, 0.0);
    std::fill_n(hh.begin(), n_bins, 0.0);
    const std::uint8_t* col = data.bins.data() + j * data.rows;
    for (std::size_t r : rows) {
      hg[col[r]] += grad[r];
      hh[col[r]] += hess[r];
    }
    double gl = 0.0;
    double hl = 0.0;
    for (std::size_t b = 0; b + 1 < n_bins; ++b) {
      gl += hg[b];
      hl += hh[b];
      const double gr = g_total - gl;
      const double hr = h_total - hl;
      if (hl < cfg.min_child_weight || hr < cfg.min_child_weight) continue;
      if (hl <= 0.0 || hr <= 0.0) continue;
      const double gain = split_gain(gl, hl, gr, hr, cfg.lambda_l2);
      if (gain > detail::kMinSplitGain && (!best || gain > best->gain)) {
        best = SplitCandidate{gain, j, b, data.thresholds[j][b]};
      }
    }
  }
  return best;
}

// Trains on rows of `x` (columns named by `feature_names`, canonical names
// by default) with 0/1 `labels`. Writes the per-round training loss
// (index 0 = base score only) to `loss_history` when given.
inline GbdtModel train(const Matrix& x, std::span<const int> labels, const TrainConfig& cfg = {},
                       std::vector<std::string> feature_names = GbdtModel::canonical_names(),
                       std::vector<double>* loss_history = nullptr) {
  cfg.validate();
  if (x.rows != labels.size()) throw Error("shape-mismatch", "row and label counts differ");
  if (feature_names.size() != x.cols) throw Error("shape-mismatch", "feature_names must match columns");
  for (double v : x.data) {
    if (!std::isfinite(v)) throw Error("non-finite-input");
  }
  std::size_t positives = 0;
  for (int y : labels) {
    if (y != 0 && y != 1) throw Error("bad-labels", "labels must be 0 or 1");
    positives += static_cast<std::size_t>(y);
  }
  if (positives == 0 || positives == labels.size()) throw Error("degenerate-labels");

  const std::size_t n = x.rows;
  std::vector<double> weight(n, 1.0);
  if (cfg.class_weight) {
    for (std::size_t i = 0; i < n; ++i) {
      if (labels[i] == 1) weight[i] = *cfg.class_weight;
    }
  }
  double w_pos = 0.0;
  double w_all = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    w_all += weight[i];
    w_pos += weight[i] * labels[i];
  }
  const double prevalence = w_pos / w_all;
  const double base = std::log(prevalence / (1.0 - prevalence));

  const detail::Binned binned = detail::bin_matrix(x, cfg.n_bins);
  std::vector<double> logit(n, base);
  std::vector<double> grad(n);
  std::vector<double> hess(n);
  std::vector<Tree> trees;
  trees.reserve(cfg.n_estimators);

  auto total_loss = [&] {
    double l = 0.0;
    for (std::size_t i = 0; i < n; ++i) l += weight[i] * logistic_loss(labels[i], logit[i]);
    return l;
  };
  if (loss_history) {
    loss_history->clear();
    loss_history->push_back(total_loss());
  }

  std::vector<std::size_t> all_rows(n);
  for (std::size_t i = 0; i < n; ++i) all_rows[i] = i;

  for (std::size_t round = 0; round < cfg.n_estimators; ++round) {
    for (std::size_t i = 0; i < n; ++i) {
      grad[i] = weight[i] * logistic_gradient(labels[i], logit[i]);
      hess[i] = weight[i] * logistic_hessian(logit[i]);
    }
    Tree tree;
    // Depth-first growth; each work item is (node index, depth, rows).
    struct Work {
      std::size_t node;
      std::size_t depth;
      std::vector<std::size_t> rows;
    };
    std::vector<Work> stack;
    tree.nodes.emplace_back();
    stack.push_back({0, 0, all_rows});
    while (!stack.empty()) {
      Work w = std::move(stack.back());
      stack.pop_back();
      std::optional<SplitCandidate> split;
      if (w.depth < cfg.max_depth && w.rows.size() >= 2) {
        split = best_histogram_split(binned, w.rows, grad, hess, cfg);
      }
      if (!split) {
        double g = 0.0;
        double h = 0.0;
        for (std::size_t r : w.rows) {
          g += grad[r];
          h += hess[r];
        }
        double value = h + cfg.lambda_l2 > 0 ? -g / (h + cfg.lambda_l2) * cfg.learning_rate : 0.0;
        // Damp the Newton step until it does not raise this leaf's loss.
        auto leaf_loss = [&](double v) {
          double l = 0.0;
          for (std::size_t r : w.rows) l += weight[r] * logistic_loss(labels[r], logit[r] + v);
          return l;
        };
        const double before = leaf_loss(0.0);
        for (int halvings = 0; value != 0.0 && leaf_loss(value) > before; ++halvings) {
          value = halvings < 40 ? value / 2.0 : 0.0;
        }
        tree.nodes[w.node].value = value;
        for (std::size_t r : w.rows) logit[r] += value;
        continue;
      }
      std::vector<std::size_t> left;
      std::vector<std::size_t> right;
      const std::uint8_t* col = binned.bins.data() + split->feature * binned.rows;
      for (std::size_t r : w.rows) (col[r] <= split->bin ? left : right).push_back(r);
      const auto li = static_cast<std::int32_t>(tree.nodes.size());
      tree.nodes.emplace_back();
      tree.nodes.emplace_back();
      TreeNode& node = tree.nodes[w.node];
      node.feature = static_cast<std::int32_t>(split->feature);
      node.threshold = split->threshold;
      node.left = li;
      node.right = li + 1;
      // Right is pushed first so the left subtree is built first.
      stack.push_back({static_cast<std::size_t>(li + 1), w.depth + 1, std::move(right)});
      stack.push_back({static_cast<std::size_t>(li), w.depth + 1, std::move(left)});
    }
    trees.push_back(std::move(tree));
    if (loss_history) loss_history->push_back(total_loss());
  }
  return GbdtModel(std::move(trees), base, cfg.learning_rate, std::move(feature_names));
}

// ---- serialization ---------------------------------------------------------

inline nlohmann::ordered_json model_to_json(const GbdtModel& model) {
  nlohmann::ordered_json j;
  j["format_version"] = GbdtModel::kFormatVersion;
  j["learning_rate"] = model.learning_rate();
  j["base_score"] = model.base_score();
  j["feature_names"] = model.feature_names();
  auto trees = nlohmann::ordered_json::array();
  for (const Tree& t : model.trees()) {
    auto nodes = nlohmann::ordered_json::array();
    for (const TreeNode& n : t.nodes) {
      nlohmann::ordered_json jn;
      if (n.is_leaf()) {
        jn["leaf"] = n.value;
      } else {
        jn["feature"] = n.feature;
        jn["threshold"] = n.threshold;
        jn["left"] = n.left;
        jn["right"] = n.right;
      }
      nodes.push_back(std::move(jn));
    }
    trees.push_back({{"nodes", std::move(nodes)}});
  }
  j["trees"] = std::move(trees);
  return j;
}

inline std::string serialize(const GbdtModel& model) { return model_to_json(model).dump(); }

inline GbdtModel model_from_json(const nlohmann::json& j) {
  auto malformed = [](const std::string& why) -> Error { return Error("malformed-model", why); };
  try {
    if (!j.is_object()) throw malformed("model must be a JSON object");
    const int version = j.at("format_version").get<int>();
    if (version != GbdtModel::kFormatVersion) {
      throw Error("version-mismatch", "model format_version " + std::to_string(version) + ", expected " +
                                          std::to_string(GbdtModel::kFormatVersion));
    }
    auto names = j.at("feature_names").get<std::vector<std::string>>();
    for (const auto& name : names) {
      try {
        (void)feature_index(name);
      } catch (const Error&) {
        throw malformed("unknown feature name " + name);
      }
    }
    std::vector<Tree> trees;
    for (const auto& jt : j.at("trees")) {
      Tree t;
      const auto& nodes = jt.at("nodes");
      if (nodes.empty()) throw malformed("tree without nodes");
      for (const auto& jn : nodes) {
        TreeNode n;
        if (jn.contains("leaf")) {
          n.value = jn.at("leaf").get<double>();
        } else {
          n.feature = jn.at("feature").get<std::int32_t>();
          n.threshold = jn.at("threshold").get<double>();
          n.left = jn.at("left").get<std::int32_t>();
          n.right = jn.at("right").get<std::int32_t>();
        }
        t.nodes.push_back(n);
      }
      // Children must point forward, which also rules out cycles.
      for (std::size_t i = 0; i < t.nodes.size(); ++i) {
        const TreeNode& n = t.nodes[i];
        if (n.is_leaf()) continue;
        if (static_cast<std::size_t>(n.feature) >= names.size()) throw malformed("feature index out of range");
        for (auto c : {n.left, n.right}) {
          if (c <= static_cast<std::int32_t>(i) || static_cast<std::size_t>(c) >= t.nodes.size()) {
            throw malformed("bad child index");
          }
        }
      }
      trees.push_back(std::move(t));
    }
    return GbdtModel(std::move(trees), j.at("base_score").get<double>(), j.at("learning_rate").get<double>(),
                     std::move(names));
  } catch (const nlohmann::json::exception& e) {
    throw malformed(e.what());
  }
}

inline GbdtModel deserialize(std::string_view text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw Error("malformed-model", e.what());
  }
  return model_from_json(j);
}

}  // namespace agentguard
