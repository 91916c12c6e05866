#pragma once

// End-to-end glue: resolved configuration, detector training with
// threshold calibration, evaluation reports, model directories and the
// feature-group ablation driver.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "agentguard/detector.hpp"
#include "agentguard/error.hpp"
#include "agentguard/features.hpp"
#include "agentguard/gbdt.hpp"
#include "agentguard/metrics.hpp"
#include "agentguard/policy.hpp"
#include "agentguard/tracegen.hpp"

namespace agentguard {

struct BootstrapConfig {
  std::size_t samples = kDefaultBootstrapSamples;
  std::uint64_t seed = 2024;
};

// The single configuration document every subcommand reads and echoes.
struct PipelineConfig {
  GenConfig gen;
  TrainConfig train;
  CalibrationConstraints calibration;
  std::optional<Thresholds> thresholds;  // overrides calibration when set
  FeatureConfig features;
  RuleLexicon rule_lexicon;
  BootstrapConfig bootstrap;
};

inline void to_json(nlohmann::json& j, const PipelineConfig& c) {
  j = {{"gen", c.gen},
       {"train", c.train},
       {"calibration", c.calibration},
       {"features", c.features},
       {"rule_lexicon", c.rule_lexicon},
       {"bootstrap", {{"samples", c.bootstrap.samples}, {"seed", c.bootstrap.seed}}}};
  j["thresholds"] = c.thresholds ? nlohmann::json(*c.thresholds) : nlohmann::json(nullptr);
}

inline void from_json(const nlohmann::json& j, PipelineConfig& c) {
  if (j.contains("gen")) c.gen = j.at("gen").get<GenConfig>();
  if (j.contains("train")) c.train = j.at("train").get<TrainConfig>();
  if (j.contains("calibration")) c.calibration = j.at("calibration").get<CalibrationConstraints>();
  if (j.contains("thresholds") && !j.at("thresholds").is_null()) c.thresholds = j.at("thresholds").get<Thresholds>();
  if (j.contains("features")) c.features = j.at("features").get<FeatureConfig>();
  if (j.contains("rule_lexicon")) c.rule_lexicon = j.at("rule_lexicon").get<RuleLexicon>();
  if (j.contains("bootstrap")) {
    c.bootstrap.samples = j.at("bootstrap").value("samples", c.bootstrap.samples);
    c.bootstrap.seed = j.at("bootstrap").value("seed", c.bootstrap.seed);
  }
}

inline PipelineConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("io-error", "cannot read config " + path.string());
  try {
    return nlohmann::json::parse(in).get<PipelineConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw Error("bad-config", e.what());
  }
}

// FNV-1a, used to fingerprint corpus manifests in reports.
inline std::string fnv1a_hex(std::string_view data) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : data) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline std::string corpus_hash(const Corpus& corpus) { return fnv1a_hex(corpus_manifest(corpus).dump()); }

// Full feature vectors of every prefix, grouped by session, for one split.
struct SplitFeatures {
  std::span<const Session> sessions;
  std::vector<std::vector<FeatureVector>> vectors;
};

inline SplitFeatures extract_split(std::span<const Session> sessions, const BenignProfile& profile,
                                   const FeatureConfig& config) {
  SplitFeatures out{sessions, {}};
  out.vectors.reserve(sessions.size());
  for (const Session& s : sessions) out.vectors.push_back(extract_session(s, profile, config));
  return out;
}

inline std::vector<ScoredSession> score_cached(const GbdtModel& model, const SplitFeatures& split) {
  std::vector<ScoredSession> out;
  out.reserve(split.sessions.size());
  for (std::size_t i = 0; i < split.sessions.size(); ++i) {
    const Session& s = split.sessions[i];
    SessionScores sc{s.label == Label::adversarial, s.unsafe_turn, {}};
    sc.risks.reserve(split.vectors[i].size());
    for (const auto& z : split.vectors[i]) sc.risks.push_back(model.predict(z));
    out.push_back({&s, std::move(sc)});
  }
  return out;
}

inline Calibration calibrate_scored(std::span<const ScoredSession> scored, const CalibrationConstraints& c) {
  std::vector<SessionScores> plain;
  plain.reserve(scored.size());
  for (const auto& s : scored) plain.push_back(s.scores);
  return calibrate(plain, c);
}

inline GbdtModel fit_on_split(const SplitFeatures& split, std::span<const std::size_t> columns,
                              const TrainConfig& cfg) {
  std::vector<FeatureVector> rows;
  std::vector<int> labels;
  for (std::size_t i = 0; i < split.sessions.size(); ++i) {
    const int y = split.sessions[i].label == Label::adversarial ? 1 : 0;
    for (const auto& z : split.vectors[i]) {
      rows.push_back(z);
      labels.push_back(y);
    }
  }
  std::vector<std::string> names;
  for (std::size_t c : columns) names.emplace_back(kFeatureNames[c]);
  return train(to_matrix(rows, columns), labels, cfg, std::move(names));
}

struct TrainedDetector {
  std::shared_ptr<const GbdtModel> model;
  std::shared_ptr<const BenignProfile> profile;
  std::shared_ptr<const FeatureConfig> features;
  Calibration calibration;
  TrainConfig train_config;

  StructuredScorer scorer() const { return {model, profile, features}; }
  Thresholds thresholds() const { return calibration.thresholds; }
};

// Profile from benign training sessions, GBDT on training prefixes,
// thresholds calibrated on validation sessions.
inline TrainedDetector train_detector(const Corpus& corpus, const PipelineConfig& config) {
  TrainedDetector td;
  td.profile = std::make_shared<const BenignProfile>(fit_profile(corpus.train));
  td.features = std::make_shared<const FeatureConfig>(config.features);
  td.train_config = config.train;
  const auto columns = all_feature_columns();
  const SplitFeatures train_split = extract_split(corpus.train, *td.profile, config.features);
  td.model = std::make_shared<const GbdtModel>(fit_on_split(train_split, columns, config.train));
  const SplitFeatures valid_split = extract_split(corpus.valid, *td.profile, config.features);
  td.calibration = calibrate_scored(score_cached(*td.model, valid_split), config.calibration);
  if (config.thresholds) td.calibration.thresholds = *config.thresholds;
  return td;
}

// Same as train_detector but from exported feature rows. Rows carry no
// unsafe turn, so the calibration ASR figure counts a block anywhere in
// the session; the thresholds themselves do not depend on it.
inline TrainedDetector train_from_features(std::span<const FeatureRow> train_rows,
                                           std::span<const FeatureRow> valid_rows, BenignProfile profile,
                                           const PipelineConfig& config) {
  if (train_rows.empty() || valid_rows.empty()) throw Error("empty-input", "feature rows required");
  TrainedDetector td;
  td.profile = std::make_shared<const BenignProfile>(std::move(profile));
  td.features = std::make_shared<const FeatureConfig>(config.features);
  td.train_config = config.train;
  std::vector<FeatureVector> rows;
  std::vector<int> labels;
  for (const auto& r : train_rows) {
    rows.push_back(r.z);
    labels.push_back(r.label);
  }
  const auto columns = all_feature_columns();
  std::vector<std::string> names(kFeatureNames.begin(), kFeatureNames.end());
  td.model = std::make_shared<const GbdtModel>(train(to_matrix(rows, columns), labels, config.train, names));
  std::vector<SessionScores> valid;
  for (std::size_t i = 0; i < valid_rows.size(); ++i) {
    if (i == 0 || valid_rows[i].session_id != valid_rows[i - 1].session_id) {
      valid.push_back({valid_rows[i].label == 1, std::nullopt, {}});
    }
    valid.back().risks.push_back(td.model->predict(valid_rows[i].z));
  }
  td.calibration = calibrate(valid, config.calibration);
  if (config.thresholds) td.calibration.thresholds = *config.thresholds;
  return td;
}

// ---- reports ---------------------------------------------------------------

struct MetricsReport {
  std::string detector;
  std::string corpus_hash;
  std::size_t sessions = 0;
  std::size_t prefixes = 0;
  Thresholds thresholds;
  bool calibration_warning = false;
  double auc = 0.0;
  PrecisionRecall at_block;  // operating point tau2
  double best_f1_threshold = 0.0;
  PrecisionRecall at_best_f1;
  double asr_reduction = 0.0;
  double benign_block_rate = 0.0;
  std::map<Family, double> family_success;
  Interval auc_ci;
  Interval f1_ci;
  Interval asr_ci;
  std::optional<double> latency_p50_ms;
};

inline MetricsReport evaluate(std::string detector_name, std::span<const ScoredSession> scored,
                              const Thresholds& th, const BootstrapConfig& boot, std::string hash = {}) {
  MetricsReport r;
  r.detector = std::move(detector_name);
  r.corpus_hash = std::move(hash);
  r.sessions = scored.size();
  r.thresholds = th;
  std::vector<double> scores;
  std::vector<int> labels;
  std::vector<std::size_t> attack_idx;
  std::size_t benign = 0;
  std::size_t benign_blocked = 0;
  for (std::size_t i = 0; i < scored.size(); ++i) {
    const auto& s = scored[i].scores;
    for (double v : s.risks) {
      scores.push_back(v);
      labels.push_back(s.adversarial ? 1 : 0);
    }
    if (s.adversarial) {
      attack_idx.push_back(i);
    } else {
      ++benign;
      benign_blocked += detail::session_max(s) >= th.tau2 ? 1 : 0;
    }
  }
  r.prefixes = scores.size();
  r.auc = auc(scores, labels);
  r.at_block = prf1(scores, labels, th.tau2);
  std::tie(r.best_f1_threshold, r.at_best_f1) = best_f1(scores, labels);
  r.asr_reduction = asr_reduction(scored, th);
  r.benign_block_rate = benign ? static_cast<double>(benign_blocked) / static_cast<double>(benign) : 0.0;
  r.family_success = per_family_asr(scored, th);

  auto prefix_metric = [&](auto&& fn) {
    return [&, fn](std::span<const std::size_t> idx) {
      std::vector<double> s(idx.size());
      std::vector<int> y(idx.size());
      for (std::size_t k = 0; k < idx.size(); ++k) {
        s[k] = scores[idx[k]];
        y[k] = labels[idx[k]];
      }
      return fn(s, y);
    };
  };
  r.auc_ci = bootstrap_ci(prefix_metric([](auto& s, auto& y) { return auc(s, y); }), scores.size(),
                          boot.samples, boot.seed);
  r.f1_ci = bootstrap_ci(prefix_metric([&](auto& s, auto& y) { return prf1(s, y, th.tau2).f1; }),
                         scores.size(), boot.samples, boot.seed + 1);
  r.asr_ci = bootstrap_ci(
      [&](std::span<const std::size_t> idx) {
        std::size_t stopped = 0;
        for (std::size_t k : idx) stopped += detail::prevented(scored[attack_idx[k]].scores, th.tau2) ? 1 : 0;
        return static_cast<double>(stopped) / static_cast<double>(idx.size());
      },
      attack_idx.size(), boot.samples, boot.seed + 2);
  return r;
}

inline nlohmann::ordered_json report_to_json(const MetricsReport& r) {
  nlohmann::ordered_json j;
  j["detector"] = r.detector;
  j["corpus_manifest_hash"] = r.corpus_hash;
  j["sessions"] = r.sessions;
  j["prefixes"] = r.prefixes;
  j["thresholds"] = {{"tau1", r.thresholds.tau1}, {"tau2", r.thresholds.tau2}};
  j["calibration_warning"] = r.calibration_warning;
  j["auc"] = r.auc;
  j["precision"] = r.at_block.precision;
  j["precision_undefined"] = r.at_block.precision_undefined;
  j["recall"] = r.at_block.recall;
  j["f1"] = r.at_block.f1;
  j["asr_reduction"] = r.asr_reduction;
  j["benign_block_rate"] = r.benign_block_rate;
  j["best_f1"] = {{"threshold", r.best_f1_threshold}, {"precision", r.at_best_f1.precision},
                  {"recall", r.at_best_f1.recall}, {"f1", r.at_best_f1.f1}};
  nlohmann::ordered_json fam;
  for (const auto& [f, v] : r.family_success) fam[std::string(family_name(f))] = v;
  j["family_attack_success"] = fam;
  j["ci95"] = {{"auc", {r.auc_ci.lower, r.auc_ci.upper}},
               {"f1", {r.f1_ci.lower, r.f1_ci.upper}},
               {"asr_reduction", {r.asr_ci.lower, r.asr_ci.upper}}};
  j["latency_p50_ms"] = r.latency_p50_ms ? nlohmann::ordered_json(*r.latency_p50_ms) : nlohmann::ordered_json(nullptr);
  return j;
}

inline std::string report_to_text(const MetricsReport& r) {
  std::ostringstream o;
  o.setf(std::ios::fixed);
  o.precision(3);
  o << "detector            " << r.detector << '\n'
    << "sessions/prefixes   " << r.sessions << " / " << r.prefixes << '\n'
    << "tau1 / tau2         " << r.thresholds.tau1 << " / " << r.thresholds.tau2 << '\n'
    << "AUC                 " << r.auc << "  [" << r.auc_ci.lower << ", " << r.auc_ci.upper << "]\n"
    << "precision           " << r.at_block.precision << (r.at_block.precision_undefined ? " (undefined)" : "") << '\n'
    << "recall              " << r.at_block.recall << '\n'
    << "F1                  " << r.at_block.f1 << "  [" << r.f1_ci.lower << ", " << r.f1_ci.upper << "]\n"
    << "ASR reduction       " << r.asr_reduction << "  [" << r.asr_ci.lower << ", " << r.asr_ci.upper << "]\n"
    << "benign block rate   " << r.benign_block_rate << '\n'
    << "best-F1 threshold   " << r.best_f1_threshold << " (F1 " << r.at_best_f1.f1 << ")\n";
  if (r.latency_p50_ms) o << "latency p50 (ms)    " << *r.latency_p50_ms << '\n';
  o << "attack success by family\n";
  for (const auto& [f, v] : r.family_success) o << "  " << family_name(f) << std::string(20 - family_name(f).size(), ' ') << v << '\n';
  return o.str();
}

// ---- model directory -------------------------------------------------------

inline void save_detector(const TrainedDetector& td, const std::filesystem::path& dir,
                          const nlohmann::json& extra_manifest = {}) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir / "model.json", std::ios::binary);
    out << serialize(*td.model) << '\n';
  }
  {
    std::ofstream out(dir / "profile.json", std::ios::binary);
    out << nlohmann::json(*td.profile).dump(2) << '\n';
  }
  nlohmann::ordered_json m;
  m["format"] = "agentguard-model/1";
  m["thresholds"] = {{"tau1", td.calibration.thresholds.tau1},
                     {"tau2", td.calibration.thresholds.tau2},
                     {"calibration_constraints", nlohmann::json(td.calibration.constraints)}};
  m["calibration"] = {{"warning", td.calibration.warning},
                      {"benign_block_rate", td.calibration.benign_block_rate},
                      {"benign_restrict_rate", td.calibration.benign_restrict_rate},
                      {"asr_reduction", td.calibration.asr_reduction}};
  m["train_config"] = nlohmann::json(td.train_config);
  m["features"] = nlohmann::json(*td.features);
  for (const auto& [k, v] : extra_manifest.items()) m[k] = v;
  std::ofstream out(dir / "manifest.json", std::ios::binary);
  out << m.dump(2) << '\n';
}

inline TrainedDetector load_detector(const std::filesystem::path& dir) {
  auto read_text = [](const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw Error("io-error", "cannot read " + p.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
  };
  TrainedDetector td;
  td.model = std::make_shared<const GbdtModel>(deserialize(read_text(dir / "model.json")));
  try {
    td.profile = std::make_shared<const BenignProfile>(nlohmann::json::parse(read_text(dir / "profile.json")).get<BenignProfile>());
    const auto m = nlohmann::json::parse(read_text(dir / "manifest.json"));
    const auto& th = m.at("thresholds");
    td.calibration.thresholds = {th.at("tau1").get<double>(), th.at("tau2").get<double>()};
    if (!td.calibration.thresholds.valid()) throw Error("bad-thresholds", "manifest thresholds out of order");
    if (th.contains("calibration_constraints")) {
      td.calibration.constraints = th.at("calibration_constraints").get<CalibrationConstraints>();
    }
    if (m.contains("calibration")) td.calibration.warning = m.at("calibration").value("warning", false);
    td.features = std::make_shared<const FeatureConfig>(
        m.contains("features") ? m.at("features").get<FeatureConfig>() : FeatureConfig{});
    if (m.contains("train_config")) td.train_config = m.at("train_config").get<TrainConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw Error("malformed-model", e.what());
  }
  return td;
}

// ---- ablation --------------------------------------------------------------

enum class AblationMode : std::uint8_t { full, isolated, leave_one_out };

constexpr std::string_view ablation_mode_name(AblationMode m) noexcept {
  switch (m) {
    case AblationMode::full: return "full";
    case AblationMode::isolated: return "isolated";
    case AblationMode::leave_one_out: return "leave_one_out";
  }
  return "?";
}

struct AblationSpec {
  AblationMode mode = AblationMode::full;
  std::string group;  // ignored for full

  // Kept canonical columns, in canonical order.
  std::vector<std::size_t> columns() const {
    if (mode == AblationMode::full) return all_feature_columns();
    const FeatureGroup& g = feature_group(group);
    std::vector<std::size_t> cols;
    for (std::size_t i = 0; i < kFeatureCount; ++i) {
      const bool inside = i >= g.offset && i < g.offset + g.size;
      if (inside == (mode == AblationMode::isolated)) cols.push_back(i);
    }
    return cols;
  }
};

inline std::vector<AblationSpec> default_ablation_specs() {
  std::vector<AblationSpec> specs;
  for (const auto& g : kFeatureGroups) specs.push_back({AblationMode::isolated, std::string(g.name)});
  for (const auto& g : kFeatureGroups) specs.push_back({AblationMode::leave_one_out, std::string(g.name)});
  specs.push_back({AblationMode::full, "all"});
  return specs;
}

struct AblationRow {
  AblationSpec spec;
  std::size_t width = 0;
  double auc = 0.0;
  double f1 = 0.0;
  double asr_reduction = 0.0;
  Thresholds thresholds;
};

// Retrains on each column subset (dropped, not zero-filled), recalibrates
// on validation and evaluates on test. Features are extracted once.
inline std::vector<AblationRow> run_ablation(const Corpus& corpus, std::span<const AblationSpec> specs,
                                             const PipelineConfig& config) {
  std::vector<std::vector<std::size_t>> masks;
  for (const auto& spec : specs) masks.push_back(spec.columns());  // validates group names up front
  const BenignProfile profile = fit_profile(corpus.train);
  const SplitFeatures train_split = extract_split(corpus.train, profile, config.features);
  const SplitFeatures valid_split = extract_split(corpus.valid, profile, config.features);
  const SplitFeatures test_split = extract_split(corpus.test, profile, config.features);
  std::vector<AblationRow> rows;
  for (std::size_t k = 0; k < specs.size(); ++k) {
    const GbdtModel model = fit_on_split(train_split, masks[k], config.train);
    const Calibration cal = calibrate_scored(score_cached(model, valid_split), config.calibration);
    const auto scored = score_cached(model, test_split);
    std::vector<double> scores;
    std::vector<int> labels;
    for (const auto& s : scored) {
      for (double v : s.scores.risks) {
        scores.push_back(v);
        labels.push_back(s.scores.adversarial ? 1 : 0);
      }
    }
    AblationRow row;
    row.spec = specs[k];
    row.width = masks[k].size();
    row.auc = auc(scores, labels);
    row.f1 = prf1(scores, labels, cal.thresholds.tau2).f1;
    row.asr_reduction = asr_reduction(scored, cal.thresholds);
    row.thresholds = cal.thresholds;
    rows.push_back(row);
  }
  return rows;
}

inline std::string ablation_to_text(std::span<const AblationRow> rows) {
  std::ostringstream o;
  o << "mode            group      |z|    AUC     F1   ASR red.\n";
  char buf[128];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%-15s %-9s %4zu  %5.3f  %5.3f  %5.3f\n",
                  std::string(ablation_mode_name(r.spec.mode)).c_str(), r.spec.group.c_str(), r.width, r.auc, r.f1,
                  r.asr_reduction);
    o << buf;
  }
  return o.str();
}

inline nlohmann::ordered_json ablation_to_json(std::span<const AblationRow> rows) {
  auto arr = nlohmann::ordered_json::array();
  for (const auto& r : rows) {
    nlohmann::ordered_json j;
    j["mode"] = std::string(ablation_mode_name(r.spec.mode));
    j["group"] = r.spec.group;
    j["width"] = r.width;
    j["auc"] = r.auc;
    j["f1"] = r.f1;
    j["asr_reduction"] = r.asr_reduction;
    j["tau2"] = r.thresholds.tau2;
    arr.push_back(std::move(j));
  }
  return arr;
}

inline std::string ablation_to_csv(std::span<const AblationRow> rows) {
  std::ostringstream o;
  o << "mode,group,width,auc,f1,asr_reduction\n";
  for (const auto& r : rows) {
    o << ablation_mode_name(r.spec.mode) << ',' << r.spec.group << ',' << r.width << ',' << format_double(r.auc)
      << ',' << format_double(r.f1) << ',' << format_double(r.asr_reduction) << '\n';
  }
  return o.str();
}

}  // namespace agentguard
