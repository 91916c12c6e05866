#pragma once

// Incremental construction of the 42-dimensional structured feature vector
// for an interaction prefix, in five named groups:
//
//   prompt[11]  surface signals of the current prompt
//   session[8]  turn-indexed aggregates over the history
//   tool[6]     one-hot of the proposed tool + task/tool mismatch
//   context[6]  external content and sensitive resources
//   fraud[11]   cross-turn trajectory signals (risk path, burst, novelty, gap)

#include <algorithm>
#include <array>
#include <charconv>
#include <cstdint>
#include <istream>
#include <optional>
#include <ostream>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include "json.hpp"

#include "agentguard/error.hpp"
#include "agentguard/text.hpp"
#include "agentguard/trace.hpp"

namespace agentguard {

inline constexpr std::size_t kFeatureCount = 42;

using FeatureVector = std::array<double, kFeatureCount>;

inline constexpr std::array<std::string_view, kFeatureCount> kFeatureNames = {
    // prompt
    "prompt_char_len", "prompt_token_count", "prompt_mean_token_len", "prompt_suspicious_kw_count",
    "prompt_override_flag", "prompt_instruction_conflict_flag", "prompt_privilege_flag",
    "prompt_secret_kw_count", "prompt_url_count", "prompt_code_block_flag", "prompt_imperative_count",
    // session
    "session_turn_index", "session_repeat_count", "session_denied_count", "session_failed_count",
    "session_turns_since_external", "session_semantic_drift", "session_distinct_tools",
    "session_max_tool_usage",
    // tool
    "tool_web_fetch", "tool_summarize", "tool_read_local_file", "tool_send_email", "tool_run_shell",
    "tool_task_mismatch",
    // context
    "ctx_external_present", "ctx_external_suspicious", "ctx_sensitive_resource",
    "ctx_risky_after_ingestion", "ctx_external_len", "ctx_external_turn_count",
    // fraud
    "fraud_cum_risk", "fraud_risk_delta", "fraud_monotone_flag", "fraud_burst_score",
    "fraud_recipient_novelty", "fraud_path_novelty", "fraud_context_exfil_gap",
    "fraud_high_risk_count", "fraud_sensitive_read_count", "fraud_external_send_count",
    "fraud_read_send_cooccur"};

struct FeatureGroup {
  std::string_view name;
  std::size_t offset;
  std::size_t size;
};

inline constexpr std::array<FeatureGroup, 5> kFeatureGroups = {{{"prompt", 0, 11},
                                                                {"session", 11, 8},
                                                                {"tool", 19, 6},
                                                                {"context", 25, 6},
                                                                {"fraud", 31, 11}}};

inline const FeatureGroup& feature_group(std::string_view name) {
  for (const auto& g : kFeatureGroups) {
    if (g.name == name) return g;
  }
  throw Error("unknown-group", std::string(name));
}

inline std::size_t feature_index(std::string_view name) {
  for (std::size_t i = 0; i < kFeatureCount; ++i) {
    if (kFeatureNames[i] == name) return i;
  }
  throw Error("unknown-feature", std::string(name));
}

// Normalization constants and caps. Clipping keeps long prompts or
// sessions from dominating split points.
struct FeatureConfig {
  double prompt_chars_scale = 1000.0;
  double prompt_tokens_scale = 200.0;
  double token_len_scale = 12.0;
  double turn_index_scale = 10.0;
  double external_len_scale = 2000.0;
  std::uint32_t since_external_cap = 5;
  std::uint32_t exfil_gap_cap = 8;
  std::uint32_t burst_window = 3;
  std::uint32_t ingestion_window = 2;
  std::string internal_domain = "corp.example";
  FeatureLexicons lexicons;
};

inline void to_json(nlohmann::json& j, const FeatureConfig& c) {
  j = {{"prompt_chars_scale", c.prompt_chars_scale},
       {"prompt_tokens_scale", c.prompt_tokens_scale},
       {"token_len_scale", c.token_len_scale},
       {"turn_index_scale", c.turn_index_scale},
       {"external_len_scale", c.external_len_scale},
       {"since_external_cap", c.since_external_cap},
       {"exfil_gap_cap", c.exfil_gap_cap},
       {"burst_window", c.burst_window},
       {"ingestion_window", c.ingestion_window},
       {"internal_domain", c.internal_domain},
       {"lexicons", c.lexicons}};
}

inline void from_json(const nlohmann::json& j, FeatureConfig& c) {
  c.prompt_chars_scale = j.value("prompt_chars_scale", c.prompt_chars_scale);
  c.prompt_tokens_scale = j.value("prompt_tokens_scale", c.prompt_tokens_scale);
  c.token_len_scale = j.value("token_len_scale", c.token_len_scale);
  c.turn_index_scale = j.value("turn_index_scale", c.turn_index_scale);
  c.external_len_scale = j.value("external_len_scale", c.external_len_scale);
  c.since_external_cap = j.value("since_external_cap", c.since_external_cap);
  c.exfil_gap_cap = j.value("exfil_gap_cap", c.exfil_gap_cap);
  c.burst_window = j.value("burst_window", c.burst_window);
  c.ingestion_window = j.value("ingestion_window", c.ingestion_window);
  c.internal_domain = j.value("internal_domain", c.internal_domain);
  if (j.contains("lexicons")) c.lexicons = j.at("lexicons").get<FeatureLexicons>();
}

// Directory part of a path including the trailing slash.
inline std::string path_prefix(std::string_view path) {
  const auto slash = path.rfind('/');
  return slash == std::string_view::npos ? std::string{} : std::string(path.substr(0, slash + 1));
}

// Recipients and path prefixes seen in benign training traffic; the
// reference for "never seen before" flags.
struct BenignProfile {
  std::set<std::string> known_recipients;
  std::set<std::string> known_path_prefixes;

  bool knows_recipient(std::string_view r) const {
    return known_recipients.contains(detail::ascii_lower(r));
  }
  bool knows_path(std::string_view path) const {
    return known_path_prefixes.contains(path_prefix(path));
  }
};

inline BenignProfile fit_profile(std::span<const Session> training) {
  BenignProfile profile;
  bool any_benign = false;
  for (const Session& s : training) {
    if (s.label != Label::benign) continue;
    any_benign = true;
    for (const Turn& t : s.turns) {
      if (t.action.tool == Tool::send_email) {
        profile.known_recipients.insert(detail::ascii_lower(email_recipient(t.action.argument)));
      } else if (t.action.tool == Tool::read_local_file) {
        profile.known_path_prefixes.insert(path_prefix(t.action.argument));
      }
    }
  }
  if (!any_benign) throw Error("empty-profile", "no benign sessions to fit the reference profile");
  return profile;
}

inline void to_json(nlohmann::json& j, const BenignProfile& p) {
  j = {{"known_recipients", p.known_recipients}, {"known_path_prefixes", p.known_path_prefixes}};
}

inline void from_json(const nlohmann::json& j, BenignProfile& p) {
  p.known_recipients = j.at("known_recipients").get<std::set<std::string>>();
  p.known_path_prefixes = j.at("known_path_prefixes").get<std::set<std::string>>();
}

// Per-session accumulator. Single writer; copyable.
struct SessionState {
  std::uint32_t turn_counter = 0;
  std::uint32_t repeat_count = 0;
  std::uint32_t denied_count = 0;  // outcomes of already-completed turns
  std::uint32_t failed_count = 0;
  bool pending_denied = false;  // outcome of the latest turn, folded in next update
  bool pending_failed = false;
  std::unordered_set<std::string> seen_actions;
  std::unordered_set<std::string> prompt_vocabulary;
  std::array<std::uint32_t, kToolCount> tool_counts{};
  double cum_risk = 0.0;
  double last_risk = 0.0;
  bool nondecreasing = true;
  bool any_increase = false;
  std::array<Tool, 8> recent_tools{};  // ring buffer
  std::uint32_t last_external_turn = 0;  // 0 = never
  std::uint32_t external_turn_count = 0;
  std::uint32_t first_sensitive_read = 0;  // 0 = none yet
  std::optional<std::uint32_t> exfil_gap;
  std::uint32_t high_risk_count = 0;
  std::uint32_t sensitive_read_count = 0;
  std::uint32_t external_send_count = 0;
};

namespace detail {

inline const std::array<std::vector<std::string>, kToolCount>& tool_verbs() {
  static const std::array<std::vector<std::string>, kToolCount> verbs = {{
      {"fetch", "browse", "download", "visit"},
      {"summarize", "summarise", "summary", "condense"},
      {"read", "open", "load"},
      {"send", "email", "mail", "forward"},
      {"run", "execute", "exec"},
  }};
  return verbs;
}

inline std::size_t count_substr(std::string_view text, std::string_view needle) {
  std::size_t n = 0;
  for (auto pos = text.find(needle); pos != std::string_view::npos; pos = text.find(needle, pos + 1)) ++n;
  return n;
}

inline bool has_code_block(std::string_view text) {
  if (text.find("```") != std::string_view::npos || text.find('`') != std::string_view::npos) return true;
  std::size_t line_start = 0;
  while (line_start <= text.size()) {
    const auto rest = text.substr(line_start);
    const auto first = rest.find_first_not_of(" \t");
    if (first != std::string_view::npos && rest.substr(first).starts_with("$ ")) return true;
    const auto nl = text.find('\n', line_start);
    if (nl == std::string_view::npos) break;
    line_start = nl + 1;
  }
  return false;
}

inline std::string action_key(const ProposedAction& a) {
  return std::string(tool_name(a.tool)) + '\x1f' + a.argument;
}

}  // namespace detail

// Features that depend only on the current turn's prompt.
inline void fill_prompt_features(std::span<double, 11> out, const std::string& prompt,
                                 const std::vector<std::string>& tokens, const FeatureConfig& cfg) {
  const auto& lex = cfg.lexicons;
  std::size_t ws_tokens = 0;
  std::size_t ws_chars = 0;
  {
    std::size_t i = 0;
    while (i < prompt.size()) {
      while (i < prompt.size() && std::isspace(static_cast<unsigned char>(prompt[i]))) ++i;
      const std::size_t start = i;
      while (i < prompt.size() && !std::isspace(static_cast<unsigned char>(prompt[i]))) ++i;
      if (i > start) {
        ++ws_tokens;
        ws_chars += i - start;
      }
    }
  }
  const std::string joined = joined_tokens(tokens);
  const double mean_len = ws_tokens ? static_cast<double>(ws_chars) / static_cast<double>(ws_tokens) : 0.0;
  out[0] = std::min(static_cast<double>(prompt.size()) / cfg.prompt_chars_scale, 1.0);
  out[1] = std::min(static_cast<double>(ws_tokens) / cfg.prompt_tokens_scale, 1.0);
  out[2] = std::min(mean_len / cfg.token_len_scale, 1.0);
  out[3] = static_cast<double>(count_matches(tokens, lex.suspicious));
  out[4] = contains_phrase(joined, lex.override_phrases) ? 1.0 : 0.0;
  out[5] = contains_phrase(joined, lex.conflict_phrases) ? 1.0 : 0.0;
  out[6] = count_matches(tokens, lex.privilege) > 0 ? 1.0 : 0.0;
  out[7] = static_cast<double>(count_matches(tokens, lex.secret));
  out[8] = static_cast<double>(detail::count_substr(prompt, "http://") + detail::count_substr(prompt, "https://"));
  out[9] = detail::has_code_block(prompt) ? 1.0 : 0.0;
  out[10] = static_cast<double>(count_matches(tokens, lex.imperative));
}

// 1 when the prompt names some tool's verb but not the proposed tool's.
inline double task_tool_mismatch(Tool tool, const std::vector<std::string>& tokens) {
  const auto& verbs = detail::tool_verbs();
  bool own = false;
  bool other = false;
  for (Tool t : kAllTools) {
    bool present = false;
    for (const auto& tok : tokens) {
      if (in_lexicon(tok, verbs[static_cast<std::size_t>(t)])) {
        present = true;
        break;
      }
    }
    if (!present) continue;
    (t == tool ? own : other) = true;
  }
  return (!own && other) ? 1.0 : 0.0;
}

inline bool external_is_suspicious(const std::string& content, const FeatureLexicons& lex) {
  const auto tokens = word_tokens(content);
  return count_matches(tokens, lex.suspicious) > 0 ||
         contains_phrase(joined_tokens(tokens), lex.override_phrases);
}

// Advances `state` by one turn and returns z_t. Throws
// Error("non-contiguous-turn") and leaves `state` untouched when the turn
// index is not exactly one past the last processed turn.
inline FeatureVector update(SessionState& state, const Turn& turn, const BenignProfile& profile,
                            const FeatureConfig& cfg = {}) {
  if (turn.index != state.turn_counter + 1) {
    throw Error("non-contiguous-turn", "expected turn " + std::to_string(state.turn_counter + 1) +
                                           ", got " + std::to_string(turn.index));
  }
  const std::uint32_t t = turn.index;
  const Tool tool = turn.action.tool;
  const double risk = tool_risk(tool);
  FeatureVector z{};

  // Outcomes of earlier turns become visible now.
  state.denied_count += state.pending_denied ? 1 : 0;
  state.failed_count += state.pending_failed ? 1 : 0;

  // prompt
  const auto tokens = word_tokens(turn.prompt);
  fill_prompt_features(std::span<double, 11>(z.data(), 11), turn.prompt, tokens, cfg);

  // session
  if (!state.seen_actions.insert(detail::action_key(turn.action)).second) ++state.repeat_count;
  const bool has_external = turn.external_content.has_value();
  const std::uint32_t prev_external_turn = state.last_external_turn;
  if (has_external) {
    state.last_external_turn = t;
    ++state.external_turn_count;
  }
  double drift = 0.0;
  if (t > 1) {
    const std::unordered_set<std::string> current(tokens.begin(), tokens.end());
    std::size_t shared = 0;
    for (const auto& tok : current) shared += state.prompt_vocabulary.contains(tok) ? 1 : 0;
    const std::size_t uni = current.size() + state.prompt_vocabulary.size() - shared;
    drift = uni == 0 ? 0.0 : 1.0 - static_cast<double>(shared) / static_cast<double>(uni);
  }
  state.prompt_vocabulary.insert(tokens.begin(), tokens.end());
  ++state.tool_counts[static_cast<std::size_t>(tool)];
  std::uint32_t distinct = 0;
  std::uint32_t max_usage = 0;
  for (auto c : state.tool_counts) {
    distinct += c > 0 ? 1 : 0;
    max_usage = std::max(max_usage, c);
  }
  z[11] = std::min(static_cast<double>(t) / cfg.turn_index_scale, 1.0);
  z[12] = state.repeat_count;
  z[13] = state.denied_count;
  z[14] = state.failed_count;
  z[15] = state.last_external_turn == 0
              ? cfg.since_external_cap
              : std::min<std::uint32_t>(t - state.last_external_turn, cfg.since_external_cap);
  z[16] = drift;
  z[17] = distinct;
  z[18] = max_usage;

  // tool
  z[19 + static_cast<std::size_t>(tool)] = 1.0;
  z[24] = task_tool_mismatch(tool, tokens);

  // context
  const bool sensitive = touches_sensitive_resource(turn);
  const bool recent_external =
      has_external || (prev_external_turn != 0 && t - prev_external_turn < cfg.ingestion_window);
  z[25] = has_external ? 1.0 : 0.0;
  z[26] = has_external && external_is_suspicious(*turn.external_content, cfg.lexicons) ? 1.0 : 0.0;
  z[27] = sensitive ? 1.0 : 0.0;
  z[28] = risk >= kHighRiskCutoff && recent_external ? 1.0 : 0.0;
  z[29] = has_external
              ? std::min(static_cast<double>(turn.external_content->size()) / cfg.external_len_scale, 1.0)
              : 0.0;
  z[30] = state.external_turn_count;

  // fraud
  const double delta = t == 1 ? 0.0 : risk - state.last_risk;
  if (t > 1) {
    state.nondecreasing = state.nondecreasing && delta >= 0.0;
    state.any_increase = state.any_increase || delta > 0.0;
  }
  state.cum_risk += risk;
  state.last_risk = risk;
  state.recent_tools[(t - 1) % state.recent_tools.size()] = tool;
  std::uint32_t burst = 0;
  const std::uint32_t window = std::min<std::uint32_t>(cfg.burst_window, static_cast<std::uint32_t>(state.recent_tools.size()));
  for (std::uint32_t k = 0; k < window && k < t; ++k) {
    burst += is_high_risk(state.recent_tools[(t - 1 - k) % state.recent_tools.size()]) ? 1 : 0;
  }
  bool external_send = false;
  double recipient_novel = 0.0;
  double path_novel = 0.0;
  if (tool == Tool::send_email) {
    const auto recipient = email_recipient(turn.action.argument);
    external_send = is_external_recipient(recipient, LabelConfig{cfg.internal_domain});
    recipient_novel = profile.knows_recipient(recipient) ? 0.0 : 1.0;
  } else if (tool == Tool::read_local_file) {
    path_novel = profile.knows_path(turn.action.argument) ? 0.0 : 1.0;
  }
  if (tool == Tool::read_local_file && sensitive) {
    ++state.sensitive_read_count;
    if (state.first_sensitive_read == 0) state.first_sensitive_read = t;
  }
  if (external_send) {
    ++state.external_send_count;
    if (state.first_sensitive_read != 0 && !state.exfil_gap) state.exfil_gap = t - state.first_sensitive_read;
  }
  if (is_high_risk(tool)) ++state.high_risk_count;

  z[31] = state.cum_risk;
  z[32] = delta;
  z[33] = t > 1 && state.nondecreasing && state.any_increase ? 1.0 : 0.0;
  z[34] = static_cast<double>(burst) / static_cast<double>(cfg.burst_window);
  z[35] = recipient_novel;
  z[36] = path_novel;
  z[37] = std::min(state.exfil_gap.value_or(cfg.exfil_gap_cap), cfg.exfil_gap_cap);
  z[38] = state.high_risk_count;
  z[39] = state.sensitive_read_count;
  z[40] = state.external_send_count;
  z[41] = state.sensitive_read_count > 0 && state.external_send_count > 0 ? 1.0 : 0.0;

  state.pending_denied = turn.denied;
  state.pending_failed = turn.failed;
  state.turn_counter = t;
  return z;
}

// Streaming extractor bound to an immutable profile and configuration.
class FeatureExtractor {
 public:
  FeatureExtractor(const BenignProfile& profile, const FeatureConfig& config)
      : profile_(&profile), config_(&config) {}

  FeatureVector update(const Turn& turn) { return agentguard::update(state_, turn, *profile_, *config_); }
  const SessionState& state() const noexcept { return state_; }

 private:
  const BenignProfile* profile_;
  const FeatureConfig* config_;
  SessionState state_;
};

inline std::vector<FeatureVector> extract_session(const Session& session, const BenignProfile& profile,
                                                  const FeatureConfig& config = {}) {
  std::vector<FeatureVector> out;
  out.reserve(session.turns.size());
  SessionState state;
  for (const Turn& t : session.turns) out.push_back(update(state, t, profile, config));
  return out;
}

// ---- feature-matrix CSV ----------------------------------------------------

// Shortest decimal that round-trips to the same double.
inline std::string format_double(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

struct FeatureRow {
  std::string session_id;
  std::uint32_t turn = 0;
  int label = 0;
  std::string family;  // empty for benign
  FeatureVector z{};
};

inline void write_feature_header(std::ostream& out) {
  out << "session_id,turn,label,family";
  for (auto name : kFeatureNames) out << ',' << name;
  out << '\n';
}

inline void write_feature_row(std::ostream& out, const FeatureRow& row) {
  out << row.session_id << ',' << row.turn << ',' << row.label << ',' << row.family;
  for (double v : row.z) out << ',' << format_double(v);
  out << '\n';
}

inline std::vector<FeatureRow> extract_rows(std::span<const Session> sessions, const BenignProfile& profile,
                                            const FeatureConfig& config = {}) {
  std::vector<FeatureRow> rows;
  for (const Session& s : sessions) {
    const auto zs = extract_session(s, profile, config);
    const int y = s.label == Label::adversarial ? 1 : 0;
    const std::string fam = s.family ? std::string(family_name(*s.family)) : std::string{};
    for (std::size_t i = 0; i < zs.size(); ++i) {
      rows.push_back({s.session_id, s.turns[i].index, y, fam, zs[i]});
    }
  }
  return rows;
}

inline std::vector<FeatureRow> read_feature_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) return {};
  {
    std::string expected = "session_id,turn,label,family";
    for (auto name : kFeatureNames) (expected += ',') += name;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != expected) throw Error("malformed-features", "unexpected CSV header");
  }
  std::vector<FeatureRow> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string_view> cells;
    std::string_view rest(line);
    while (true) {
      const auto comma = rest.find(',');
      cells.push_back(rest.substr(0, comma));
      if (comma == std::string_view::npos) break;
      rest.remove_prefix(comma + 1);
    }
    if (cells.size() != 4 + kFeatureCount) {
      throw Error("malformed-features", "line " + std::to_string(line_no) + ": wrong column count");
    }
    FeatureRow row;
    row.session_id = cells[0];
    row.family = cells[3];
    auto parse_num = [&](std::string_view cell, auto& value) {
      const auto res = std::from_chars(cell.data(), cell.data() + cell.size(), value);
      if (res.ec != std::errc{} || res.ptr != cell.data() + cell.size()) {
        throw Error("malformed-features", "line " + std::to_string(line_no) + ": bad number");
      }
    };
    parse_num(cells[1], row.turn);
    parse_num(cells[2], row.label);
    for (std::size_t k = 0; k < kFeatureCount; ++k) parse_num(cells[4 + k], row.z[k]);
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace agentguard
