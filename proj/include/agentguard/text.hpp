#pragma once

// Word tokenization and the keyword lexicons shared by the prompt/context
// features and the rule-filter baseline.

#include <cctype>
#include <istream>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "agentguard/error.hpp"

namespace agentguard {

// Lowercased maximal runs of ASCII letters/digits. '_', '/', '.' and the
// like are separators, so "/secrets/api_keys.txt" yields
// {secrets, api, keys, txt}.
inline std::vector<std::string> word_tokens(std::string_view text) {
  std::vector<std::string> tokens;
  std::string current;
  for (unsigned char c : text) {
    if (std::isalnum(c)) {
      current.push_back(static_cast<char>(std::tolower(c)));
    } else if (!current.empty()) {
      tokens.push_back(std::move(current));
      current.clear();
    }
  }
  if (!current.empty()) tokens.push_back(std::move(current));
  return tokens;
}

// A lexicon term matches a token exactly or with a plural "s".
inline bool term_matches(std::string_view token, std::string_view term) noexcept {
  if (token == term) return true;
  return token.size() == term.size() + 1 && token.back() == 's' && token.starts_with(term);
}

inline bool in_lexicon(std::string_view token, const std::vector<std::string>& lexicon) noexcept {
  for (const auto& term : lexicon) {
    if (term_matches(token, term)) return true;
  }
  return false;
}

inline std::size_t count_matches(const std::vector<std::string>& tokens,
                                 const std::vector<std::string>& lexicon) noexcept {
  std::size_t n = 0;
  for (const auto& tok : tokens) n += in_lexicon(tok, lexicon) ? 1 : 0;
  return n;
}

// Phrases are matched against the space-joined token stream, so
// punctuation and case never matter.
inline std::string joined_tokens(const std::vector<std::string>& tokens) {
  std::string out = " ";
  for (const auto& t : tokens) {
    out += t;
    out += ' ';
  }
  return out;
}

inline bool contains_phrase(const std::string& joined, const std::vector<std::string>& phrases) {
  for (const auto& p : phrases) {
    if (joined.find(' ' + p + ' ') != std::string::npos) return true;
  }
  return false;
}

struct FeatureLexicons {
  std::vector<std::string> suspicious = {"ignore", "override", "bypass",  "jailbreak",  "secret",
                                         "password", "token",  "credential", "sudo", "exfiltrate"};
  std::vector<std::string> override_phrases = {
      "ignore previous", "ignore all previous", "ignore prior", "ignore the previous",
      "disregard instructions", "disregard previous", "disregard all", "disregard the previous",
      "forget your instructions", "override the policy", "override policy"};
  std::vector<std::string> conflict_phrases = {"you are now", "as the system", "system prompt",
                                               "new instructions", "act as", "your instructions",
                                               "you must obey", "developer mode"};
  std::vector<std::string> privilege = {"sudo", "admin", "root"};
  std::vector<std::string> secret = {"secret", "password", "token", "credential", "key", "private"};
  std::vector<std::string> imperative = {"send", "read", "run", "delete", "execute"};
};

// Rule-filter term classes.
struct RuleLexicon {
  std::vector<std::string> override_terms = {"ignore", "override", "disregard", "bypass", "jailbreak"};
  std::vector<std::string> secret_terms = {"secret", "password", "credential", "token", "key"};
  std::vector<std::string> action_terms = {"send", "exfiltrate", "execute", "run", "delete"};

  // Class-sectioned text, one term per line:
  //   [override]
  //   ignore
  //   [secret]
  //   ...
  // '#' starts a comment. Sections present in the file replace the
  // defaults; absent sections keep them.
  static RuleLexicon parse(std::istream& in) {
    RuleLexicon lex;
    std::vector<std::string>* section = nullptr;
    std::set<std::string> seen;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      const auto b = line.find_first_not_of(" \t\r");
      if (b == std::string::npos) continue;
      const auto e = line.find_last_not_of(" \t\r");
      std::string item = line.substr(b, e - b + 1);
      if (item.front() == '[') {
        if (item == "[override]") {
          section = &lex.override_terms;
        } else if (item == "[secret]") {
          section = &lex.secret_terms;
        } else if (item == "[action]") {
          section = &lex.action_terms;
        } else {
          throw Error("malformed-lexicon", "line " + std::to_string(line_no) + ": unknown section " + item);
        }
        if (seen.insert(item).second) section->clear();
        continue;
      }
      if (section == nullptr) {
        throw Error("malformed-lexicon", "line " + std::to_string(line_no) + ": term before any section");
      }
      for (char& c : item) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
      section->push_back(std::move(item));
    }
    return lex;
  }

  static RuleLexicon parse(std::string_view text) {
    std::istringstream in{std::string(text)};
    return parse(in);
  }
};

inline void to_json(nlohmann::json& j, const FeatureLexicons& l) {
  j = {{"suspicious", l.suspicious}, {"override_phrases", l.override_phrases},
       {"conflict_phrases", l.conflict_phrases}, {"privilege", l.privilege},
       {"secret", l.secret}, {"imperative", l.imperative}};
}

inline void from_json(const nlohmann::json& j, FeatureLexicons& l) {
  l.suspicious = j.value("suspicious", l.suspicious);
  l.override_phrases = j.value("override_phrases", l.override_phrases);
  l.conflict_phrases = j.value("conflict_phrases", l.conflict_phrases);
  l.privilege = j.value("privilege", l.privilege);
  l.secret = j.value("secret", l.secret);
  l.imperative = j.value("imperative", l.imperative);
}

inline void to_json(nlohmann::json& j, const RuleLexicon& l) {
  j = {{"override", l.override_terms}, {"secret", l.secret_terms}, {"action", l.action_terms}};
}

inline void from_json(const nlohmann::json& j, RuleLexicon& l) {
  l.override_terms = j.value("override", l.override_terms);
  l.secret_terms = j.value("secret", l.secret_terms);
  l.action_terms = j.value("action", l.action_terms);
}

}  // namespace agentguard
