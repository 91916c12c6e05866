#pragma once

#include <stdexcept>
#include <string>

namespace agentguard {

// Every failure carries a stable machine-readable code ("empty-session",
// "non-contiguous-turn", ...) plus free-form detail for humans.
class Error : public std::runtime_error {
 public:
  explicit Error(std::string code, const std::string& detail = {})
      : std::runtime_error(detail.empty() ? code : code + ": " + detail),
        code_(std::move(code)) {}

  const std::string& code() const noexcept { return code_; }

 private:
  std::string code_;
};

}  // namespace agentguard
