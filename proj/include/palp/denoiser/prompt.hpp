#pragma once

#include <algorithm>
#include <cstdint>
#include <ostream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace palp {

inline constexpr std::string_view kNullToken = "<null>";

/// Placeholder tokens are written in square brackets, e.g. "[V]" or "[V1]".
inline bool is_placeholder(std::string_view token) {
  return token.size() >= 3 && token.front() == '[' && token.back() == ']';
}

enum class PromptRole : std::uint8_t { kTarget, kClean, kPersonalization, kNull };

/// Ordered token list. Encoding is order-free, but the order is kept for
/// display and serialization.
struct Prompt {
  std::vector<std::string> tokens;
  PromptRole role = PromptRole::kTarget;

  static Prompt null() { return Prompt{{std::string(kNullToken)}, PromptRole::kNull}; }

  bool has_placeholder() const {
    return std::any_of(tokens.begin(), tokens.end(),
                       [](const std::string& t) { return is_placeholder(t); });
  }

  bool is_null() const { return role == PromptRole::kNull; }

  std::string str() const {
    std::string out = "(";
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      if (i) out += ", ";
      out += tokens[i];
    }
    return out + ")";
  }

  friend bool operator==(const Prompt&, const Prompt&) = default;
};

/// Parses "sketch,[V]" or "sketch [V]" into tokens.
inline std::vector<std::string> split_tokens(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (char c : text) {
    if (c == ',' || c == ' ' || c == '\t' || c == '(' || c == ')') {
      flush();
    } else {
      cur.push_back(c);
    }
  }
  flush();
  return out;
}

inline Prompt make_prompt(std::vector<std::string> tokens, PromptRole role = PromptRole::kTarget) {
  return Prompt{std::move(tokens), role};
}

inline Prompt parse_prompt(std::string_view text, PromptRole role = PromptRole::kTarget) {
  return Prompt{split_tokens(text), role};
}

inline std::ostream& operator<<(std::ostream& os, const Prompt& p) { return os << p.str(); }

}  // namespace palp
