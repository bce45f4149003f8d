#pragma once

#include <algorithm>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "palp/denoiser/prompt.hpp"
#include "palp/diffcore/rng.hpp"
#include "palp/diffcore/tape.hpp"

namespace palp {

/// Token vocabulary with one conditioning row per token. Placeholder rows are
/// appended during personalization and remember the class token they stand for.
class EmbeddingTable {
 public:
  EmbeddingTable() = default;

  EmbeddingTable(std::vector<std::string> tokens, Tensor rows,
                 std::map<std::string, std::string> placeholder_class = {})
      : tokens_(std::move(tokens)), rows_(std::move(rows)),
        placeholder_class_(std::move(placeholder_class)) {
    if (rows_.rank() != 2 || rows_.shape()[0] != tokens_.size()) {
      throw ShapeError("embedding rows " + shape_str(rows_.shape()) + " do not match " +
                       std::to_string(tokens_.size()) + " tokens");
    }
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      if (!index_.emplace(tokens_[i], i).second) throw Error("duplicate token " + tokens_[i]);
    }
  }

  /// Random rows; the null token is always present.
  static EmbeddingTable random(std::vector<std::string> tokens, std::size_t width, Rng& rng,
                               double stddev = 1.0) {
    if (std::find(tokens.begin(), tokens.end(), kNullToken) == tokens.end()) {
      tokens.emplace_back(kNullToken);
    }
    Tensor rows = rng.normal_tensor({tokens.size(), width}, stddev);
    return EmbeddingTable(std::move(tokens), std::move(rows));
  }

  std::size_t size() const noexcept { return tokens_.size(); }
  std::size_t width() const { return rows_.shape()[1]; }
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }
  const Tensor& rows() const noexcept { return rows_; }
  Tensor& rows() noexcept { return rows_; }
  const std::map<std::string, std::string>& placeholder_classes() const noexcept {
    return placeholder_class_;
  }

  bool contains(const std::string& token) const { return index_.count(token) != 0; }

  std::size_t index(const std::string& token) const {
    auto it = index_.find(token);
    if (it == index_.end()) throw Error("unknown token '" + token + "'");
    return it->second;
  }

  std::span<const double> row(const std::string& token) const { return rows_.row(index(token)); }

  /// Appends a placeholder whose row starts as a copy of `class_token`'s row.
  void add_placeholder(const std::string& name, const std::string& class_token) {
    if (!is_placeholder(name)) throw Error("placeholder names are bracketed, got " + name);
    if (contains(name)) throw Error("placeholder already registered: " + name);
    const std::size_t src = index(class_token);
    const std::size_t v = tokens_.size(), w = width();
    std::vector<double> data = rows_.storage();
    data.insert(data.end(), data.begin() + static_cast<std::ptrdiff_t>(src * w),
                data.begin() + static_cast<std::ptrdiff_t>((src + 1) * w));
    rows_ = Tensor({v + 1, w}, std::move(data));
    tokens_.push_back(name);
    index_.emplace(name, v);
    placeholder_class_[name] = class_token;
  }

  std::vector<std::size_t> placeholder_rows() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < tokens_.size(); ++i)
      if (is_placeholder(tokens_[i])) out.push_back(i);
    return out;
  }

  std::vector<std::size_t> regular_rows() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < tokens_.size(); ++i)
      if (!is_placeholder(tokens_[i])) out.push_back(i);
    return out;
  }

  const std::string& class_of(const std::string& placeholder) const {
    auto it = placeholder_class_.find(placeholder);
    if (it == placeholder_class_.end()) {
      throw Error("no class token registered for placeholder " + placeholder);
    }
    return it->second;
  }

  std::vector<std::size_t> indices(const Prompt& p) const {
    if (p.tokens.empty()) throw Error("empty prompt");
    std::vector<std::size_t> out;
    out.reserve(p.tokens.size());
    for (const auto& t : p.tokens) out.push_back(index(t));
    return out;
  }

 private:
  std::vector<std::string> tokens_;
  std::map<std::string, std::size_t> index_;
  Tensor rows_{Shape{0, 0}};
  std::map<std::string, std::string> placeholder_class_;
};

/// Replaces every placeholder with its registered class token.
inline Prompt clean_prompt(const Prompt& target, const EmbeddingTable& table) {
  Prompt out{{}, PromptRole::kClean};
  for (const auto& t : target.tokens) out.tokens.push_back(is_placeholder(t) ? table.class_of(t) : t);
  return out;
}

/// Mean of the token rows for a batch of prompts, recorded on `tape`. `table_var`
/// must be the tape binding of `table.rows()`.
inline Var encode_prompts(Var table_var, const EmbeddingTable& table,
                          std::span<const Prompt> prompts) {
  IndexGroups groups;
  groups.reserve(prompts.size());
  for (const Prompt& p : prompts) groups.push_back(table.indices(p));
  return embed_mean(table_var, std::move(groups));
}

/// Order-free bag encoding of a single prompt.
inline Tensor encode_prompt(const Prompt& p, const EmbeddingTable& table) {
  Tape tape;
  const Prompt one[] = {p};
  return encode_prompts(tape.frozen(table.rows()), table, one).value().reshaped({table.width()});
}

}  // namespace palp
