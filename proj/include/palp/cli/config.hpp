#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "palp/diffcore/tensor.hpp"

namespace palp::cli {

/// Bad flag, unknown key, unreadable file or malformed value. Maps to exit 1.
struct ConfigError : Error {
  using Error::Error;
};

struct KeySpec {
  std::string key;       // as written in config files
  std::string fallback;  // built-in default
  std::string help;
};

/// Flat key=value configuration. Layers are applied in order (defaults, file,
/// flags), later layers winning; `origin()` reports which layer set a key.
class Config {
 public:
  explicit Config(std::vector<KeySpec> keys) : keys_(std::move(keys)) {
    for (const auto& k : keys_) set(k.key, k.fallback, "default");
  }

  const std::vector<KeySpec>& keys() const noexcept { return keys_; }

  bool known(const std::string& key) const {
    return std::any_of(keys_.begin(), keys_.end(), [&](const KeySpec& k) { return k.key == key; });
  }

  void set(const std::string& key, const std::string& value, const std::string& origin) {
    if (!known(key)) throw ConfigError("unknown config key '" + key + "'");
    values_[key] = value;
    origins_[key] = origin;
  }

  /// Parses "key = value" lines; '#' starts a comment, blank lines are skipped.
  void merge_text(const std::string& text, const std::string& origin) {
    std::istringstream is(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      line = trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos)
        throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key = value");
      const std::string key = trim(line.substr(0, eq));
      if (!known(key)) throw ConfigError(origin + ":" + std::to_string(lineno) + ": unknown key '" + key + "'");
      set(key, trim(line.substr(eq + 1)), origin);
    }
  }

  void merge_file(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot read config file " + path.string());
    std::stringstream ss;
    ss << f.rdbuf();
    merge_text(ss.str(), path.string());
  }

  const std::string& str(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
    return it->second;
  }

  const std::string& origin(const std::string& key) const { return origins_.at(key); }

  double num(const std::string& key) const {
    const std::string& s = str(key);
    double v = 0.0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size() || !std::isfinite(v))
      throw ConfigError(key + ": expected a number, got '" + s + "'");
    return v;
  }

  std::uint64_t uint(const std::string& key) const { return parse_uint(key, str(key)); }

  bool flag(const std::string& key) const { return parse_bool(key, str(key)); }

  std::vector<std::string> list(const std::string& key) const {
    std::vector<std::string> out;
    std::string cur;
    for (char c : str(key) + ",") {
      if (c == ',') {
        if (auto t = trim(cur); !t.empty()) out.push_back(t);
        cur.clear();
      } else {
        cur.push_back(c);
      }
    }
    return out;
  }

  std::vector<std::uint64_t> uint_list(const std::string& key) const {
    std::vector<std::uint64_t> out;
    for (const auto& s : list(key)) out.push_back(parse_uint(key, s));
    return out;
  }

  std::vector<bool> bool_list(const std::string& key) const {
    std::vector<bool> out;
    for (const auto& s : list(key)) out.push_back(parse_bool(key, s));
    return out;
  }

  /// Canonical "key=value" lines in key order, minus `skip`; the config hash
  /// is taken over this.
  std::string canonical(const std::vector<std::string>& skip = {}) const {
    std::string out;
    for (const auto& [k, v] : values_)
      if (std::find(skip.begin(), skip.end(), k) == skip.end()) out += k + "=" + v + "\n";
    return out;
  }

  const std::map<std::string, std::string>& values() const noexcept { return values_; }

  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
  }

  static bool parse_bool(const std::string& key, const std::string& s) {
    if (s == "1" || s == "true" || s == "on" || s == "yes") return true;
    if (s == "0" || s == "false" || s == "off" || s == "no") return false;
    throw ConfigError(key + ": expected a boolean, got '" + s + "'");
  }

  static std::uint64_t parse_uint(const std::string& key, const std::string& s) {
    std::uint64_t v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size() || s.empty())
      throw ConfigError(key + ": expected a non-negative integer, got '" + s + "'");
    return v;
  }

 private:
  std::vector<KeySpec> keys_;
  std::map<std::string, std::string> values_;
  std::map<std::string, std::string> origins_;
};

}  // namespace palp::cli
