#pragma once

// "key=value" text: one pair per line, '#' starts a comment, blank lines
// ignored. Used for run configs and checkpoint manifests.

#include <charconv>
#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "synfuse/error.hpp"
#include "synfuse/text.hpp"

namespace synfuse {

class KeyValues {
 public:
  static KeyValues parse(std::istream& in) {
    KeyValues kv;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      text::strip_cr(line);
      if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      const auto trimmed = text::trim(line);
      if (trimmed.empty()) continue;
      const auto eq = trimmed.find('=');
      if (eq == std::string_view::npos) throw UsageError("config line " + std::to_string(lineno) + ": expected key=value");
      const std::string key(text::trim(trimmed.substr(0, eq)));
      if (key.empty()) throw UsageError("config line " + std::to_string(lineno) + ": empty key");
      kv.values_[key] = std::string(text::trim(trimmed.substr(eq + 1)));
    }
    return kv;
  }

  static KeyValues parse(const std::string& body) {
    std::istringstream in(body);
    return parse(in);
  }

  static KeyValues load_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw UsageError("cannot open config " + path);
    return parse(in);
  }

  std::string serialize() const {
    std::string out;
    for (const auto& [k, v] : values_) out += k + "=" + v + "\n";
    return out;
  }

  bool has(const std::string& key) const { return values_.count(key) > 0; }
  void set_string(const std::string& key, const std::string& value) { values_[key] = value; }
  void set_double(const std::string& key, double value) {
    std::ostringstream os;
    os.precision(17);
    os << value;
    values_[key] = os.str();
  }
  void set_size(const std::string& key, std::size_t value) { values_[key] = std::to_string(value); }
  void set_bool(const std::string& key, bool value) { values_[key] = value ? "true" : "false"; }

  const std::map<std::string, std::string>& values() const { return values_; }

  std::string get(const std::string& key, const std::string& fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }

  std::string require(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw UsageError("missing config key " + key);
    return it->second;
  }

  std::size_t get_size(const std::string& key, std::size_t fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    std::uint64_t v = 0;
    const auto& s = it->second;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size()) throw UsageError("config key " + key + ": not an integer: " + s);
    return static_cast<std::size_t>(v);
  }

  double get_double(const std::string& key, double fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    try {
      std::size_t used = 0;
      const double v = std::stod(it->second, &used);
      if (used != it->second.size()) throw std::invalid_argument(key);
      return v;
    } catch (const std::exception&) {
      throw UsageError("config key " + key + ": not a number: " + it->second);
    }
  }

  bool get_bool(const std::string& key, bool fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    const auto& s = it->second;
    if (s == "true" || s == "1" || s == "yes") return true;
    if (s == "false" || s == "0" || s == "no") return false;
    throw UsageError("config key " + key + ": not a boolean: " + s);
  }

  std::vector<double> get_doubles(const std::string& key, std::vector<double> fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    std::vector<double> out;
    for (const auto& part : text::split(it->second, ',')) {
      const auto t = std::string(text::trim(part));
      if (t.empty()) continue;
      try {
        out.push_back(std::stod(t));
      } catch (const std::exception&) {
        throw UsageError("config key " + key + ": not a number list: " + it->second);
      }
    }
    return out;
  }

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace synfuse
