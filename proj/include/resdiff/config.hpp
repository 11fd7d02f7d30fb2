#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>

namespace resdiff {

/// Flat `key = value` configuration text with dotted section prefixes
/// (`sampler.nfe = 200`). Later assignments win; `#` starts a comment.
class Config {
 public:
  static Config from_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("config: cannot open " + path);
    Config cfg;
    std::string line;
    int line_no = 0;
    while (std::getline(is, line)) {
      ++line_no;
      const std::size_t hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      const std::string trimmed = trim(line);
      if (trimmed.empty()) continue;
      const std::size_t eq = trimmed.find('=');
      if (eq == std::string::npos)
        throw std::runtime_error("config: " + path + ":" +
                                 std::to_string(line_no) + ": expected key = value");
      const std::string key = trim(trimmed.substr(0, eq));
      const std::string value = trim(trimmed.substr(eq + 1));
      if (key.empty())
        throw std::runtime_error("config: " + path + ":" +
                                 std::to_string(line_no) + ": empty key");
      cfg.kv_[key] = value;
    }
    return cfg;
  }

  void set(const std::string& key, const std::string& value) { kv_[key] = value; }
  bool has(const std::string& key) const { return kv_.count(key) != 0; }

  std::string get_string(const std::string& key, const std::string& fallback) const {
    const auto it = kv_.find(key);
    return it == kv_.end() ? fallback : it->second;
  }

  double get_double(const std::string& key, double fallback) const {
    const auto it = kv_.find(key);
    if (it == kv_.end()) return fallback;
    try {
      std::size_t pos = 0;
      const double v = std::stod(it->second, &pos);
      if (pos != it->second.size()) throw std::invalid_argument("trailing text");
      return v;
    } catch (const std::exception&) {
      throw std::runtime_error("config: key '" + key + "' has non-numeric value '" +
                               it->second + "'");
    }
  }

  std::int64_t get_int(const std::string& key, std::int64_t fallback) const {
    const auto it = kv_.find(key);
    if (it == kv_.end()) return fallback;
    try {
      std::size_t pos = 0;
      const std::int64_t v = std::stoll(it->second, &pos);
      if (pos != it->second.size()) throw std::invalid_argument("trailing text");
      return v;
    } catch (const std::exception&) {
      throw std::runtime_error("config: key '" + key + "' has non-integer value '" +
                               it->second + "'");
    }
  }

  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const {
    const auto it = kv_.find(key);
    if (it == kv_.end()) return fallback;
    try {
      std::size_t pos = 0;
      const std::uint64_t v = std::stoull(it->second, &pos);
      if (pos != it->second.size()) throw std::invalid_argument("trailing text");
      return v;
    } catch (const std::exception&) {
      throw std::runtime_error("config: key '" + key + "' has non-integer value '" +
                               it->second + "'");
    }
  }

  bool get_bool(const std::string& key, bool fallback) const {
    const auto it = kv_.find(key);
    if (it == kv_.end()) return fallback;
    if (it->second == "true" || it->second == "1") return true;
    if (it->second == "false" || it->second == "0") return false;
    throw std::runtime_error("config: key '" + key + "' has non-boolean value '" +
                             it->second + "'");
  }

  const std::map<std::string, std::string>& entries() const { return kv_; }

  /// Sorted `key = value` lines; a dump re-parses to an equal Config.
  void dump(std::ostream& os) const {
    for (const auto& [key, value] : kv_) os << key << " = " << value << "\n";
  }

 private:
  static std::string trim(const std::string& s) {
    const std::size_t lo = s.find_first_not_of(" \t\r\n");
    if (lo == std::string::npos) return "";
    const std::size_t hi = s.find_last_not_of(" \t\r\n");
    return s.substr(lo, hi - lo + 1);
  }

  std::map<std::string, std::string> kv_;
};

}  // namespace resdiff
