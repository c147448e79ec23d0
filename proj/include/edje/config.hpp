#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace edje {

/// Line-oriented `section.key = value` file. `#` starts a comment; blank
/// lines are ignored. Keys must contain a dot and appear at most once.
class ConfigFile {
 public:
  static ConfigFile parse(std::string_view text, const std::string& origin = "<config>");
  static ConfigFile load(const std::string& path);

  const std::vector<std::pair<std::string, std::string>>& entries() const noexcept { return entries_; }
  const std::string* find(const std::string& key) const;
  /// Line number of `key`, 0 for keys added with set().
  std::size_t line_of(const std::string& key) const;
  const std::string& origin() const noexcept { return origin_; }
  /// Replaces or appends.
  void set(const std::string& key, const std::string& value);

 private:
  std::string origin_;
  std::vector<std::pair<std::string, std::string>> entries_;
  std::vector<std::size_t> lines_;
};

std::size_t parse_size(const std::string& key, const std::string& value);
std::uint64_t parse_u64(const std::string& key, const std::string& value);
double parse_double(const std::string& key, const std::string& value);
bool parse_bool(const std::string& key, const std::string& value);

/// Shortest text that parses back to the same double.
std::string format_double(double v);

/// 16 hex digits of FNV-1a 64.
std::string hash_hex(std::string_view text);

}  // namespace edje
