#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace pulseppg {

// Flat `key = value` document; '#' starts a comment. Keys are dotted paths.
class KeyValues {
 public:
  static KeyValues parse(const std::string& text, const std::string& origin = "<string>");
  static KeyValues load(const std::filesystem::path& file);

  void set(const std::string& key, const std::string& value) { entries_[key] = value; }
  bool has(const std::string& key) const { return entries_.count(key) != 0; }
  const std::string& get(const std::string& key) const;
  std::string get_or(const std::string& key, const std::string& fallback) const;

  double get_double(const std::string& key) const;
  long get_int(const std::string& key) const;
  bool get_bool(const std::string& key) const;

  const std::map<std::string, std::string>& entries() const { return entries_; }
  std::string dump() const;
  void save(const std::filesystem::path& file) const;

 private:
  std::map<std::string, std::string> entries_;
};

std::vector<std::string> split_list(const std::string& text, char sep = ',');
std::string trim(const std::string& text);

// Write-temp-then-rename so readers never observe a partial file.
void write_file_atomic(const std::filesystem::path& file, const std::string& contents);

}  // namespace pulseppg
