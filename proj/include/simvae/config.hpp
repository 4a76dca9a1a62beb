#pragma once

#include <filesystem>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace simvae {

using Json = nlohmann::ordered_json;

class ConfigError : public std::runtime_error {
 public:
  ConfigError(const std::string& key, const std::string& message)
      : std::runtime_error(message), key_(key) {}
  const std::string& key() const { return key_; }

 private:
  std::string key_;
};

// Reads one object-valued config section and rejects keys nobody asked for.
class ConfigSection {
 public:
  ConfigSection(const Json& node, std::string path);

  bool has(const std::string& key) const;

  template <typename T>
  T get(const std::string& key, const T& fallback) {
    seen_.insert(key);
    if (!node_.contains(key)) return fallback;
    try {
      return node_.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(qualified(key), "config key '" + qualified(key) + "' has the wrong type: " + e.what());
    }
  }

  ConfigSection section(const std::string& key);
  const Json& raw(const std::string& key);

  // Throws ConfigError naming the first key that was never read.
  void finish() const;

  std::string qualified(const std::string& key) const {
    return path_.empty() ? key : path_ + "." + key;
  }

 private:
  const Json& node_;
  std::string path_;
  std::set<std::string> seen_;
};

Json read_json_file(const std::filesystem::path& path);

// Writes to a sibling temporary and renames it over the target.
void write_file_atomic(const std::filesystem::path& path, const std::string& bytes);

}  // namespace simvae
