#include "simvae/config.hpp"

#include <fstream>
#include <sstream>

namespace simvae {

namespace {
const Json& empty_object() {
  static const Json e = Json::object();
  return e;
}
}  // namespace

ConfigSection::ConfigSection(const Json& node, std::string path)
    : node_(node.is_null() ? empty_object() : node), path_(std::move(path)) {
  if (!node_.is_object()) {
    throw ConfigError(path_, "config section '" + path_ + "' must be an object");
  }
}

bool ConfigSection::has(const std::string& key) const { return node_.contains(key); }

ConfigSection ConfigSection::section(const std::string& key) {
  seen_.insert(key);
  if (!node_.contains(key)) return ConfigSection(empty_object(), qualified(key));
  return ConfigSection(node_.at(key), qualified(key));
}

const Json& ConfigSection::raw(const std::string& key) {
  seen_.insert(key);
  if (!node_.contains(key)) return empty_object();
  return node_.at(key);
}

void ConfigSection::finish() const {
  for (const auto& [key, value] : node_.items()) {
    if (!seen_.count(key)) {
      throw ConfigError(qualified(key), "unknown config key '" + qualified(key) + "'");
    }
  }
}

Json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  try {
    return Json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("", "cannot parse " + path.string() + ": " + e.what());
  }
}

void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("short write to " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace simvae
