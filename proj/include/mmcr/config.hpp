#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>

#include "json.hpp"

namespace mmcr {

/// Layered settings shared by every subcommand. Lookup order is
/// flags > environment > file > built-in defaults.
///
/// The file is one JSON object of sections, e.g.
///   {"train": {"epochs": 10}, "service": {"port": 8080}}
/// and MMCR_<SECTION>_<KEY> environment variables override single keys
/// (MMCR_SERVICE_LEASE_SECONDS sets service.lease_seconds).
class Settings {
 public:
  Settings() = default;

  static Settings from_file(const std::filesystem::path& path);
  static Settings from_json(nlohmann::json document);

  /// Reads MMCR_* variables from the process environment.
  void load_environment();
  void set_environment(const std::string& section, const std::string& key, std::string value);
  void set_flag(const std::string& section, const std::string& key, nlohmann::json value);

  bool has(const std::string& section, const std::string& key) const;

  std::string get_string(const std::string& section, const std::string& key,
                         const std::string& fallback) const;
  std::optional<std::string> get_optional_string(const std::string& section,
                                                 const std::string& key) const;
  long long get_int(const std::string& section, const std::string& key, long long fallback) const;
  double get_double(const std::string& section, const std::string& key, double fallback) const;
  bool get_bool(const std::string& section, const std::string& key, bool fallback) const;

 private:
  using Key = std::pair<std::string, std::string>;
  std::optional<nlohmann::json> lookup(const std::string& section, const std::string& key) const;

  nlohmann::json file_ = nlohmann::json::object();
  std::map<Key, std::string> environment_;
  std::map<Key, nlohmann::json> flags_;
};

}  // namespace mmcr
