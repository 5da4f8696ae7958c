#include "mmcr/config.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstdlib>
#include <fstream>

#include <fmt/format.h>

#include "mmcr/error.hpp"

extern char** environ;

namespace mmcr {

namespace {

constexpr std::string_view kPrefix = "MMCR_";

std::string lower(std::string text) {
  std::transform(text.begin(), text.end(), text.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return text;
}

std::string describe(const std::string& section, const std::string& key) {
  return fmt::format("{}.{}", section, key);
}

// Environment values are text; interpret them as the type being asked for.
nlohmann::json coerce_text(const std::string& text, const nlohmann::json& like,
                           const std::string& name) {
  if (like.is_boolean()) {
    const auto v = lower(text);
    if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
    if (v == "0" || v == "false" || v == "no" || v == "off") return false;
    fail(ErrorKind::usage, fmt::format("setting {} expects a boolean, got '{}'", name, text));
  }
  if (like.is_number_integer()) {
    long long v = 0;
    auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (ec != std::errc{} || ptr != text.data() + text.size()) {
      fail(ErrorKind::usage, fmt::format("setting {} expects an integer, got '{}'", name, text));
    }
    return v;
  }
  if (like.is_number()) {
    try {
      std::size_t used = 0;
      const double v = std::stod(text, &used);
      if (used == text.size()) return v;
    } catch (const std::exception&) {
    }
    fail(ErrorKind::usage, fmt::format("setting {} expects a number, got '{}'", name, text));
  }
  return text;
}

}  // namespace

Settings Settings::from_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::io, fmt::format("cannot open config file '{}'", path.string()));
  nlohmann::json document;
  try {
    document = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::data, fmt::format("config file '{}' is not valid JSON: {}", path.string(), e.what()));
  }
  return from_json(std::move(document));
}

Settings Settings::from_json(nlohmann::json document) {
  if (!document.is_object()) fail(ErrorKind::data, "config must be a JSON object of sections");
  for (const auto& [section, body] : document.items()) {
    if (!body.is_object()) {
      fail(ErrorKind::data, fmt::format("config section '{}' must be an object", section));
    }
  }
  Settings s;
  s.file_ = std::move(document);
  return s;
}

void Settings::load_environment() {
  for (char** entry = environ; entry && *entry; ++entry) {
    std::string_view item(*entry);
    if (item.substr(0, kPrefix.size()) != kPrefix) continue;
    const auto eq = item.find('=');
    if (eq == std::string_view::npos) continue;
    const std::string name(item.substr(kPrefix.size(), eq - kPrefix.size()));
    const auto underscore = name.find('_');
    if (underscore == std::string::npos || underscore == 0 || underscore + 1 == name.size()) continue;
    set_environment(lower(name.substr(0, underscore)), lower(name.substr(underscore + 1)),
                    std::string(item.substr(eq + 1)));
  }
}

void Settings::set_environment(const std::string& section, const std::string& key, std::string value) {
  environment_[{section, key}] = std::move(value);
}

void Settings::set_flag(const std::string& section, const std::string& key, nlohmann::json value) {
  flags_[{section, key}] = std::move(value);
}

bool Settings::has(const std::string& section, const std::string& key) const {
  return flags_.count({section, key}) || environment_.count({section, key}) ||
         (file_.contains(section) && file_[section].contains(key));
}

std::optional<nlohmann::json> Settings::lookup(const std::string& section,
                                               const std::string& key) const {
  if (auto it = flags_.find({section, key}); it != flags_.end()) return it->second;
  if (auto it = environment_.find({section, key}); it != environment_.end()) return nlohmann::json(it->second);
  if (file_.contains(section) && file_[section].contains(key)) return file_[section][key];
  return std::nullopt;
}

std::string Settings::get_string(const std::string& section, const std::string& key,
                                 const std::string& fallback) const {
  return get_optional_string(section, key).value_or(fallback);
}

std::optional<std::string> Settings::get_optional_string(const std::string& section,
                                                         const std::string& key) const {
  auto v = lookup(section, key);
  if (!v || v->is_null()) return std::nullopt;
  if (!v->is_string()) {
    fail(ErrorKind::usage, fmt::format("setting {} must be a string", describe(section, key)));
  }
  return v->get<std::string>();
}

long long Settings::get_int(const std::string& section, const std::string& key,
                            long long fallback) const {
  auto v = lookup(section, key);
  if (!v) return fallback;
  if (v->is_string()) v = coerce_text(v->get<std::string>(), 0LL, describe(section, key));
  if (!v->is_number_integer()) {
    fail(ErrorKind::usage, fmt::format("setting {} must be an integer", describe(section, key)));
  }
  return v->get<long long>();
}

double Settings::get_double(const std::string& section, const std::string& key,
                            double fallback) const {
  auto v = lookup(section, key);
  if (!v) return fallback;
  if (v->is_string()) v = coerce_text(v->get<std::string>(), 0.0, describe(section, key));
  if (!v->is_number()) {
    fail(ErrorKind::usage, fmt::format("setting {} must be a number", describe(section, key)));
  }
  return v->get<double>();
}

bool Settings::get_bool(const std::string& section, const std::string& key, bool fallback) const {
  auto v = lookup(section, key);
  if (!v) return fallback;
  if (v->is_string()) v = coerce_text(v->get<std::string>(), false, describe(section, key));
  if (!v->is_boolean()) {
    fail(ErrorKind::usage, fmt::format("setting {} must be a boolean", describe(section, key)));
  }
  return v->get<bool>();
}

}  // namespace mmcr
