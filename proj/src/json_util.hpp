#pragma once

#include <initializer_list>
#include <set>
#include <string>

#include <nlohmann/json.hpp>

#include "selfseg/errors.hpp"

// Fail-closed config parsing helpers: unknown keys are rejected, missing keys
// either fall back to defaults (get_or) or raise (get_req).
namespace selfseg::detail {

using ordered_json = nlohmann::ordered_json;

inline void require_keys(const ordered_json& j, std::initializer_list<const char*> allowed,
                         const std::string& context) {
  if (!j.is_object()) throw ConfigError(context + ": expected a JSON object");
  std::set<std::string> ok;
  for (const char* k : allowed) ok.insert(k);
  for (const auto& item : j.items())
    if (!ok.count(item.key()))
      throw ConfigError(context + ": unknown field '" + item.key() + "'");
}

template <typename T>
T get_req(const ordered_json& j, const char* key, const std::string& context) {
  if (!j.contains(key)) throw ConfigError(context + ": missing field '" + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const ordered_json::exception& e) {
    throw ConfigError(context + ": bad value for '" + key + "': " + e.what());
  }
}

template <typename T>
T get_or(const ordered_json& j, const char* key, const T& fallback, const std::string& context) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const ordered_json::exception& e) {
    throw ConfigError(context + ": bad value for '" + key + "': " + e.what());
  }
}

inline ordered_json parse_json_text(const std::string& text, const std::string& context) {
  try {
    return ordered_json::parse(text);
  } catch (const ordered_json::exception& e) {
    throw ConfigError(context + ": " + e.what());
  }
}

}  // namespace selfseg::detail
