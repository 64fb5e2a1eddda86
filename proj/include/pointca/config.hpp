#pragma once

// JSON configuration helpers: per-command key tables, unknown-key rejection,
// "key=value" overrides and help text generation.

#include <algorithm>
#include <cstdio>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pointca/error.hpp"

namespace pointca {

struct ConfigKey {
  std::string name;
  std::string type;  // "int", "number", "bool", "string", "number[]", ...
  nlohmann::json default_value;
  std::string help;
};

using KeyTable = std::vector<ConfigKey>;

/// Table defaults overlaid with `user`. Unknown keys are an InvalidConfig error.
inline nlohmann::json resolve_config(const nlohmann::json& user, const KeyTable& table, const std::string& command) {
  if (!user.is_null() && !user.is_object()) {
    throw Error(Errc::InvalidConfig, command + ": configuration must be a JSON object");
  }
  nlohmann::json out = nlohmann::json::object();
  for (const auto& k : table) out[k.name] = k.default_value;
  if (user.is_null()) return out;
  for (const auto& [key, value] : user.items()) {
    const auto it = std::find_if(table.begin(), table.end(), [&](const ConfigKey& k) { return k.name == key; });
    if (it == table.end()) throw Error(Errc::InvalidConfig, command + ": unknown configuration key '" + key + "'");
    out[key] = value;
  }
  return out;
}

/// Parses "key=value"; the value is read as JSON when it parses, otherwise as
/// a plain string (so --set model=toy works without quoting).
inline void apply_override(nlohmann::json& config, const std::string& assignment, const KeyTable& table,
                           const std::string& command) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw Error(Errc::InvalidConfig, command + ": override '" + assignment + "' is not key=value");
  }
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  if (std::none_of(table.begin(), table.end(), [&](const ConfigKey& k) { return k.name == key; })) {
    throw Error(Errc::InvalidConfig, command + ": unknown configuration key '" + key + "'");
  }
  auto parsed = nlohmann::json::parse(text, nullptr, false);
  config[key] = parsed.is_discarded() ? nlohmann::json(text) : parsed;
}

/// Reads a key with the type the table promises, turning JSON type errors
/// into configuration errors that name the key.
template <typename T>
T config_get(const nlohmann::json& config, const std::string& key) {
  try {
    return config.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw Error(Errc::InvalidConfig, "configuration key '" + key + "' has the wrong type: " + config.at(key).dump());
  }
}

inline std::string describe_keys(const KeyTable& table) {
  std::size_t width = 0;
  for (const auto& k : table) width = std::max(width, k.name.size());
  std::string out = "Configuration keys (JSON file via --config, or --set key=value):\n";
  for (const auto& k : table) {
    std::string line = "  " + k.name + std::string(width - k.name.size() + 2, ' ');
    line += "[" + k.type + ", default " + k.default_value.dump() + "] " + k.help + "\n";
    out += line;
  }
  return out;
}

}  // namespace pointca
