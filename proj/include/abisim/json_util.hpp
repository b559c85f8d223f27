#pragma once

#include "json.hpp"

#include <initializer_list>
#include <string>
#include <type_traits>

#include "abisim/common.hpp"

namespace abisim::json_util {

using nlohmann::json;

inline std::string join(const std::string& path, const std::string& key) {
  return path.empty() ? key : path + "." + key;
}

/// Throws ConfigError naming the first key of `j` that is not in `allowed`.
inline void reject_unknown(const json& j, std::initializer_list<const char*> allowed,
                           const std::string& path) {
  if (!j.is_object()) throw ConfigError("expected an object at '" + (path.empty() ? "<root>" : path) + "'");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool known = false;
    for (const char* key : allowed) known = known || it.key() == key;
    if (!known) throw ConfigError("unknown key '" + join(path, it.key()) + "'");
  }
}

/// Reads j[key] into `out` if present; type mismatches become ConfigError naming the key path.
template <typename T>
void read(const json& j, const char* key, T& out, const std::string& path) {
  auto it = j.find(key);
  if (it == j.end()) return;
  if constexpr (std::is_integral_v<T> && !std::is_same_v<T, bool>) {
    if (!it->is_number_integer()) {
      throw ConfigError("type mismatch at '" + join(path, key) + "': expected an integer");
    }
  }
  try {
    out = it->template get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("type mismatch at '" + join(path, key) + "': " + e.what());
  }
}

/// Like read(), but the key must be present.
template <typename T>
void require(const json& j, const char* key, T& out, const std::string& path) {
  if (!j.contains(key)) throw ConfigError("missing required key '" + join(path, key) + "'");
  read(j, key, out, path);
}

}  // namespace abisim::json_util
