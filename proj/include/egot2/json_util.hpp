#pragma once

#include <initializer_list>
#include <string>

#include "egot2/container.hpp"
#include "egot2/errors.hpp"

namespace egot2 {

// Fails on any key of `j` that is not in `allowed`; `where` is the dotted path for messages.
inline void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) throw ConfigError("unknown key '" + (where.empty() ? key : where + "." + key) + "'");
  }
}

template <class T>
T get_field(const json& j, const char* key, const std::string& where) {
  const std::string path = where.empty() ? key : where + "." + key;
  if (!j.contains(key)) throw ConfigError("missing key '" + path + "'");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("key '" + path + "' has the wrong type");
  }
}

template <class T>
T get_field_or(const json& j, const char* key, const std::string& where, T fallback) {
  if (!j.contains(key)) return fallback;
  return get_field<T>(j, key, where);
}

}  // namespace egot2
