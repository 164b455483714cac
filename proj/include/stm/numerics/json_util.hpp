#pragma once

// Strict JSON reading for configuration structs: unknown keys are errors,
// missing keys keep their defaults.

#include <json.hpp>

#include <initializer_list>
#include <stdexcept>
#include <string>

namespace stm {

struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

inline void reject_unknown_keys(const nlohmann::json& j, const std::string& section,
                                std::initializer_list<const char*> known) {
    if (!j.is_object()) throw ConfigError("section '" + section + "' must be an object");
    for (const auto& [key, _] : j.items()) {
        bool ok = false;
        for (const char* k : known) ok = ok || key == k;
        if (!ok) throw ConfigError("unknown key '" + section + "." + key + "'");
    }
}

template <class V>
void read_key(const nlohmann::json& j, const char* key, V& out, const std::string& section) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<V>();
    } catch (const nlohmann::json::exception&) {
        throw ConfigError("bad value for '" + section + "." + key + "'");
    }
}

}  // namespace stm
