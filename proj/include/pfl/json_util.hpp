#pragma once

#include <initializer_list>
#include <string>
#include <string_view>

#include <json.hpp>

#include "pfl/error.hpp"

namespace pfl {

using Json = nlohmann::json;

/// Rejects any key of `obj` not in `allowed`. `where` prefixes messages.
inline void reject_unknown_keys(const Json& obj, std::initializer_list<std::string_view> allowed,
                                const std::string& where) {
    if (!obj.is_object()) throw Error(ErrorCode::InvalidConfig, where + ": expected an object");
    for (const auto& [key, value] : obj.items()) {
        bool known = false;
        for (auto a : allowed) known = known || a == key;
        if (!known) throw Error(ErrorCode::InvalidConfig, where + ": unknown key '" + key + "'");
    }
}

/// Reads obj[key] into `out` when present; type errors become InvalidConfig.
template <class T>
void read_optional(const Json& obj, const char* key, T& out, const std::string& where) {
    auto it = obj.find(key);
    if (it == obj.end()) return;
    try {
        out = it->template get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::InvalidConfig, where + "." + key + ": " + e.what());
    }
}

template <class T>
void read_required(const Json& obj, const char* key, T& out, const std::string& where) {
    if (!obj.contains(key)) throw Error(ErrorCode::InvalidConfig, where + ": missing '" + key + "'");
    read_optional(obj, key, out, where);
}

/// Parses JSON text; syntax errors become InvalidConfig.
inline Json parse_json(std::string_view text, const std::string& where) {
    try {
        return Json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw Error(ErrorCode::InvalidConfig, where + ": " + e.what());
    }
}

}  // namespace pfl
