#pragma once

#include <json.hpp>
#include <string>

#include "uncspan/common.hpp"

namespace uncspan {

namespace detail {

inline void dump_json17(const nlohmann::json& j, std::string& out, int indent, int depth) {
  const std::string pad(static_cast<std::size_t>(indent) * depth, ' ');
  const std::string pad_in(static_cast<std::size_t>(indent) * (depth + 1), ' ');
  switch (j.type()) {
    case nlohmann::json::value_t::object: {
      if (j.empty()) {
        out += "{}";
        return;
      }
      out += "{\n";
      std::size_t i = 0;
      for (auto it = j.begin(); it != j.end(); ++it, ++i) {
        out += pad_in;
        out += nlohmann::json(it.key()).dump();
        out += ": ";
        dump_json17(it.value(), out, indent, depth + 1);
        if (i + 1 < j.size()) out += ',';
        out += '\n';
      }
      out += pad + "}";
      return;
    }
    case nlohmann::json::value_t::array: {
      if (j.empty()) {
        out += "[]";
        return;
      }
      out += "[\n";
      for (std::size_t i = 0; i < j.size(); ++i) {
        out += pad_in;
        dump_json17(j[i], out, indent, depth + 1);
        if (i + 1 < j.size()) out += ',';
        out += '\n';
      }
      out += pad + "]";
      return;
    }
    case nlohmann::json::value_t::number_float:
      out += fmt17(j.get<double>());
      return;
    default:
      out += j.dump();
      return;
  }
}

}  // namespace detail

/// Serializes JSON with objects in key order and every floating-point
/// number printed with 17 significant digits (bit-exact decimal form).
inline std::string dump_json17(const nlohmann::json& j, int indent = 2) {
  std::string out;
  detail::dump_json17(j, out, indent, 0);
  out += '\n';
  return out;
}

}  // namespace uncspan
