#pragma once

#include <cstdint>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "winlin/common.hpp"
#include "winlin/model.hpp"

namespace winlin {

inline std::string format_int_list(const std::int64_t* v, std::size_t n) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < n; ++i) {
    if (i) os << ',';
    os << v[i];
  }
  os << ']';
  return os.str();
}

inline std::vector<std::int64_t> parse_int_list(const std::string& s, const std::string& key) {
  if (s.size() < 2 || s.front() != '[' || s.back() != ']')
    throw ConfigError(key + ": expected a bracketed list like [1,2,3], got '" + s + "'");
  std::vector<std::int64_t> out;
  std::string body = s.substr(1, s.size() - 2);
  std::istringstream is(body);
  std::string item;
  while (std::getline(is, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stoll(item, &used));
      while (used < item.size() && std::isspace(static_cast<unsigned char>(item[used]))) ++used;
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError(key + ": malformed integer '" + item + "' in list '" + s + "'");
    }
  }
  return out;
}

inline std::int64_t parse_int(const std::string& s, const std::string& key) {
  try {
    std::size_t used = 0;
    const std::int64_t v = std::stoll(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ConfigError(key + ": malformed integer '" + s + "'");
  }
}

inline double parse_double(const std::string& s, const std::string& key) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ConfigError(key + ": malformed number '" + s + "'");
  }
}

inline bool parse_bool(const std::string& s, const std::string& key) {
  if (s == "1" || s == "true" || s == "on") return true;
  if (s == "0" || s == "false" || s == "off") return false;
  throw ConfigError(key + ": expected a boolean (true/false/1/0), got '" + s + "'");
}

inline std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

inline std::vector<std::pair<std::string, std::string>> model_config_kv(const ModelConfig& c) {
  return {
      {"model.stage_channels", format_int_list(c.stage_channels.data(), 4)},
      {"model.stage_depths", format_int_list(c.stage_depths.data(), 4)},
      {"model.window_side", std::to_string(c.window_side)},
      {"model.mlp_ratio", format_double(c.mlp_ratio)},
      {"model.scp_channels", format_int_list(c.scp_channels.data(), 6)},
      {"model.scp_strides", format_int_list(c.scp_strides.data(), 6)},
      {"model.fpn_dim", std::to_string(c.fpn_dim)},
      {"model.head_hidden", std::to_string(c.head_hidden)},
  };
}

// Applies one model.* key; returns false if the key is not a model key.
inline bool apply_model_config_key(ModelConfig& c, const std::string& key,
                                   const std::string& value) {
  auto fill4 = [&](std::array<std::int64_t, 4>& dst) {
    auto v = parse_int_list(value, key);
    if (v.size() != 4) throw ConfigError(key + ": expected 4 entries, got " +
                                         std::to_string(v.size()));
    std::copy(v.begin(), v.end(), dst.begin());
  };
  auto fill6 = [&](std::array<std::int64_t, 6>& dst) {
    auto v = parse_int_list(value, key);
    if (v.size() != 6) throw ConfigError(key + ": expected 6 entries, got " +
                                         std::to_string(v.size()));
    std::copy(v.begin(), v.end(), dst.begin());
  };
  if (key == "model.stage_channels")
    fill4(c.stage_channels);
  else if (key == "model.stage_depths")
    fill4(c.stage_depths);
  else if (key == "model.window_side")
    c.window_side = parse_int(value, key);
  else if (key == "model.mlp_ratio")
    c.mlp_ratio = parse_double(value, key);
  else if (key == "model.scp_channels")
    fill6(c.scp_channels);
  else if (key == "model.scp_strides")
    fill6(c.scp_strides);
  else if (key == "model.fpn_dim")
    c.fpn_dim = parse_int(value, key);
  else if (key == "model.head_hidden")
    c.head_hidden = parse_int(value, key);
  else if (key == "model.preset") {
    if (value == "toy")
      c = ModelConfig::toy();
    else if (value == "paper-scale")
      c = ModelConfig::paper_scale();
    else
      throw ConfigError("model.preset: unknown preset '" + value + "' (toy, paper-scale)");
  } else
    return false;
  return true;
}

}  // namespace winlin
