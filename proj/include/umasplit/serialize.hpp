/*
 * Copyright 2026 the uma-split authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>

#include "umasplit/common.hpp"
#include "umasplit/tensor.hpp"

namespace umasplit {

using ParamMap = std::map<std::string, Tensor>;
using ConfigMap = std::map<std::string, std::string>;

inline constexpr char kParamMagic[4] = {'U', 'M', 'A', 'W'};
inline constexpr std::uint32_t kParamVersion = 1;

// ---------------------------------------------------------------------------
// Parameter container: "UMAW", u32 version, u32 entry count, then per entry
// u32 name length + UTF-8 name, u32 rank, rank x u32 dims, numel x f64.
// All integers and doubles little-endian; entries sorted by name.
// ---------------------------------------------------------------------------

inline void save_params(const ParamMap& params, std::ostream& os) {
  os.write(kParamMagic, 4);
  write_u32(os, kParamVersion);
  write_u32(os, static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, tensor] : params) {
    write_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_u32(os, static_cast<std::uint32_t>(tensor.rank()));
    for (std::size_t d : tensor.shape()) write_u32(os, static_cast<std::uint32_t>(d));
    for (double v : tensor.values()) write_f64(os, v);
  }
  if (!os) throw FormatError("parameter write failed");
}

inline ParamMap load_params(std::istream& is) {
  char magic[4];
  read_exact(is, magic, 4, "magic");
  if (std::string(magic, 4) != std::string(kParamMagic, 4))
    throw FormatError("bad magic: expected UMAW");
  std::uint32_t version = read_u32(is, "version");
  if (version != kParamVersion)
    throw FormatError("unsupported parameter container version " + std::to_string(version));
  std::uint32_t count = read_u32(is, "entry count");
  ParamMap out;
  std::string prev;
  for (std::uint32_t e = 0; e < count; ++e) {
    std::uint32_t name_len = read_u32(is, "name length");
    std::string name(name_len, '\0');
    read_exact(is, name.data(), name_len, "name");
    if (e > 0 && !(prev < name)) throw FormatError("entries not sorted by name at '" + name + "'");
    prev = name;
    std::uint32_t rank = read_u32(is, "rank");
    Shape shape;
    std::size_t numel = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      std::uint32_t d = read_u32(is, "dim");
      shape.push_back(d);
      numel *= d;
    }
    Tensor t(shape);
    for (std::size_t i = 0; i < numel; ++i) t.values()[i] = read_f64(is, "tensor data");
    out.emplace(std::move(name), std::move(t));
  }
  return out;
}

/// Writes via a temp file in the same directory, then renames into place.
inline void atomic_write_file(const std::string& path,
                              const std::function<void(std::ostream&)>& writer) {
  std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw FormatError("cannot open '" + tmp + "' for writing");
    writer(os);
    os.flush();
    if (!os) throw FormatError("write to '" + tmp + "' failed");
  }
  std::filesystem::rename(tmp, path);
}

inline void save_params_file(const ParamMap& params, const std::string& path) {
  atomic_write_file(path, [&](std::ostream& os) { save_params(params, os); });
}

inline ParamMap load_params_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open parameter file '" + path + "'");
  return load_params(is);
}

// ---------------------------------------------------------------------------
// Flat key=value configuration text. '#' starts a comment; keys are unique.
// ---------------------------------------------------------------------------

inline void save_config(const ConfigMap& cfg, std::ostream& os) {
  for (const auto& [k, v] : cfg) os << k << '=' << v << '\n';
}

inline ConfigMap load_config(std::istream& is) {
  ConfigMap out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    std::string_view sv(line);
    while (!sv.empty() && (sv.front() == ' ' || sv.front() == '\t')) sv.remove_prefix(1);
    while (!sv.empty() && (sv.back() == ' ' || sv.back() == '\t' || sv.back() == '\r'))
      sv.remove_suffix(1);
    if (sv.empty() || sv.front() == '#') continue;
    std::size_t eq = sv.find('=');
    if (eq == std::string_view::npos)
      throw FormatError("config line " + std::to_string(lineno) + ": expected key=value");
    std::string key(sv.substr(0, eq));
    std::string val(sv.substr(eq + 1));
    if (key.empty()) throw FormatError("config line " + std::to_string(lineno) + ": empty key");
    if (!out.emplace(key, val).second)
      throw FormatError("config line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
  }
  return out;
}

inline void save_config_file(const ConfigMap& cfg, const std::string& path) {
  atomic_write_file(path, [&](std::ostream& os) { save_config(cfg, os); });
}

inline ConfigMap load_config_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw FormatError("cannot open config file '" + path + "'");
  return load_config(is);
}

inline std::string config_get(const ConfigMap& cfg, const std::string& key,
                              const std::string& fallback) {
  auto it = cfg.find(key);
  return it == cfg.end() ? fallback : it->second;
}

inline double config_get_f64(const ConfigMap& cfg, const std::string& key, double fallback) {
  auto it = cfg.find(key);
  if (it == cfg.end()) return fallback;
  try {
    std::size_t pos = 0;
    double v = std::stod(it->second, &pos);
    if (pos != it->second.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw FormatError("config key '" + key + "': not a number: '" + it->second + "'");
  }
}

inline std::int64_t config_get_i64(const ConfigMap& cfg, const std::string& key,
                                   std::int64_t fallback) {
  auto it = cfg.find(key);
  if (it == cfg.end()) return fallback;
  try {
    std::size_t pos = 0;
    std::int64_t v = std::stoll(it->second, &pos);
    if (pos != it->second.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw FormatError("config key '" + key + "': not an integer: '" + it->second + "'");
  }
}

/// f64 -> text with enough digits to round-trip exactly.
inline std::string f64_to_string(double v) {
  std::ostringstream ss;
  ss.precision(17);
  ss << v;
  return ss.str();
}

}  // namespace umasplit
