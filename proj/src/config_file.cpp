// Copyright 2026 The RelayAttn Authors
// SPDX-License-Identifier: Apache-2.0

#include "relayattn/config_file.hpp"

#include <fstream>

#include "relayattn/errors.hpp"

namespace relayattn {
namespace {

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

}  // namespace

KeyValues parse_key_values(std::istream& in) {
  KeyValues out;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    const std::string text = trim(line);
    if (text.empty() || text.front() == '#') continue;
    const auto eq = text.find('=');
    if (eq == std::string::npos) throw ParseError("expected key=value, got '" + text + "'", number);
    std::string key = trim(text.substr(0, eq));
    if (key.empty()) throw ParseError("empty key", number);
    out[std::move(key)] = trim(text.substr(eq + 1));
  }
  return out;
}

KeyValues read_key_value_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  return parse_key_values(in);
}

}  // namespace relayattn
