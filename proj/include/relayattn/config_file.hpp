// Copyright 2026 The RelayAttn Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <istream>
#include <map>
#include <string>

namespace relayattn {

using KeyValues = std::map<std::string, std::string>;

/// Parses `key = value` lines. Blank lines and lines starting with '#' are
/// skipped; whitespace around keys and values is trimmed. A line without
/// '=' or with an empty key throws ParseError carrying the line number.
KeyValues parse_key_values(std::istream& in);
KeyValues read_key_value_file(const std::filesystem::path& path);

}  // namespace relayattn
