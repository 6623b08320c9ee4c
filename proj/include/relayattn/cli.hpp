// Copyright 2026 The RelayAttn Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <ostream>
#include <vector>

#include "relayattn/model.hpp"

namespace relayattn {

/// Exit codes of the command-line tool.
inline constexpr int kExitOk = 0;
inline constexpr int kExitVerifyFailed = 1;
inline constexpr int kExitConfigError = 2;

/// Whitespace-separated integer token ids. Throws ParseError naming the line.
std::vector<TokenId> parse_token_ids(std::istream& in);
std::vector<TokenId> read_token_file(const std::filesystem::path& path);

/// Entry point of `relayattn`. CSV goes to `out` unless --output is given.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace relayattn
