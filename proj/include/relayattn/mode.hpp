// Copyright 2026 The RelayAttn Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <string_view>

#include "relayattn/errors.hpp"

namespace relayattn {

/// How the shared system prompt is served.
///  kBaseline: system tokens are replicated into every request's context cache
///             and attended with plain causal attention.
///  kRelay:    system KVs live once in a shared cache; attention is split into
///             a batched system step, a per-request context step and a fusion.
enum class ExecutionMode { kBaseline, kRelay };

inline std::string_view to_string(ExecutionMode mode) {
  return mode == ExecutionMode::kRelay ? "relay" : "baseline";
}

inline ExecutionMode parse_mode(std::string_view text) {
  if (text == "baseline") return ExecutionMode::kBaseline;
  if (text == "relay") return ExecutionMode::kRelay;
  throw ConfigError("unknown mode '" + std::string(text) + "' (expected baseline or relay)");
}

}  // namespace relayattn
