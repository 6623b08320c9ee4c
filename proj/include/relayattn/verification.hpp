// Copyright 2026 The RelayAttn Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "relayattn/attention.hpp"
#include "relayattn/numerics.hpp"

namespace relayattn {

/// Uniform(-scale, scale) entries.
Tensor random_tensor(const Shape& shape, std::mt19937_64& rng, double scale = 1.0);

/// One randomised relay-attention problem with its brute-force reference.
struct AttentionCase {
  std::size_t batch = 1, heads = 1, head_dim = 4, system_len = 1, queries = 1;
  Tensor q;  ///< [b x m x h x d]
  Tensor sys_k, sys_v;
  std::vector<ContextKv> contexts;
  std::vector<Tensor> full_queries;  ///< per request, [s + c x h x d]; last m rows equal q
};

AttentionCase make_attention_case(std::mt19937_64& rng, bool prompt_phase);

/// Per request: naive causal attention over [system || context], last m rows.
Tensor oracle_attention(const AttentionCase& c);

struct CheckResult {
  std::string name;
  std::size_t cases = 0;
  double max_abs_diff = 0.0;
  double tolerance = 0.0;
  std::size_t mismatches = 0;
  bool passed = true;
};

struct VerifyOptions {
  std::size_t attention_cases = 200;
  std::size_t model_cases = 20;
  std::uint64_t seed = 0;
  Precision precision = Precision::kFloat64;
};

/// Randomised oracle-equivalence checks for the attention paths and the
/// full model in both execution modes.
std::vector<CheckResult> run_verification(const VerifyOptions& options);
void print_check_table(std::ostream& out, std::span<const CheckResult> results);

}  // namespace relayattn
