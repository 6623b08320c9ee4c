// Copyright 2026 The RelayAttn Authors
// SPDX-License-Identifier: Apache-2.0

#include "relayattn/costmodel.hpp"

#include <algorithm>
#include <cstdio>

#include "relayattn/errors.hpp"

namespace relayattn {

void HardwareProfile::validate() const {
  if (!(mem_bandwidth > 0.0) || !(peak_flops > 0.0) || !(bytes_per_element > 0.0)) {
    throw ConfigError("hardware profile '" + name + "' needs positive bandwidth, flops and element size");
  }
}

const std::vector<HardwareProfile>& builtin_hardware_profiles() {
  static const std::vector<HardwareProfile> profiles{
      {"A40", 696e9, 37.4e12, 2.0},
      {"A100-PCIE-40GB", 1555e9, 77.9e12, 2.0},
      {"A100-SXM4-80GB", 2039e9, 77.9e12, 2.0},
  };
  return profiles;
}

const HardwareProfile& hardware_profile(std::string_view name) {
  for (const auto& p : builtin_hardware_profiles()) {
    if (p.name == name) return p;
  }
  throw ConfigError("unknown hardware profile '" + std::string(name) +
                    "' (known: A40, A100-PCIE-40GB, A100-SXM4-80GB)");
}

double arithmetic_intensity_gemm(const GemmShape& shape, double bytes_per_element) {
  if (shape.m == 0 || shape.n == 0 || shape.k == 0) {
    throw ContractError("GEMM dimensions must be positive");
  }
  const double m = static_cast<double>(shape.m);
  const double n = static_cast<double>(shape.n);
  const double k = static_cast<double>(shape.k);
  return 2.0 * m * n * k / (bytes_per_element * (m * k + n * k + m * n));
}

double gemm_intensity_bound(const GemmShape& shape) {
  return static_cast<double>(std::min({shape.m, shape.n, shape.k}));
}

double balance_ratio(const HardwareProfile& profile) {
  profile.validate();
  return profile.peak_flops / profile.mem_bandwidth;
}

double compute_time_ratio(double intensity, const HardwareProfile& profile) {
  profile.validate();
  return intensity * profile.time_per_flop() / profile.time_per_byte();
}

std::uint64_t traffic_baseline(std::uint64_t b, std::uint64_t s, std::uint64_t c, std::uint64_t d) {
  // queries + cached KVs + outputs
  return b * d + b * (s + c) * d + b * d;
}

std::uint64_t traffic_relay(std::uint64_t b, std::uint64_t s, std::uint64_t c, std::uint64_t d) {
  const std::uint64_t system = b * d + s * d + b * d;
  const std::uint64_t context = b * d + b * c * d + b * d;
  const std::uint64_t fusion = 3 * b * d;
  return system + context + fusion;
}

double theoretical_speedup(double b, double s, double c) {
  if (!(b > 0.0)) throw ContractError("batch size must be positive");
  return (s + c + 2.0) / (s / b + c + 7.0);
}

TrafficReport traffic_report(std::uint64_t b, std::uint64_t s, std::uint64_t c, std::uint64_t d) {
  TrafficReport r{b, s, c, d, traffic_baseline(b, s, c, d), traffic_relay(b, s, c, d), 0.0};
  r.speedup = static_cast<double>(r.n_baseline) / static_cast<double>(r.n_relay);
  return r;
}

void emit_speedup_curves(std::ostream& out, const SpeedupCurveSpec& spec,
                         const MeasuredSpeedupFn& measured) {
  out << "b,c,s,p_theoretical,p_measured_traffic\n";
  char buf[64];
  for (const auto c : spec.context_lengths) {
    for (const auto b : spec.batch_sizes) {
      for (const auto s : spec.system_lengths) {
        const double p = theoretical_speedup(static_cast<double>(b), static_cast<double>(s),
                                             static_cast<double>(c));
        std::snprintf(buf, sizeof(buf), "%.10g", p);
        out << b << ',' << c << ',' << s << ',' << buf << ',';
        if (measured) {
          if (const auto pm = measured(b, c, s)) {
            std::snprintf(buf, sizeof(buf), "%.10g", *pm);
            out << buf;
          }
        }
        out << '\n';
      }
    }
  }
}

StepCost analytic_step_cost(const ModelShape& shape, const HardwareProfile& profile,
                            ExecutionMode mode, std::uint64_t system_len,
                            std::span<const StepWork> work) {
  profile.validate();
  const double tc = profile.time_per_flop();
  const double tm = profile.time_per_byte();
  const double bpe = profile.bytes_per_element;
  const std::uint64_t d = shape.model_dim;
  const std::uint64_t s = system_len;

  std::uint64_t tokens = 0;      // rows through the linear layers
  std::uint64_t elements = 0;    // attention traffic per layer
  double attn_flops = 0.0;       // per layer
  std::uint64_t query_rows = 0;  // relay: rows in the flattened system step

  for (const StepWork& w : work) {
    if (mode == ExecutionMode::kBaseline) {
      const std::uint64_t q = w.new_tokens + (w.prompt ? s : 0);
      const std::uint64_t keys = s + w.context_tokens;
      tokens += q;
      elements += d * (2 * q + keys);
      attn_flops += 4.0 * static_cast<double>(d * q) * static_cast<double>(keys);
    } else {
      const std::uint64_t q = w.new_tokens;
      tokens += q;
      query_rows += q;
      elements += d * (2 * q + w.context_tokens);  // context attention
      attn_flops += 4.0 * static_cast<double>(d * q) * static_cast<double>(w.context_tokens);
    }
  }
  if (mode == ExecutionMode::kRelay && !work.empty()) {
    elements += d * (2 * query_rows + s);  // system attention, prefix read once
    elements += 3 * d * query_rows;        // fusion
    attn_flops += 4.0 * static_cast<double>(d * query_rows) * static_cast<double>(s) +
                  5.0 * static_cast<double>(d * query_rows);
  }

  const double linear_flops =
      2.0 * static_cast<double>(shape.params_per_layer() * shape.layers) * static_cast<double>(tokens) +
      2.0 * static_cast<double>(shape.vocab_size * d) * static_cast<double>(work.size());
  const double linear_bytes =
      bpe * (static_cast<double>(shape.params_per_layer() * shape.layers + shape.vocab_size * d) +
             2.0 * static_cast<double>(tokens * d * shape.layers));

  StepCost cost;
  if (work.empty()) return cost;
  const double attn_layer =
      std::max(attn_flops * tc, bpe * static_cast<double>(elements) * tm);
  cost.attention_seconds = attn_layer * static_cast<double>(shape.layers);
  cost.seconds = std::max(linear_flops * tc, linear_bytes * tm) + cost.attention_seconds;
  cost.attention_elements = elements * shape.layers;
  return cost;
}

}  // namespace relayattn
