// Copyright 2026 The RelayAttn Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "relayattn/mode.hpp"

namespace relayattn {

/// Bandwidth and compute of an accelerator.
struct HardwareProfile {
  std::string name;
  double mem_bandwidth = 0.0;  ///< bytes/s
  double peak_flops = 0.0;     ///< flop/s
  double bytes_per_element = 2.0;

  /// Seconds per byte moved.
  double time_per_byte() const noexcept { return 1.0 / mem_bandwidth; }
  /// Seconds per floating-point operation.
  double time_per_flop() const noexcept { return 1.0 / peak_flops; }
  void validate() const;
};

/// A40, A100-PCIE-40GB and A100-SXM4-80GB at FP16 peak.
const std::vector<HardwareProfile>& builtin_hardware_profiles();
/// Throws ConfigError for an unknown name.
const HardwareProfile& hardware_profile(std::string_view name);

/// C = A * B^T with A [m x k], B [n x k].
struct GemmShape {
  std::uint64_t m = 1;
  std::uint64_t n = 1;
  std::uint64_t k = 1;
};

/// Flops per byte of a GEMM: 2mnk / (bytes_per_element * (mk + nk + mn)).
double arithmetic_intensity_gemm(const GemmShape& shape, double bytes_per_element = 2.0);
/// min{m, n, k}, which the GEMM intensity never reaches.
double gemm_intensity_bound(const GemmShape& shape);

/// peak_flops / mem_bandwidth. Operators below this intensity are memory-bound.
double balance_ratio(const HardwareProfile& profile);

/// Compute time over memory time, r = I * t_c / t_m. r < 1 means memory-bound.
double compute_time_ratio(double intensity, const HardwareProfile& profile);
inline bool is_memory_bound(double intensity, const HardwareProfile& profile) {
  return compute_time_ratio(intensity, profile) < 1.0;
}

/// Elements moved by one conventional decode step: b*d*(s + c + 2).
std::uint64_t traffic_baseline(std::uint64_t b, std::uint64_t s, std::uint64_t c, std::uint64_t d);
/// Elements moved by one relay decode step: d*(s + b*c + 7b).
std::uint64_t traffic_relay(std::uint64_t b, std::uint64_t s, std::uint64_t c, std::uint64_t d);
/// (s + c + 2) / (s/b + c + 7).
double theoretical_speedup(double b, double s, double c);

struct TrafficReport {
  std::uint64_t b = 0;
  std::uint64_t s = 0;
  std::uint64_t c = 0;
  std::uint64_t d = 0;
  std::uint64_t n_baseline = 0;
  std::uint64_t n_relay = 0;
  double speedup = 0.0;  ///< n_baseline / n_relay
};
TrafficReport traffic_report(std::uint64_t b, std::uint64_t s, std::uint64_t c, std::uint64_t d);

/// Returns the measured traffic ratio for (b, c, s), or nothing.
using MeasuredSpeedupFn =
    std::function<std::optional<double>(std::uint64_t b, std::uint64_t c, std::uint64_t s)>;

struct SpeedupCurveSpec {
  std::vector<std::uint64_t> batch_sizes{4, 8, 16, 32};
  std::vector<std::uint64_t> context_lengths{128, 256};
  std::vector<std::uint64_t> system_lengths{64, 128, 256, 512, 768, 1024, 1536, 2048};
};

/// CSV with header `b,c,s,p_theoretical,p_measured_traffic`, one row per
/// (b, c, s) in the nested order c, b, s. The last column is empty when
/// `measured` is absent or returns nothing.
void emit_speedup_curves(std::ostream& out, const SpeedupCurveSpec& spec,
                         const MeasuredSpeedupFn& measured = {});

/// Size of the transformer being costed.
struct ModelShape {
  std::uint64_t layers = 4;
  std::uint64_t model_dim = 64;  ///< h * d_h, the d of the traffic counts
  std::uint64_t ffn_dim = 128;
  std::uint64_t vocab_size = 256;

  std::uint64_t params_per_layer() const noexcept {
    return 4 * model_dim * model_dim + 2 * model_dim * ffn_dim + 2 * model_dim;
  }
  std::uint64_t total_params() const noexcept {
    return layers * params_per_layer() + 2 * vocab_size * model_dim + model_dim;
  }
  static ModelShape llama2_7b() { return {32, 4096, 11008, 32000}; }
};

/// Work of one request inside a scheduled step.
struct StepWork {
  bool prompt = false;         ///< prompt phase (else a decode step)
  std::uint64_t new_tokens = 1;    ///< query tokens excluding any system prefix
  std::uint64_t context_tokens = 1;  ///< request-specific tokens cached after the step
};

struct StepCost {
  double seconds = 0.0;
  double attention_seconds = 0.0;
  std::uint64_t attention_elements = 0;  ///< summed over layers
};

/// Roofline cost of one engine step: every operator group takes
/// max(flops * t_c, bytes * t_m). Attention bytes follow the traffic counts
/// above, generalised to m query tokens per request; in baseline mode a
/// prompt step also recomputes the s system tokens.
StepCost analytic_step_cost(const ModelShape& shape, const HardwareProfile& profile,
                            ExecutionMode mode, std::uint64_t system_len,
                            std::span<const StepWork> work);

}  // namespace relayattn
