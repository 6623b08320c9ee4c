"""Relay attention: exact shared-prefix attention with a paged KV cache and serving simulator."""

from ._relayattn import (
    CapacityError,
    ConfigError,
    ContractError,
    DimensionError,
    Error,
    ModelConfig,
    NumericError,
    ParseError,
    arithmetic_intensity_gemm,
    attention_with_lse,
    balance_ratio,
    baseline_attention,
    generate,
    hardware_profiles,
    matmul,
    naive_causal_attention,
    poisson_arrivals,
    relay_alpha_sys,
    relay_attention,
    relay_fusion,
    rope_apply,
    run_batch_job,
    run_interactive_sim,
    run_verification,
    softmax_lse,
    theoretical_speedup,
    traffic_baseline,
    traffic_relay,
)

__version__ = "0.1.0"
