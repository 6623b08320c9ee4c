// Copyright 2026 The RelayAttn Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "relayattn/costmodel.hpp"
#include "relayattn/mode.hpp"

namespace relayattn {

class InferenceEngine;

enum class RequestState { kQueued, kPrompt, kDecoding, kFinished };

/// One serving request on the simulated clock.
struct Request {
  std::string id;
  double arrival_time = 0.0;
  std::string system_prompt_id = "default";
  std::size_t user_len = 1;
  std::size_t max_gen = 1;
  RequestState state = RequestState::kQueued;
  std::optional<double> first_token_time;
  std::optional<double> finish_time;
  std::size_t tokens_emitted = 0;
};

/// {1, 2, 4, 8, 16, 24, 32, 40, ..., 256}
std::vector<std::size_t> default_allowed_batch_sizes();

enum class AdmissionPolicy { kFirstComeFirstServed };

struct SchedulerConfig {
  std::vector<std::size_t> allowed_batch_sizes = default_allowed_batch_sizes();
  std::size_t kv_pool_blocks = 4096;
  std::size_t block_size = 16;
  AdmissionPolicy admission = AdmissionPolicy::kFirstComeFirstServed;
};

/// Largest member of `allowed` that is <= n, or 0.
std::size_t largest_allowed_at_most(std::span<const std::size_t> allowed, std::size_t n);

struct ScheduleDecision {
  std::vector<std::size_t> admitted;  ///< request indices moved from queue to running
  std::vector<std::size_t> batch;     ///< request indices processed this step
};

/// Admission-only continuous-batching scheduler.
///
/// A request is admitted when the pool can reserve blocks for its whole
/// lifetime (user prompt + max_gen, plus its own copy of the system prompt in
/// baseline mode; relay mode reserves one shared copy up front). Nothing is
/// ever preempted. Each step runs the largest allowed batch size that the
/// running set can fill, picking the requests served least recently.
class Scheduler {
 public:
  Scheduler(SchedulerConfig config, ExecutionMode mode, std::size_t system_len);

  std::size_t blocks_required(const Request& request) const;
  std::size_t used_blocks() const noexcept { return used_blocks_; }
  std::size_t free_blocks() const noexcept { return config_.kv_pool_blocks - used_blocks_; }
  const SchedulerConfig& config() const noexcept { return config_; }

  /// Throws CapacityError when the head of the queue can never fit.
  ScheduleDecision schedule_step(std::deque<std::size_t>& queue, std::vector<std::size_t>& running,
                                 std::span<Request> requests);
  /// Returns a finished request's blocks to the pool.
  void release(const Request& request);

 private:
  SchedulerConfig config_;
  ExecutionMode mode_;
  std::size_t system_len_;
  std::size_t used_blocks_ = 0;
  std::uint64_t step_ = 0;
  std::map<std::size_t, std::uint64_t> last_served_;  // request index -> step + 1
};

/// Per-request view handed to a step executor.
struct StepEntry {
  std::size_t request = 0;  ///< index into the request list
  StepWork work;
};

struct StepResult {
  double seconds = 0.0;
  std::uint64_t elements = 0;  ///< attention traffic of the step
  std::vector<bool> end_token;  ///< per entry; empty means none ended early
};

/// Prices (and optionally performs) one scheduled step.
class StepExecutor {
 public:
  virtual ~StepExecutor() = default;
  virtual StepResult execute(std::span<const StepEntry> entries, std::span<const Request> requests) = 0;
  virtual void on_finished(std::size_t /*request*/) {}
};

/// Deterministic costs from the roofline step model.
class AnalyticStepExecutor final : public StepExecutor {
 public:
  AnalyticStepExecutor(ModelShape shape, HardwareProfile profile, ExecutionMode mode,
                       std::size_t system_len);
  StepResult execute(std::span<const StepEntry> entries, std::span<const Request> requests) override;

 private:
  ModelShape shape_;
  HardwareProfile profile_;
  ExecutionMode mode_;
  std::size_t system_len_;
};

/// Runs the toy engine and reports measured wall-clock seconds. User
/// prompts are synthesised from `seed`. The engine must already carry the
/// system prompt.
class EngineStepExecutor final : public StepExecutor {
 public:
  EngineStepExecutor(InferenceEngine& engine, std::uint64_t seed);
  StepResult execute(std::span<const StepEntry> entries, std::span<const Request> requests) override;
  void on_finished(std::size_t request) override;

 private:
  InferenceEngine& engine_;
  std::uint64_t seed_;
  std::map<std::size_t, std::uint64_t> engine_ids_;
};

struct Metrics {
  double throughput_tokens_per_s = 0.0;
  double throughput_req_per_s = 0.0;
  double normalized_latency = 0.0;  ///< mean (finish - arrival) / tokens_emitted, seconds
  double makespan = 0.0;
  std::size_t finished = 0;
  std::size_t tokens = 0;
  std::uint64_t elements_read_total = 0;
  std::map<std::size_t, std::size_t> batch_size_hist;
};

struct StepLogRow {
  std::size_t step = 0;
  double start_time = 0.0;
  double cost_seconds = 0.0;
  std::size_t batch_size = 0;
  std::size_t prompt_requests = 0;
  std::size_t decode_requests = 0;
  std::size_t running = 0;
  std::size_t queued = 0;
  std::uint64_t elements = 0;
};

struct SimulationResult {
  Metrics metrics;
  std::vector<Request> requests;
  std::vector<StepLogRow> steps;
};

/// Discrete-event loop shared by the batch and interactive scenarios.
/// Requests are admitted once the clock reaches their arrival time.
SimulationResult simulate(std::vector<Request> requests, ExecutionMode mode, std::size_t system_len,
                          const SchedulerConfig& config, StepExecutor& executor);

/// Noninteractive job: every request arrives at t = 0.
SimulationResult run_batch_job(std::vector<Request> requests, ExecutionMode mode,
                               std::size_t system_len, const SchedulerConfig& config,
                               StepExecutor& executor);

/// Interactive serving: arrivals are re-drawn from a Poisson process.
SimulationResult run_interactive_sim(std::vector<Request> requests, double rate, std::uint64_t seed,
                                     ExecutionMode mode, std::size_t system_len,
                                     const SchedulerConfig& config, StepExecutor& executor);

/// Cumulative sums of i.i.d. Exponential(rate) gaps. Throws ContractError for rate <= 0.
std::vector<double> poisson_arrivals(double rate, std::size_t n, std::uint64_t seed);

/// JSONL, one object per line:
/// {"id": str, "arrival_s": num, "system_prompt_id": str, "user_len": int, "gen_len": int}
std::vector<Request> load_trace(const std::filesystem::path& path);
std::vector<Request> parse_trace(std::istream& in);
void write_trace(std::ostream& out, std::span<const Request> requests);

/// n identical requests.
std::vector<Request> synth_workload(std::size_t user_len, std::size_t gen_len, std::size_t n);

struct WorkloadPreset {
  std::size_t user_len;
  std::size_t gen_len;
};
/// (64, 128), (128, 256), (256, 512).
std::span<const WorkloadPreset> synthetic_presets();

/// Long-tailed lengths (log-normal, clipped) resembling chat traffic.
std::vector<Request> synth_chat_trace(std::size_t n, std::uint64_t seed, std::size_t max_user_len = 512,
                                      std::size_t max_gen_len = 512);

/// Header of the metrics CSV.
inline constexpr const char* kMetricsCsvHeader =
    "mode,system_len,batch_size_hist,tokens_per_s,req_per_s,norm_latency_s,elements_read_total";
/// One metrics CSV row (no trailing newline).
std::string metrics_csv_row(ExecutionMode mode, std::size_t system_len, const Metrics& metrics);
/// "size:count;size:count" in ascending size.
std::string format_batch_histogram(const std::map<std::size_t, std::size_t>& hist);

void write_step_log_csv(std::ostream& out, std::span<const StepLogRow> steps);

}  // namespace relayattn
