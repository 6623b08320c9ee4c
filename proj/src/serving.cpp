// Copyright 2026 The RelayAttn Authors
// SPDX-License-Identifier: Apache-2.0

#include "relayattn/serving.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <stdexcept>

#include <json.hpp>

#include "relayattn/errors.hpp"
#include "relayattn/model.hpp"

namespace relayattn {

std::vector<std::size_t> default_allowed_batch_sizes() {
  std::vector<std::size_t> sizes{1, 2, 4, 8};
  for (std::size_t b = 16; b <= 256; b += 8) sizes.push_back(b);
  return sizes;
}

std::size_t largest_allowed_at_most(std::span<const std::size_t> allowed, std::size_t n) {
  std::size_t best = 0;
  for (const std::size_t a : allowed) {
    if (a <= n) best = std::max(best, a);
  }
  return best;
}

Scheduler::Scheduler(SchedulerConfig config, ExecutionMode mode, std::size_t system_len)
    : config_(std::move(config)), mode_(mode), system_len_(system_len) {
  if (config_.block_size == 0) throw ConfigError("scheduler: block_size must be positive");
  if (config_.allowed_batch_sizes.empty()) throw ConfigError("scheduler: no allowed batch sizes");
  std::sort(config_.allowed_batch_sizes.begin(), config_.allowed_batch_sizes.end());
  if (config_.allowed_batch_sizes.front() == 0) throw ConfigError("scheduler: batch size 0 is not allowed");
  if (mode_ == ExecutionMode::kRelay) {
    if (system_len_ == 0) throw ConfigError("relay mode needs a system prompt of at least one token");
    // One shared copy of the system KVs.
    used_blocks_ = (system_len_ + config_.block_size - 1) / config_.block_size;
    if (used_blocks_ > config_.kv_pool_blocks) {
      throw ConfigError("system prompt does not fit in the KV pool");
    }
  }
}

std::size_t Scheduler::blocks_required(const Request& request) const {
  std::size_t tokens = request.user_len + request.max_gen;
  if (mode_ == ExecutionMode::kBaseline) tokens += system_len_;
  return (tokens + config_.block_size - 1) / config_.block_size;
}

ScheduleDecision Scheduler::schedule_step(std::deque<std::size_t>& queue,
                                          std::vector<std::size_t>& running,
                                          std::span<Request> requests) {
  ++step_;
  ScheduleDecision decision;
  const std::size_t max_running = config_.allowed_batch_sizes.back();
  const std::size_t reserved =
      mode_ == ExecutionMode::kRelay ? (system_len_ + config_.block_size - 1) / config_.block_size : 0;

  while (!queue.empty() && running.size() < max_running) {
    const std::size_t idx = queue.front();
    Request& r = requests[idx];
    const std::size_t need = blocks_required(r);
    if (need > config_.kv_pool_blocks - reserved) {
      throw CapacityError("request '" + r.id + "' needs " + std::to_string(need) +
                          " KV blocks but the pool only has " +
                          std::to_string(config_.kv_pool_blocks - reserved));
    }
    if (need > free_blocks()) break;
    used_blocks_ += need;
    r.state = RequestState::kPrompt;
    running.push_back(idx);
    decision.admitted.push_back(idx);
    queue.pop_front();
  }

  const std::size_t k = largest_allowed_at_most(config_.allowed_batch_sizes, running.size());
  std::vector<std::size_t> order = running;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const auto la = last_served_.count(a) ? last_served_.at(a) : 0;
    const auto lb = last_served_.count(b) ? last_served_.at(b) : 0;
    return la != lb ? la < lb : a < b;
  });
  order.resize(k);
  std::sort(order.begin(), order.end());
  for (const std::size_t idx : order) last_served_[idx] = step_;
  decision.batch = std::move(order);
  return decision;
}

void Scheduler::release(const Request& request) {
  const std::size_t blocks = blocks_required(request);
  used_blocks_ -= std::min(used_blocks_, blocks);
}

AnalyticStepExecutor::AnalyticStepExecutor(ModelShape shape, HardwareProfile profile,
                                           ExecutionMode mode, std::size_t system_len)
    : shape_(shape), profile_(std::move(profile)), mode_(mode), system_len_(system_len) {
  profile_.validate();
}

StepResult AnalyticStepExecutor::execute(std::span<const StepEntry> entries,
                                         std::span<const Request> /*requests*/) {
  std::vector<StepWork> work;
  work.reserve(entries.size());
  for (const auto& e : entries) work.push_back(e.work);
  const StepCost cost = analytic_step_cost(shape_, profile_, mode_, system_len_, work);
  return StepResult{cost.seconds, cost.attention_elements, {}};
}

EngineStepExecutor::EngineStepExecutor(InferenceEngine& engine, std::uint64_t seed)
    : engine_(engine), seed_(seed) {}

StepResult EngineStepExecutor::execute(std::span<const StepEntry> entries,
                                       std::span<const Request> requests) {
  const std::size_t vocab = engine_.model().config().vocab_size;
  std::vector<RequestId> prompt_ids;
  std::vector<RequestId> decode_ids;
  for (const auto& e : entries) {
    if (e.work.prompt) {
      std::mt19937_64 rng(seed_ + e.request);
      std::uniform_int_distribution<TokenId> pick(1, static_cast<TokenId>(std::max<std::size_t>(vocab, 2) - 1));
      std::vector<TokenId> tokens(requests[e.request].user_len);
      for (auto& t : tokens) t = pick(rng);
      const RequestId id = engine_.add_request(std::move(tokens));
      engine_ids_[e.request] = id;
      prompt_ids.push_back(id);
    } else {
      decode_ids.push_back(engine_ids_.at(e.request));
    }
  }
  const auto before = engine_.traffic().transferred();
  const auto start = std::chrono::steady_clock::now();
  StepOutput prompt_out;
  StepOutput decode_out;
  if (!prompt_ids.empty()) prompt_out = engine_.forward_prompt_phase(prompt_ids);
  if (!decode_ids.empty()) decode_out = engine_.forward_decode_step(decode_ids);
  const auto stop = std::chrono::steady_clock::now();

  StepResult result;
  result.seconds = std::chrono::duration<double>(stop - start).count();
  result.elements = engine_.traffic().transferred() - before;
  std::size_t pi = 0;
  std::size_t di = 0;
  for (const auto& e : entries) {
    const TokenId t = e.work.prompt ? prompt_out.tokens[pi++] : decode_out.tokens[di++];
    result.end_token.push_back(t == kEndToken);
  }
  return result;
}

void EngineStepExecutor::on_finished(std::size_t request) {
  const auto it = engine_ids_.find(request);
  if (it == engine_ids_.end()) return;
  engine_.release(it->second);
  engine_ids_.erase(it);
}

SimulationResult simulate(std::vector<Request> requests, ExecutionMode mode, std::size_t system_len,
                          const SchedulerConfig& config, StepExecutor& executor) {
  for (auto& r : requests) {
    if (r.user_len == 0 || r.max_gen == 0) {
      throw ContractError("request '" + r.id + "' needs user_len >= 1 and gen_len >= 1");
    }
    if (!(r.arrival_time >= 0.0)) throw ContractError("request '" + r.id + "' has a negative arrival");
    r.state = RequestState::kQueued;
    r.first_token_time.reset();
    r.finish_time.reset();
    r.tokens_emitted = 0;
  }
  const std::size_t n = requests.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return requests[a].arrival_time < requests[b].arrival_time;
  });

  Scheduler scheduler(config, mode, system_len);
  SimulationResult result;
  std::deque<std::size_t> queue;
  std::vector<std::size_t> running;
  std::size_t next = 0;
  std::size_t finished = 0;
  double clock = 0.0;

  while (finished < n) {
    while (next < n && requests[order[next]].arrival_time <= clock) queue.push_back(order[next++]);
    if (queue.empty() && running.empty()) {
      clock = requests[order[next]].arrival_time;
      continue;
    }
    const ScheduleDecision decision = scheduler.schedule_step(queue, running, requests);
    if (decision.batch.empty()) {
      if (next >= n) throw std::logic_error("scheduler stalled with no pending arrivals");
      clock = requests[order[next]].arrival_time;
      continue;
    }

    std::vector<StepEntry> entries;
    entries.reserve(decision.batch.size());
    std::size_t prompts = 0;
    for (const std::size_t idx : decision.batch) {
      const Request& r = requests[idx];
      StepEntry e;
      e.request = idx;
      e.work.prompt = r.state == RequestState::kPrompt;
      e.work.new_tokens = e.work.prompt ? r.user_len : 1;
      e.work.context_tokens = r.user_len + r.tokens_emitted;
      prompts += e.work.prompt ? 1 : 0;
      entries.push_back(e);
    }

    const StepResult step = executor.execute(entries, requests);
    StepLogRow row{result.steps.size(), clock, step.seconds, entries.size(), prompts,
                   entries.size() - prompts, running.size(), queue.size(), step.elements};
    clock += step.seconds;
    result.steps.push_back(row);
    result.metrics.batch_size_hist[entries.size()] += 1;
    result.metrics.elements_read_total += step.elements;

    for (std::size_t i = 0; i < entries.size(); ++i) {
      Request& r = requests[entries[i].request];
      if (entries[i].work.prompt) {
        r.first_token_time = clock;
        r.state = RequestState::kDecoding;
      }
      r.tokens_emitted += 1;
      const bool eos = i < step.end_token.size() && step.end_token[i];
      if (r.tokens_emitted >= r.max_gen || eos) {
        r.state = RequestState::kFinished;
        r.finish_time = clock;
        scheduler.release(r);
        executor.on_finished(entries[i].request);
        std::erase(running, entries[i].request);
        ++finished;
      }
    }
  }

  Metrics& m = result.metrics;
  double first_arrival = n ? requests[order.front()].arrival_time : 0.0;
  double last_finish = first_arrival;
  double latency_sum = 0.0;
  for (const auto& r : requests) {
    last_finish = std::max(last_finish, *r.finish_time);
    m.tokens += r.tokens_emitted;
    latency_sum += (*r.finish_time - r.arrival_time) / static_cast<double>(r.tokens_emitted);
  }
  m.finished = finished;
  m.makespan = last_finish - first_arrival;
  if (m.makespan > 0.0) {
    m.throughput_tokens_per_s = static_cast<double>(m.tokens) / m.makespan;
    m.throughput_req_per_s = static_cast<double>(finished) / m.makespan;
  }
  m.normalized_latency = finished ? latency_sum / static_cast<double>(finished) : 0.0;
  result.requests = std::move(requests);
  return result;
}

SimulationResult run_batch_job(std::vector<Request> requests, ExecutionMode mode,
                               std::size_t system_len, const SchedulerConfig& config,
                               StepExecutor& executor) {
  for (auto& r : requests) r.arrival_time = 0.0;
  return simulate(std::move(requests), mode, system_len, config, executor);
}

SimulationResult run_interactive_sim(std::vector<Request> requests, double rate, std::uint64_t seed,
                                     ExecutionMode mode, std::size_t system_len,
                                     const SchedulerConfig& config, StepExecutor& executor) {
  const auto arrivals = poisson_arrivals(rate, requests.size(), seed);
  for (std::size_t i = 0; i < requests.size(); ++i) requests[i].arrival_time = arrivals[i];
  return simulate(std::move(requests), mode, system_len, config, executor);
}

std::vector<double> poisson_arrivals(double rate, std::size_t n, std::uint64_t seed) {
  if (!(rate > 0.0) || !std::isfinite(rate)) {
    throw ContractError("poisson_arrivals: rate must be positive");
  }
  std::mt19937_64 rng(seed);
  std::exponential_distribution<double> gap(rate);
  std::vector<double> times;
  times.reserve(n);
  double t = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double g = 0.0;
    while (!(g > 0.0)) g = gap(rng);
    t += g;
    times.push_back(t);
  }
  return times;
}

std::vector<Request> parse_trace(std::istream& in) {
  using nlohmann::json;
  std::vector<Request> out;
  std::string line;
  std::size_t number = 0;
  auto get_length = [](const json& j, const char* key, std::size_t line_no) -> std::size_t {
    if (!j.contains(key)) throw ParseError(std::string("missing field '") + key + "'", line_no);
    const auto& v = j.at(key);
    if (!v.is_number_integer() || v.get<std::int64_t>() < 1) {
      throw ParseError(std::string("'") + key + "' must be an integer >= 1", line_no);
    }
    return v.get<std::size_t>();
  };
  while (std::getline(in, line)) {
    ++number;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ParseError(std::string("invalid JSON: ") + e.what(), number);
    }
    if (!j.is_object()) throw ParseError("expected a JSON object", number);
    Request r;
    if (!j.contains("id") || !j.at("id").is_string()) throw ParseError("'id' must be a string", number);
    r.id = j.at("id").get<std::string>();
    if (!j.contains("arrival_s") || !j.at("arrival_s").is_number()) {
      throw ParseError("'arrival_s' must be a number", number);
    }
    r.arrival_time = j.at("arrival_s").get<double>();
    if (!(r.arrival_time >= 0.0)) throw ParseError("'arrival_s' must be >= 0", number);
    if (j.contains("system_prompt_id")) {
      if (!j.at("system_prompt_id").is_string()) {
        throw ParseError("'system_prompt_id' must be a string", number);
      }
      r.system_prompt_id = j.at("system_prompt_id").get<std::string>();
    } else {
      throw ParseError("missing field 'system_prompt_id'", number);
    }
    r.user_len = get_length(j, "user_len", number);
    r.max_gen = get_length(j, "gen_len", number);
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<Request> load_trace(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open trace " + path.string());
  return parse_trace(in);
}

void write_trace(std::ostream& out, std::span<const Request> requests) {
  for (const auto& r : requests) {
    nlohmann::ordered_json j;
    j["id"] = r.id;
    j["arrival_s"] = r.arrival_time;
    j["system_prompt_id"] = r.system_prompt_id;
    j["user_len"] = r.user_len;
    j["gen_len"] = r.max_gen;
    out << j.dump() << '\n';
  }
}

std::vector<Request> synth_workload(std::size_t user_len, std::size_t gen_len, std::size_t n) {
  if (user_len == 0 || gen_len == 0) throw ContractError("synthetic lengths must be >= 1");
  std::vector<Request> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i].id = "synth-" + std::to_string(i);
    out[i].user_len = user_len;
    out[i].max_gen = gen_len;
  }
  return out;
}

std::span<const WorkloadPreset> synthetic_presets() {
  static constexpr WorkloadPreset kPresets[] = {{64, 128}, {128, 256}, {256, 512}};
  return kPresets;
}

std::vector<Request> synth_chat_trace(std::size_t n, std::uint64_t seed, std::size_t max_user_len,
                                      std::size_t max_gen_len) {
  std::mt19937_64 rng(seed);
  std::lognormal_distribution<double> user(std::log(64.0), 1.0);
  std::lognormal_distribution<double> gen(std::log(128.0), 0.8);
  auto clip = [](double x, std::size_t hi) {
    return std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(x)), 4, std::max<std::size_t>(hi, 4));
  };
  std::vector<Request> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i].id = "chat-" + std::to_string(i);
    out[i].user_len = clip(user(rng), max_user_len);
    out[i].max_gen = clip(gen(rng), max_gen_len);
  }
  return out;
}

std::string format_batch_histogram(const std::map<std::size_t, std::size_t>& hist) {
  std::string out;
  for (const auto& [size, count] : hist) {
    if (!out.empty()) out += ';';
    out += std::to_string(size) + ':' + std::to_string(count);
  }
  return out;
}

std::string metrics_csv_row(ExecutionMode mode, std::size_t system_len, const Metrics& m) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%.9g,%.9g,%.9g", m.throughput_tokens_per_s,
                m.throughput_req_per_s, m.normalized_latency);
  return std::string(to_string(mode)) + ',' + std::to_string(system_len) + ',' +
         format_batch_histogram(m.batch_size_hist) + ',' + buf + ',' +
         std::to_string(m.elements_read_total);
}

void write_step_log_csv(std::ostream& out, std::span<const StepLogRow> steps) {
  out << "step,start_s,cost_s,batch_size,prompt_requests,decode_requests,running,queued,elements\n";
  char buf[64];
  for (const auto& s : steps) {
    out << s.step << ',';
    std::snprintf(buf, sizeof(buf), "%.9g,%.9g", s.start_time, s.cost_seconds);
    out << buf << ',' << s.batch_size << ',' << s.prompt_requests << ',' << s.decode_requests << ','
        << s.running << ',' << s.queued << ',' << s.elements << '\n';
  }
}

}  // namespace relayattn
