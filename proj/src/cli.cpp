// Copyright 2026 The RelayAttn Authors
// SPDX-License-Identifier: Apache-2.0

#include "relayattn/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <memory>
#include <optional>
#include <random>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "relayattn/costmodel.hpp"
#include "relayattn/errors.hpp"
#include "relayattn/serving.hpp"
#include "relayattn/verification.hpp"

namespace relayattn {
namespace {

struct RunConfig {
  std::string model_config;
  std::string weights;
  std::string mode = "relay";
  std::size_t system_len = 0;
  std::string system_prompt;
  std::string user_prompt;
  std::uint64_t seed = 0;
  std::string output;
  std::string precision = "f64";
  std::string hardware = "A100-SXM4-80GB";
  std::vector<double> rates;
  std::vector<std::size_t> system_lens{64, 128, 256, 512, 1024, 2048};
  std::string trace;
  std::size_t requests = 32;
  std::size_t user_len = 64;
  std::size_t gen_len = 128;
  std::string cost = "analytic";
  std::string cost_shape = "engine";
  std::size_t kv_blocks = 4096;
  std::size_t block_size = kDefaultBlockSize;
  std::size_t batch_size = 32;
  std::size_t context_len = 128;
  std::size_t max_new_tokens = 32;
  std::size_t cases = 500;
  std::size_t model_cases = 100;
  std::size_t repeats = 3;
  bool with_measured_traffic = false;
  std::string step_log;
  std::string system_cache;
  std::string save_system_cache;
};

std::vector<TokenId> synth_tokens(std::size_t n, std::size_t vocab, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> dist(1, vocab - 1);
  std::vector<TokenId> out(n);
  for (auto& t : out) t = static_cast<TokenId>(dist(rng));
  return out;
}

class Context {
 public:
  Context(const RunConfig& cfg, bool precision_given, std::ostream& out)
      : cfg_(cfg), precision_given_(precision_given), out_(&out) {
    if (!cfg.output.empty()) {
      file_.open(cfg.output);
      if (!file_) throw ConfigError("cannot open output file: " + cfg.output);
      out_ = &file_;
    }
  }

  std::ostream& out() { return *out_; }
  const RunConfig& cfg() const { return cfg_; }
  ExecutionMode mode() const { return parse_mode(cfg_.mode); }

  ModelConfig model_config() const {
    ModelConfig mc;
    if (!cfg_.model_config.empty()) {
      mc = ModelConfig::load(cfg_.model_config);
    } else {
      mc.seed = cfg_.seed;
    }
    if (precision_given_ || cfg_.model_config.empty()) mc.precision = parse_precision(cfg_.precision);
    mc.validate();
    return mc;
  }

  std::shared_ptr<const DecoderModel> model() const {
    const ModelConfig mc = model_config();
    if (!cfg_.weights.empty()) {
      return std::make_shared<const DecoderModel>(mc, DecoderWeights::load(cfg_.weights, mc));
    }
    return std::make_shared<const DecoderModel>(mc);
  }

  SchedulerConfig scheduler() const {
    SchedulerConfig sc;
    sc.kv_pool_blocks = cfg_.kv_blocks;
    sc.block_size = cfg_.block_size;
    return sc;
  }

  std::vector<Request> workload() const {
    if (!cfg_.trace.empty()) return load_trace(cfg_.trace);
    return synth_workload(cfg_.user_len, cfg_.gen_len, cfg_.requests);
  }

  // Runs one batch or interactive simulation with the configured step costs.
  SimulationResult run(std::vector<Request> requests, ExecutionMode mode, std::size_t s,
                       std::optional<double> rate) const {
    if (mode == ExecutionMode::kRelay && s == 0) {
      throw ConfigError("relay mode requires --system-len >= 1");
    }
    const SchedulerConfig sc = scheduler();
    auto go = [&](StepExecutor& exec) {
      return rate ? run_interactive_sim(std::move(requests), *rate, cfg_.seed, mode, s, sc, exec)
                  : run_batch_job(std::move(requests), mode, s, sc, exec);
    };
    if (cfg_.cost == "analytic") {
      const ModelShape shape =
          cfg_.cost_shape == "llama2-7b" ? ModelShape::llama2_7b() : model_config().shape();
      AnalyticStepExecutor exec(shape, hardware_profile(cfg_.hardware), mode, s);
      return go(exec);
    }
    auto m = model();
    InferenceEngine engine(m, {mode, cfg_.kv_blocks, cfg_.block_size});
    if (s > 0) engine.set_system_prompt(synth_tokens(s, m->config().vocab_size, cfg_.seed));
    EngineStepExecutor exec(engine, cfg_.seed);
    return go(exec);
  }

 private:
  const RunConfig& cfg_;
  bool precision_given_;
  std::ostream* out_;
  std::ofstream file_;
};

// Step logs of several runs in one CSV, keyed by leading columns.
class StepLogWriter {
 public:
  StepLogWriter(const std::string& path, const std::string& key_header) {
    if (path.empty()) return;
    file_.open(path);
    if (!file_) throw ConfigError("cannot open step log: " + path);
    key_header_ = key_header;
  }

  void add(const std::string& key, std::span<const StepLogRow> steps) {
    if (!file_.is_open()) return;
    std::ostringstream buf;
    write_step_log_csv(buf, steps);
    std::istringstream lines(buf.str());
    std::string line;
    std::getline(lines, line);
    if (!header_written_) {
      file_ << key_header_ << ',' << line << '\n';
      header_written_ = true;
    }
    while (std::getline(lines, line)) file_ << key << ',' << line << '\n';
  }

 private:
  std::ofstream file_;
  std::string key_header_;
  bool header_written_ = false;
};

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

int cmd_verify(Context& ctx) {
  VerifyOptions opts;
  opts.attention_cases = ctx.cfg().cases;
  opts.model_cases = ctx.cfg().model_cases;
  opts.seed = ctx.cfg().seed;
  opts.precision = parse_precision(ctx.cfg().precision);
  const auto results = run_verification(opts);
  print_check_table(ctx.out(), results);
  const bool ok = std::all_of(results.begin(), results.end(), [](const auto& r) { return r.passed; });
  return ok ? kExitOk : kExitVerifyFailed;
}

int cmd_bench_batch(Context& ctx) {
  const auto requests = ctx.workload();
  StepLogWriter log(ctx.cfg().step_log, "mode,system_len");
  ctx.out() << kMetricsCsvHeader << '\n';
  for (const std::size_t s : ctx.cfg().system_lens) {
    for (const ExecutionMode mode : {ExecutionMode::kBaseline, ExecutionMode::kRelay}) {
      if (mode == ExecutionMode::kRelay && s == 0) continue;
      const auto result = ctx.run(requests, mode, s, std::nullopt);
      ctx.out() << metrics_csv_row(mode, s, result.metrics) << '\n';
      log.add(std::string(to_string(mode)) + ',' + std::to_string(s), result.steps);
    }
  }
  return kExitOk;
}

int cmd_bench_serve(Context& ctx) {
  const RunConfig& cfg = ctx.cfg();
  const std::size_t s = cfg.system_len;
  const auto requests = cfg.trace.empty() ? synth_chat_trace(cfg.requests, cfg.seed) : load_trace(cfg.trace);
  std::vector<double> rates = cfg.rates;
  if (rates.empty()) {
    // Fractions of the relay-mode saturation rate.
    const double saturation =
        ctx.run(requests, ExecutionMode::kRelay, s, std::nullopt).metrics.throughput_req_per_s;
    for (const double f : {0.125, 0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 2.0}) rates.push_back(f * saturation);
  }
  StepLogWriter log(cfg.step_log, "rate,mode,system_len");
  ctx.out() << "rate," << kMetricsCsvHeader << '\n';
  for (const ExecutionMode mode : {ExecutionMode::kBaseline, ExecutionMode::kRelay}) {
    for (const double rate : rates) {
      const auto result = ctx.run(requests, mode, s, rate);
      ctx.out() << format_double(rate) << ',' << metrics_csv_row(mode, s, result.metrics) << '\n';
      log.add(format_double(rate) + ',' + std::string(to_string(mode)) + ',' + std::to_string(s), result.steps);
    }
  }
  return kExitOk;
}

// Decode-step traffic of one standalone attention call per mode.
TrafficReport measure_attention_traffic(std::uint64_t b, std::uint64_t s, std::uint64_t c,
                                        std::size_t heads, std::size_t head_dim, std::mt19937_64& rng,
                                        TrafficCounter& base, TrafficCounter& relay,
                                        double* base_seconds = nullptr, double* relay_seconds = nullptr,
                                        std::size_t repeats = 1) {
  const Tensor q = random_tensor({b, 1, heads, head_dim}, rng);
  const Tensor sys_k = random_tensor({s, heads, head_dim}, rng);
  const Tensor sys_v = random_tensor({s, heads, head_dim}, rng);
  std::vector<ContextKv> contexts;
  for (std::uint64_t i = 0; i < b; ++i) {
    contexts.push_back({random_tensor({c, heads, head_dim}, rng), random_tensor({c, heads, head_dim}, rng)});
  }
  using Clock = std::chrono::steady_clock;
  double best_base = INFINITY;
  double best_relay = INFINITY;
  for (std::size_t r = 0; r < std::max<std::size_t>(repeats, 1); ++r) {
    TrafficCounter tb, tr;
    auto t0 = Clock::now();
    baseline_attention(q, sys_k, sys_v, contexts, {Precision::kFloat64, &tb});
    auto t1 = Clock::now();
    relay_attention(q, sys_k, sys_v, contexts, {Precision::kFloat64, &tr});
    auto t2 = Clock::now();
    best_base = std::min(best_base, std::chrono::duration<double>(t1 - t0).count());
    best_relay = std::min(best_relay, std::chrono::duration<double>(t2 - t1).count());
    base = tb;
    relay = tr;
  }
  if (base_seconds) *base_seconds = best_base;
  if (relay_seconds) *relay_seconds = best_relay;
  TrafficReport report;
  report.b = b;
  report.s = s;
  report.c = c;
  report.d = heads * head_dim;
  report.n_baseline = base.transferred();
  report.n_relay = relay.transferred();
  report.speedup = static_cast<double>(report.n_baseline) / static_cast<double>(report.n_relay);
  return report;
}

int cmd_speedup_curves(Context& ctx) {
  SpeedupCurveSpec spec;
  MeasuredSpeedupFn measured;
  std::mt19937_64 rng(ctx.cfg().seed);
  if (ctx.cfg().with_measured_traffic) {
    measured = [&rng](std::uint64_t b, std::uint64_t c, std::uint64_t s) -> std::optional<double> {
      TrafficCounter base, relay;
      return measure_attention_traffic(b, s, c, 1, 2, rng, base, relay).speedup;
    };
  }
  emit_speedup_curves(ctx.out(), spec, measured);
  return kExitOk;
}

int cmd_profile_attn(Context& ctx) {
  const RunConfig& cfg = ctx.cfg();
  const ModelConfig mc = ctx.model_config();
  std::mt19937_64 rng(cfg.seed);
  ctx.out() << "mode,b,c,s,seconds,elements_read,elements_written,elements_transferred\n";
  for (const std::size_t s : cfg.system_lens) {
    if (s == 0) continue;
    TrafficCounter base, relay;
    double tb = 0.0, tr = 0.0;
    measure_attention_traffic(cfg.batch_size, s, cfg.context_len, mc.heads, mc.head_dim, rng, base, relay,
                              &tb, &tr, cfg.repeats);
    auto row = [&](ExecutionMode mode, double seconds, const TrafficCounter& t) {
      ctx.out() << to_string(mode) << ',' << cfg.batch_size << ',' << cfg.context_len << ',' << s << ','
                << format_double(seconds) << ',' << t.elements_read << ',' << t.elements_written << ','
                << t.transferred() << '\n';
    };
    row(ExecutionMode::kBaseline, tb, base);
    row(ExecutionMode::kRelay, tr, relay);
  }
  return kExitOk;
}

std::vector<std::vector<TokenId>> read_prompt_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open user prompt file: " + path.string());
  std::vector<std::vector<TokenId>> prompts;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream ls(line);
    try {
      auto ids = parse_token_ids(ls);
      if (!ids.empty()) prompts.push_back(std::move(ids));
    } catch (const ParseError&) {
      throw ParseError("bad token id in " + path.string(), line_no);
    }
  }
  return prompts;
}

int cmd_gen(Context& ctx) {
  const RunConfig& cfg = ctx.cfg();
  const ExecutionMode mode = ctx.mode();
  auto model = ctx.model();
  const std::size_t vocab = model->config().vocab_size;
  InferenceEngine engine(model, {mode, cfg.kv_blocks, cfg.block_size});

  if (!cfg.system_cache.empty()) {
    if (mode != ExecutionMode::kRelay) throw ConfigError("--system-cache needs --mode relay");
    auto cache = std::make_shared<const SystemKvCache>(SystemKvCache::load(cfg.system_cache, "default"));
    if (!(cache->layout() == model->config().kv_layout())) {
      throw ConfigError("system cache layout does not match the model");
    }
    engine.attach_system_cache(std::move(cache));
  } else {
    std::vector<TokenId> system = cfg.system_prompt.empty() ? synth_tokens(cfg.system_len, vocab, cfg.seed)
                                                            : read_token_file(cfg.system_prompt);
    if (mode == ExecutionMode::kRelay && system.empty()) {
      throw ConfigError("relay mode requires a system prompt of at least one token");
    }
    if (!cfg.save_system_cache.empty()) {
      prefill_system_cache(*model, system).save(cfg.save_system_cache, model->config().precision);
    }
    if (!system.empty()) engine.set_system_prompt(std::move(system));
  }

  std::vector<std::vector<TokenId>> prompts;
  if (!cfg.user_prompt.empty()) {
    prompts = read_prompt_lines(cfg.user_prompt);
  } else {
    prompts.push_back(synth_tokens(cfg.user_len, vocab, cfg.seed + 1));
  }
  if (prompts.empty()) throw ConfigError("no user prompt tokens");
  for (const auto& p : prompts) {
    for (const TokenId t : p) {
      if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
        throw ConfigError("token id " + std::to_string(t) + " outside the vocabulary");
      }
    }
  }
  const auto outputs = generate(engine, prompts, cfg.max_new_tokens);
  for (const auto& tokens : outputs) {
    for (std::size_t i = 0; i < tokens.size(); ++i) ctx.out() << (i ? " " : "") << tokens[i];
    ctx.out() << '\n';
  }
  return kExitOk;
}

}  // namespace

std::vector<TokenId> parse_token_ids(std::istream& in) {
  std::vector<TokenId> ids;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream ls(line);
    std::string word;
    while (ls >> word) {
      std::size_t used = 0;
      long long v = 0;
      try {
        v = std::stoll(word, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != word.size() || v < 0 || v > INT32_MAX) {
        throw ParseError("not a token id: '" + word + "'", line_no);
      }
      ids.push_back(static_cast<TokenId>(v));
    }
  }
  return ids;
}

std::vector<TokenId> read_token_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open token file: " + path.string());
  return parse_token_ids(in);
}

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  RunConfig cfg;
  CLI::App app{"Relay attention reference implementation and benchmarks", "relayattn"};
  app.set_config("--config", "", "key=value file; command-line flags take precedence");
  app.require_subcommand(1, 1);

  app.add_option("--model-config", cfg.model_config, "Model config file (key=value)");
  app.add_option("--weights", cfg.weights, "Weights file written by the model module");
  app.add_option("--mode", cfg.mode, "Execution mode")->check(CLI::IsMember({"baseline", "relay"}));
  app.add_option("--system-len", cfg.system_len, "System prompt length in tokens");
  app.add_option("--system-prompt", cfg.system_prompt, "System prompt token file");
  app.add_option("--user-prompt", cfg.user_prompt, "User prompt token file, one request per line");
  app.add_option("--system-cache", cfg.system_cache, "Load prefilled system KVs (relay)");
  app.add_option("--save-system-cache", cfg.save_system_cache, "Write the prefilled system KVs");
  app.add_option("--seed", cfg.seed, "Random seed");
  app.add_option("--output", cfg.output, "Output file (default stdout)");
  auto* precision = app.add_option("--precision", cfg.precision, "Arithmetic precision")
                        ->check(CLI::IsMember({"f64", "f32"}));
  app.add_option("--hardware", cfg.hardware, "Hardware profile for analytic costs");
  app.add_option("--rates", cfg.rates, "Request rates (req/s), comma separated")->delimiter(',');
  app.add_option("--system-lens", cfg.system_lens, "System prompt lengths, comma separated")->delimiter(',');
  app.add_option("--trace", cfg.trace, "Request trace (JSONL)");
  app.add_option("--requests", cfg.requests, "Number of synthetic requests");
  app.add_option("--user-len", cfg.user_len, "Synthetic user prompt length");
  app.add_option("--gen-len", cfg.gen_len, "Synthetic generation length");
  app.add_option("--cost", cfg.cost, "Step cost source")->check(CLI::IsMember({"analytic", "wallclock"}));
  app.add_option("--cost-shape", cfg.cost_shape, "Model shape for analytic costs")
      ->check(CLI::IsMember({"engine", "llama2-7b"}));
  app.add_option("--kv-blocks", cfg.kv_blocks, "KV pool size in blocks");
  app.add_option("--block-size", cfg.block_size, "Tokens per KV block");
  app.add_option("--batch-size", cfg.batch_size, "Batch size for profile-attn");
  app.add_option("--context-len", cfg.context_len, "Context length for profile-attn");
  app.add_option("--max-new-tokens", cfg.max_new_tokens, "Tokens to generate");
  app.add_option("--cases", cfg.cases, "Randomised attention cases for verify");
  app.add_option("--model-cases", cfg.model_cases, "Randomised model cases for verify");
  app.add_option("--repeats", cfg.repeats, "Timing repeats for profile-attn (best is kept)");
  app.add_flag("--with-measured-traffic", cfg.with_measured_traffic, "Add measured traffic ratios");
  app.add_option("--step-log", cfg.step_log, "Per-step CSV log");

  using Handler = int (*)(Context&);
  const std::pair<const char*, Handler> commands[] = {
      {"verify", cmd_verify},
      {"bench-batch", cmd_bench_batch},
      {"bench-serve", cmd_bench_serve},
      {"speedup-curves", cmd_speedup_curves},
      {"profile-attn", cmd_profile_attn},
      {"gen", cmd_gen},
  };
  const char* descriptions[] = {
      "Randomised oracle-equivalence suite",
      "Throughput vs system prompt length, both modes",
      "Throughput and latency vs request rate, both modes",
      "Theoretical (and measured-traffic) speedup curves",
      "Standalone attention timing and traffic vs system prompt length",
      "Greedy generation from token files",
  };
  std::vector<CLI::App*> subs;
  for (std::size_t i = 0; i < std::size(commands); ++i) {
    subs.push_back(app.add_subcommand(commands[i].first, descriptions[i])->fallthrough());
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitConfigError;
  }

  try {
    Context ctx(cfg, precision->count() > 0, out);
    for (std::size_t i = 0; i < subs.size(); ++i) {
      if (subs[i]->parsed()) return commands[i].second(ctx);
    }
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return kExitConfigError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitConfigError;
  }
  return kExitConfigError;
}

}  // namespace relayattn
