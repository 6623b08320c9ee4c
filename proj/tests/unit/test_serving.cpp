#include <numeric>
#include <sstream>

#include <gtest/gtest.h>

#include "relayattn/errors.hpp"
#include "relayattn/model.hpp"
#include "relayattn/serving.hpp"

namespace relayattn {
namespace {

const ModelShape kToy{};
const HardwareProfile& a100() { return hardware_profile("A100-SXM4-80GB"); }

TEST(AllowedSizes, Membership) {
  const auto sizes = default_allowed_batch_sizes();
  EXPECT_EQ(sizes.front(), 1u);
  EXPECT_EQ(sizes.back(), 256u);
  EXPECT_EQ(sizes[4], 16u);
  EXPECT_EQ(sizes[5], 24u);
  EXPECT_EQ(largest_allowed_at_most(sizes, 23), 16u);
  EXPECT_EQ(largest_allowed_at_most(sizes, 3), 2u);
  EXPECT_EQ(largest_allowed_at_most(sizes, 0), 0u);
  EXPECT_EQ(largest_allowed_at_most(sizes, 1000), 256u);
}

TEST(Poisson, MeanGapWithinTwoPercent) {
  const double rate = 4.0;
  const auto t = poisson_arrivals(rate, 10000, 42);
  EXPECT_NEAR(t.back() / 10000.0, 1.0 / rate, 0.02 / rate);
}

TEST(Poisson, StrictlyIncreasingAndSeeded) {
  const auto a = poisson_arrivals(100.0, 5000, 1);
  for (std::size_t i = 1; i < a.size(); ++i) EXPECT_LT(a[i - 1], a[i]);
  EXPECT_GT(a[0], 0.0);
  EXPECT_EQ(a, poisson_arrivals(100.0, 5000, 1));
  EXPECT_NE(a, poisson_arrivals(100.0, 5000, 2));
  EXPECT_THROW(poisson_arrivals(0.0, 3, 1), ContractError);
}

TEST(Trace, ParsesValidLines) {
  std::istringstream in(
      "{\"id\":\"a\",\"arrival_s\":0.5,\"system_prompt_id\":\"sp\",\"user_len\":3,\"gen_len\":4}\n"
      "\n"
      "{\"id\":\"b\",\"arrival_s\":1,\"system_prompt_id\":\"sp\",\"user_len\":1,\"gen_len\":1}\n");
  const auto r = parse_trace(in);
  ASSERT_EQ(r.size(), 2u);
  EXPECT_EQ(r[0].id, "a");
  EXPECT_EQ(r[0].arrival_time, 0.5);
  EXPECT_EQ(r[0].user_len, 3u);
  EXPECT_EQ(r[0].max_gen, 4u);
}

TEST(Trace, ErrorsNameTheLine) {
  const char* bad[] = {
      "{\"id\":\"a\",\"arrival_s\":0,\"system_prompt_id\":\"s\",\"user_len\":0,\"gen_len\":4}",
      "{\"id\":\"a\",\"arrival_s\":0,\"system_prompt_id\":\"s\",\"user_len\":2}",
      "not json",
      "{\"id\":\"a\",\"arrival_s\":\"x\",\"system_prompt_id\":\"s\",\"user_len\":2,\"gen_len\":4}",
  };
  for (const char* line : bad) {
    std::istringstream in(std::string(
        "{\"id\":\"ok\",\"arrival_s\":0,\"system_prompt_id\":\"s\",\"user_len\":1,\"gen_len\":1}\n") + line);
    try {
      parse_trace(in);
      ADD_FAILURE() << line;
    } catch (const ParseError& e) {
      EXPECT_EQ(e.line(), 2u);
      EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
    }
  }
}

TEST(Trace, WriteThenParse) {
  const auto reqs = synth_chat_trace(20, 5);
  std::ostringstream out;
  write_trace(out, reqs);
  std::istringstream in(out.str());
  const auto back = parse_trace(in);
  ASSERT_EQ(back.size(), reqs.size());
  for (std::size_t i = 0; i < reqs.size(); ++i) {
    EXPECT_EQ(back[i].user_len, reqs[i].user_len);
    EXPECT_EQ(back[i].max_gen, reqs[i].max_gen);
  }
}

TEST(Workload, Presets) {
  const auto p = synthetic_presets();
  ASSERT_EQ(p.size(), 3u);
  EXPECT_EQ(p[0].user_len, 64u);
  EXPECT_EQ(p[0].gen_len, 128u);
  EXPECT_EQ(p[2].user_len, 256u);
  EXPECT_EQ(p[2].gen_len, 512u);
  const auto w = synth_workload(64, 128, 5);
  EXPECT_EQ(w.size(), 5u);
  for (const auto& r : w) EXPECT_EQ(r.user_len + r.max_gen, 192u);
}

TEST(Scheduler, ReservesLifetimeBlocks) {
  SchedulerConfig cfg;
  cfg.kv_pool_blocks = 100;
  Scheduler base(cfg, ExecutionMode::kBaseline, 32);
  Scheduler relay(cfg, ExecutionMode::kRelay, 32);
  Request r;
  r.user_len = 10;
  r.max_gen = 6;
  EXPECT_EQ(base.blocks_required(r), 3u);
  EXPECT_EQ(relay.blocks_required(r), 1u);
  EXPECT_EQ(relay.used_blocks(), 2u);
}

TEST(Scheduler, ImpossibleRequestIsRejected) {
  SchedulerConfig cfg;
  cfg.kv_pool_blocks = 4;
  cfg.block_size = 4;
  Scheduler s(cfg, ExecutionMode::kBaseline, 0);
  std::vector<Request> reqs(1);
  reqs[0].user_len = 30;
  std::deque<std::size_t> queue{0};
  std::vector<std::size_t> running;
  EXPECT_THROW(s.schedule_step(queue, running, reqs), CapacityError);
}

TEST(Simulation, BatchJobConservationAndMembership) {
  auto reqs = synth_chat_trace(60, 9, 64, 64);
  SchedulerConfig cfg;
  cfg.kv_pool_blocks = 200;
  AnalyticStepExecutor exec(kToy, a100(), ExecutionMode::kBaseline, 64);
  const auto r = run_batch_job(reqs, ExecutionMode::kBaseline, 64, cfg, exec);
  EXPECT_EQ(r.metrics.finished, reqs.size());
  std::size_t tokens = 0;
  for (const auto& q : r.requests) {
    EXPECT_EQ(q.state, RequestState::kFinished);
    EXPECT_EQ(q.tokens_emitted, q.max_gen);
    ASSERT_TRUE(q.first_token_time && q.finish_time);
    EXPECT_LE(q.arrival_time, *q.first_token_time);
    EXPECT_LE(*q.first_token_time, *q.finish_time);
    tokens += q.tokens_emitted;
  }
  EXPECT_EQ(r.metrics.tokens, tokens);
  const auto allowed = default_allowed_batch_sizes();
  for (const auto& step : r.steps) {
    EXPECT_NE(std::find(allowed.begin(), allowed.end(), step.batch_size), allowed.end());
    EXPECT_LE(step.running + step.queued, reqs.size());
  }
  std::size_t hist_steps = 0;
  for (const auto& [size, count] : r.metrics.batch_size_hist) hist_steps += count;
  EXPECT_EQ(hist_steps, r.steps.size());
}

TEST(Simulation, DeterministicAnalyticCosts) {
  auto reqs = synth_chat_trace(40, 3);
  AnalyticStepExecutor e1(kToy, a100(), ExecutionMode::kRelay, 256);
  AnalyticStepExecutor e2(kToy, a100(), ExecutionMode::kRelay, 256);
  const auto a = run_interactive_sim(reqs, 5000.0, 8, ExecutionMode::kRelay, 256, {}, e1);
  const auto b = run_interactive_sim(reqs, 5000.0, 8, ExecutionMode::kRelay, 256, {}, e2);
  EXPECT_EQ(metrics_csv_row(ExecutionMode::kRelay, 256, a.metrics),
            metrics_csv_row(ExecutionMode::kRelay, 256, b.metrics));
}

TEST(Simulation, ArrivalsRespected) {
  auto reqs = synth_workload(8, 4, 10);
  AnalyticStepExecutor exec(kToy, a100(), ExecutionMode::kRelay, 16);
  const auto r = run_interactive_sim(reqs, 10.0, 4, ExecutionMode::kRelay, 16, {}, exec);
  for (const auto& q : r.requests) EXPECT_GE(*q.first_token_time, q.arrival_time);
}

TEST(Simulation, EngineExecutorRunsToyModel) {
  ModelConfig mc;
  mc.layers = 1;
  mc.heads = 2;
  mc.head_dim = 4;
  mc.ffn_dim = 8;
  mc.vocab_size = 32;
  auto model = std::make_shared<const DecoderModel>(mc);
  for (const ExecutionMode mode : {ExecutionMode::kBaseline, ExecutionMode::kRelay}) {
    InferenceEngine engine(model, {mode, 256, 4});
    engine.set_system_prompt({3, 1, 4, 1, 5});
    EngineStepExecutor exec(engine, 2);
    SchedulerConfig cfg;
    cfg.kv_pool_blocks = 256;
    cfg.block_size = 4;
    const auto r = run_batch_job(synth_workload(3, 4, 6), mode, 5, cfg, exec);
    EXPECT_EQ(r.metrics.finished, 6u);
    EXPECT_GT(r.metrics.elements_read_total, 0u);
    EXPECT_EQ(engine.kv_cache().num_sequences(), 0u);
  }
}

TEST(Metrics, CsvLayout) {
  Metrics m;
  m.batch_size_hist = {{8, 3}, {1, 2}};
  EXPECT_EQ(format_batch_histogram(m.batch_size_hist), "1:2;8:3");
  const std::string row = metrics_csv_row(ExecutionMode::kRelay, 64, m);
  EXPECT_EQ(row.rfind("relay,64,1:2;8:3,", 0), 0u);
  EXPECT_EQ(std::count(row.begin(), row.end(), ','), 6);
}

}  // namespace
}  // namespace relayattn
