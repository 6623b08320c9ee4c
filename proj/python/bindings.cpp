// Copyright 2026 The RelayAttn Authors
// SPDX-License-Identifier: Apache-2.0

#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "relayattn/relayattn.hpp"

namespace py = pybind11;
using namespace relayattn;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor(std::move(shape), std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor& t) {
  Array out(std::vector<py::ssize_t>(t.shape().begin(), t.shape().end()));
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

std::vector<ContextKv> to_contexts(const std::vector<std::pair<Array, Array>>& contexts) {
  std::vector<ContextKv> out;
  out.reserve(contexts.size());
  for (const auto& [k, v] : contexts) out.push_back({to_tensor(k), to_tensor(v)});
  return out;
}

py::dict traffic_dict(const TrafficCounter& t) {
  py::dict d;
  d["elements_read"] = t.elements_read;
  d["elements_written"] = t.elements_written;
  d["lse_elements"] = t.lse_elements;
  d["transferred"] = t.transferred();
  return d;
}

py::dict metrics_dict(const Metrics& m) {
  py::dict d;
  d["tokens_per_s"] = m.throughput_tokens_per_s;
  d["req_per_s"] = m.throughput_req_per_s;
  d["normalized_latency"] = m.normalized_latency;
  d["makespan"] = m.makespan;
  d["finished"] = m.finished;
  d["tokens"] = m.tokens;
  d["elements_read_total"] = m.elements_read_total;
  d["batch_size_hist"] = m.batch_size_hist;
  return d;
}

ModelShape cost_shape(const std::string& name) {
  if (name == "llama2-7b") return ModelShape::llama2_7b();
  if (name == "engine") return ModelShape{};
  throw ConfigError("unknown cost shape: " + name);
}

}  // namespace

PYBIND11_MODULE(_relayattn, m) {
  m.doc() = "Relay attention: exact shared-prefix attention, paged KV cache and serving simulation";

  auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<DimensionError>(m, "DimensionError", base.ptr());
  py::register_exception<ContractError>(m, "ContractError", base.ptr());
  py::register_exception<CapacityError>(m, "CapacityError", base.ptr());
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<NumericError>(m, "NumericError", base.ptr());
  py::register_exception<ParseError>(m, "ParseError", base.ptr());

  m.def("matmul", [](const Array& a, const Array& b, const std::string& precision) {
    return to_array(matmul(to_tensor(a), to_tensor(b), parse_precision(precision)));
  }, py::arg("a"), py::arg("b_transposed"), py::arg("precision") = "f64");

  m.def("softmax_lse", [](const Array& logits) {
    const auto r = softmax_lse(to_tensor(logits));
    return py::make_tuple(to_array(r.probs), to_array(r.lse));
  });

  m.def("rope_apply", [](const Array& vec, std::size_t position) {
    return to_array(rope_apply(to_tensor(vec), position));
  }, py::arg("vec"), py::arg("position"));

  m.def("naive_causal_attention", [](const Array& q, const Array& k, const Array& v) {
    return to_array(naive_causal_attention(to_tensor(q), to_tensor(k), to_tensor(v)));
  });

  m.def("attention_with_lse", [](const Array& q, const Array& k, const Array& v, bool causal) {
    const auto r = attention_with_lse(to_tensor(q), to_tensor(k), to_tensor(v), causal);
    return py::make_tuple(to_array(r.output), to_array(r.lse));
  }, py::arg("q"), py::arg("k"), py::arg("v"), py::arg("causal"));

  m.def("relay_alpha_sys", &relay_alpha_sys, py::arg("lse_sys"), py::arg("lse_ctx"));

  m.def("relay_fusion", [](const Array& o_sys, const Array& lse_sys, const Array& o_ctx, const Array& lse_ctx) {
    return to_array(relay_fusion(to_tensor(o_sys), to_tensor(lse_sys), to_tensor(o_ctx), to_tensor(lse_ctx)));
  });

  m.def("relay_attention",
        [](const Array& q, const Array& sys_k, const Array& sys_v,
           const std::vector<std::pair<Array, Array>>& contexts, const std::string& precision,
           bool context_first) {
          TrafficCounter t;
          const auto ctx = to_contexts(contexts);
          const Tensor out = relay_attention(
              to_tensor(q), to_tensor(sys_k), to_tensor(sys_v), ctx,
              {parse_precision(precision), &t,
               context_first ? SegmentOrder::kContextFirst : SegmentOrder::kSystemFirst});
          return py::make_tuple(to_array(out), traffic_dict(t));
        },
        py::arg("q"), py::arg("sys_k"), py::arg("sys_v"), py::arg("contexts"), py::arg("precision") = "f64",
        py::arg("context_first") = false,
        "Returns (output [b x m x h x d], traffic counts). contexts is a list of (keys, values).");

  m.def("baseline_attention",
        [](const Array& q, const Array& sys_k, const Array& sys_v,
           const std::vector<std::pair<Array, Array>>& contexts, const std::string& precision) {
          TrafficCounter t;
          const auto ctx = to_contexts(contexts);
          const Tensor out = baseline_attention(to_tensor(q), to_tensor(sys_k), to_tensor(sys_v), ctx,
                                                {parse_precision(precision), &t});
          return py::make_tuple(to_array(out), traffic_dict(t));
        },
        py::arg("q"), py::arg("sys_k"), py::arg("sys_v"), py::arg("contexts"), py::arg("precision") = "f64");

  m.def("traffic_baseline", &traffic_baseline, py::arg("b"), py::arg("s"), py::arg("c"), py::arg("d"));
  m.def("traffic_relay", &traffic_relay, py::arg("b"), py::arg("s"), py::arg("c"), py::arg("d"));
  m.def("theoretical_speedup", &theoretical_speedup, py::arg("b"), py::arg("s"), py::arg("c"));
  m.def("arithmetic_intensity_gemm", [](std::uint64_t mm, std::uint64_t n, std::uint64_t k, double bpe) {
    return arithmetic_intensity_gemm({mm, n, k}, bpe);
  }, py::arg("m"), py::arg("n"), py::arg("k"), py::arg("bytes_per_element") = 2.0);
  m.def("balance_ratio", [](const std::string& name) { return balance_ratio(hardware_profile(name)); });
  m.def("hardware_profiles", [] {
    std::vector<std::string> names;
    for (const auto& p : builtin_hardware_profiles()) names.push_back(p.name);
    return names;
  });

  py::class_<ModelConfig>(m, "ModelConfig")
      .def(py::init<>())
      .def_readwrite("layers", &ModelConfig::layers)
      .def_readwrite("heads", &ModelConfig::heads)
      .def_readwrite("head_dim", &ModelConfig::head_dim)
      .def_readwrite("ffn_dim", &ModelConfig::ffn_dim)
      .def_readwrite("vocab_size", &ModelConfig::vocab_size)
      .def_readwrite("seed", &ModelConfig::seed)
      .def_property("precision", [](const ModelConfig& c) { return std::string(to_string(c.precision)); },
                    [](ModelConfig& c, const std::string& p) { c.precision = parse_precision(p); })
      .def_property_readonly("model_dim", &ModelConfig::model_dim)
      .def_static("load", [](const std::string& path) { return ModelConfig::load(path); });

  m.def("generate",
        [](const ModelConfig& config, const std::vector<TokenId>& system_prompt,
           const std::vector<std::vector<TokenId>>& prompts, std::size_t max_new_tokens,
           const std::string& mode, bool return_logits) {
          auto model = std::make_shared<const DecoderModel>(config);
          InferenceEngine engine(model, {parse_mode(mode), 4096, kDefaultBlockSize});
          if (!system_prompt.empty()) engine.set_system_prompt(system_prompt);
          std::vector<std::vector<std::vector<double>>> logits;
          auto tokens = generate(engine, prompts, max_new_tokens, [&](std::size_t, const StepOutput& o) {
            if (return_logits) logits.push_back(o.logits);
          });
          py::dict d;
          d["tokens"] = tokens;
          d["traffic"] = traffic_dict(engine.traffic());
          if (return_logits) d["logits"] = logits;
          return d;
        },
        py::arg("config"), py::arg("system_prompt"), py::arg("prompts"), py::arg("max_new_tokens"),
        py::arg("mode") = "relay", py::arg("return_logits") = false);

  m.def("poisson_arrivals", &poisson_arrivals, py::arg("rate"), py::arg("n"), py::arg("seed"));

  m.def("run_batch_job",
        [](std::size_t user_len, std::size_t gen_len, std::size_t n, const std::string& mode,
           std::size_t system_len, const std::string& hardware, const std::string& shape,
           std::size_t kv_blocks) {
          const ExecutionMode em = parse_mode(mode);
          AnalyticStepExecutor exec(cost_shape(shape), hardware_profile(hardware), em, system_len);
          SchedulerConfig cfg;
          cfg.kv_pool_blocks = kv_blocks;
          return metrics_dict(run_batch_job(synth_workload(user_len, gen_len, n), em, system_len, cfg, exec).metrics);
        },
        py::arg("user_len"), py::arg("gen_len"), py::arg("n"), py::arg("mode"), py::arg("system_len"),
        py::arg("hardware") = "A100-SXM4-80GB", py::arg("shape") = "engine", py::arg("kv_blocks") = 4096,
        "Noninteractive job with analytic step costs.");

  m.def("run_interactive_sim",
        [](std::size_t n, double rate, std::uint64_t seed, const std::string& mode, std::size_t system_len,
           const std::string& hardware, const std::string& shape, std::size_t kv_blocks) {
          const ExecutionMode em = parse_mode(mode);
          AnalyticStepExecutor exec(cost_shape(shape), hardware_profile(hardware), em, system_len);
          SchedulerConfig cfg;
          cfg.kv_pool_blocks = kv_blocks;
          return metrics_dict(
              run_interactive_sim(synth_chat_trace(n, seed), rate, seed, em, system_len, cfg, exec).metrics);
        },
        py::arg("n"), py::arg("rate"), py::arg("seed"), py::arg("mode"), py::arg("system_len"),
        py::arg("hardware") = "A100-SXM4-80GB", py::arg("shape") = "engine", py::arg("kv_blocks") = 4096,
        "Poisson-arrival serving over a synthetic chat trace with analytic step costs.");

  m.def("run_verification", [](std::size_t attention_cases, std::size_t model_cases, std::uint64_t seed,
                               const std::string& precision) {
    VerifyOptions o{attention_cases, model_cases, seed, parse_precision(precision)};
    py::list out;
    for (const auto& r : run_verification(o)) {
      py::dict d;
      d["name"] = r.name;
      d["cases"] = r.cases;
      d["max_abs_diff"] = r.max_abs_diff;
      d["tolerance"] = r.tolerance;
      d["mismatches"] = r.mismatches;
      d["passed"] = r.passed;
      out.append(d);
    }
    return out;
  }, py::arg("attention_cases") = 200, py::arg("model_cases") = 20, py::arg("seed") = 0,
     py::arg("precision") = "f64");
}
