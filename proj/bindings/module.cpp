// Python surface over the f32 library path: model lifecycle, target capture,
// replay scoring, the three inversion algorithms and dataset generation.
// Campaign orchestration stays on the CLI; see tools/soda_main.cpp.

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "soda/checkpoint.hpp"
#include "soda/dataset.hpp"
#include "soda/model.hpp"
#include "soda/objective.hpp"
#include "soda/optimize.hpp"

namespace py = pybind11;
using namespace soda;

namespace {

struct PyModel {
    ModelConfig cfg;
    ModelWeights<float> w;
};

long param_count(PyModel& m) {
    long n = 0;
    for_each_tensor(m.cfg, m.w, [&](const std::string&, Tensor<float>& t) { n += t.numel(); });
    return n;
}

ObjectiveSpec spec_from_args(const std::string& mode, double fluency_weight, double tau_out) {
    ObjectiveSpec s;
    if (mode == "logit")
        s.mode = LossMode::logit;
    else if (mode == "text")
        s.mode = LossMode::text;
    else
        throw ConfigError("mode must be 'logit' or 'text', got '" + mode + "'");
    s.fluency_weight = fluency_weight;
    s.output_softmax_tau = tau_out;
    return s;
}

py::dict result_to_dict(const InversionResult& r, const std::vector<TracePoint>& trace,
                        bool want_trace) {
    py::dict d;
    d["x_star"] = r.x_star;
    d["success"] = r.success;
    d["iterations"] = r.iterations;
    d["final_loss"] = r.final_loss;
    d["forwards"] = r.forwards;
    if (want_trace) {
        py::list tr;
        for (const TracePoint& p : trace) {
            py::dict e;
            e["t"] = p.t;
            e["loss"] = p.loss;
            e["candidate_loss"] = p.candidate_loss;
            e["exact_so_far"] = p.exact_so_far;
            tr.append(e);
        }
        d["trace"] = tr;
    }
    return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Exact input reconstruction for small causal transformers";
    m.attr("ALL") = k_all;
    m.attr("__version__") = "0.1.0";

    py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
    py::register_exception<ParamError>(m, "ParamError", PyExc_ValueError);
    py::register_exception<CapacityError>(m, "CapacityError", PyExc_ValueError);
    py::register_exception<ContractError>(m, "ContractError", PyExc_RuntimeError);
    py::register_exception<ParseError>(m, "ParseError", PyExc_ValueError);
    py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);

    py::class_<ModelConfig>(m, "ModelConfig")
        .def(py::init([](long vocab_size, long n_layers, long d_model, long n_heads, long d_ff,
                         long max_seq_len, const std::string& activation, double layernorm_eps,
                         bool tie_output) {
                 ModelConfig c;
                 c.vocab_size = vocab_size;
                 c.n_layers = n_layers;
                 c.d_model = d_model;
                 c.n_heads = n_heads;
                 c.d_ff = d_ff;
                 c.max_seq_len = max_seq_len;
                 c.activation = act_from_name(activation);
                 c.layernorm_eps = layernorm_eps;
                 c.tie_output = tie_output;
                 c.validate();
                 return c;
             }),
             py::arg("vocab_size"), py::arg("n_layers"), py::arg("d_model"), py::arg("n_heads"),
             py::arg("d_ff"), py::arg("max_seq_len"), py::arg("activation") = "gelu",
             py::arg("layernorm_eps") = 1e-5, py::arg("tie_output") = false)
        .def_readonly("vocab_size", &ModelConfig::vocab_size)
        .def_readonly("n_layers", &ModelConfig::n_layers)
        .def_readonly("d_model", &ModelConfig::d_model)
        .def_readonly("n_heads", &ModelConfig::n_heads)
        .def_readonly("d_ff", &ModelConfig::d_ff)
        .def_readonly("max_seq_len", &ModelConfig::max_seq_len)
        .def_readonly("layernorm_eps", &ModelConfig::layernorm_eps)
        .def_readonly("tie_output", &ModelConfig::tie_output)
        .def_property_readonly("activation",
                               [](const ModelConfig& c) { return std::string(act_name(c.activation)); })
        .def("__repr__", [](const ModelConfig& c) {
            return "ModelConfig(vocab_size=" + std::to_string(c.vocab_size) +
                   ", n_layers=" + std::to_string(c.n_layers) +
                   ", d_model=" + std::to_string(c.d_model) +
                   ", n_heads=" + std::to_string(c.n_heads) + ", d_ff=" + std::to_string(c.d_ff) +
                   ", max_seq_len=" + std::to_string(c.max_seq_len) + ")";
        });

    py::class_<PyModel>(m, "Model")
        .def_property_readonly("config", [](const PyModel& mm) { return mm.cfg; })
        .def_property_readonly("num_parameters", &param_count)
        .def("generate",
             [](PyModel& mm, const TokenSequence& x, long n_out) {
                 return generate_greedy(mm.cfg, mm.w, x, n_out);
             },
             py::arg("x"), py::arg("m"), "Greedy continuation of m tokens after prompt x.")
        .def("save", [](PyModel& mm, const std::string& path) { save_checkpoint(mm.cfg, mm.w, path); },
             py::arg("path"));

    m.def("init_model",
          [](const ModelConfig& cfg, std::uint64_t seed) {
              return PyModel{cfg, init_random<float>(cfg, seed)};
          },
          py::arg("config"), py::arg("seed") = 0);
    m.def("load_model", [](const std::string& path) {
              auto [cfg, w] = load_checkpoint<float>(path);
              return PyModel{cfg, std::move(w)};
          },
          py::arg("path"));

    py::class_<TargetOutput>(m, "Target")
        .def_property_readonly("y", [](const TargetOutput& t) { return t.y; })
        .def_readonly("n_input", &TargetOutput::n_input)
        .def_readonly("k", &TargetOutput::k)
        .def_property_readonly("has_logits", &TargetOutput::has_logits)
        .def_property_readonly("logits", [](const TargetOutput& t) { return t.logits; })
        .def("to_json", [](const TargetOutput& t) { return target_to_json(t).dump(); })
        .def_static("from_json",
                    [](const std::string& s) { return target_from_json(nlohmann::json::parse(s)); },
                    py::arg("text"))
        .def("__repr__", [](const TargetOutput& t) {
            return "Target(n_input=" + std::to_string(t.n_input) + ", m=" + std::to_string(t.y.size()) +
                   ", k=" + (t.k == k_all ? std::string("ALL") : std::to_string(t.k)) + ")";
        });

    m.def("make_target",
          [](PyModel& mm, const TokenSequence& x, long n_out, long k) {
              return make_target(mm.cfg, mm.w, x, n_out, k);
          },
          py::arg("model"), py::arg("x"), py::arg("m"), py::arg("k") = k_all,
          "Greedy-decode m tokens from x and record the observation handed to the "
          "inverter: the output ids plus the k largest logits per output position "
          "(k=ALL keeps every coordinate, k=0 text only).");

    m.def("replay_loss",
          [](PyModel& mm, const TargetOutput& target, const TokenSequence& x,
             const std::string& mode, double fluency_weight, double output_softmax_tau) {
              ObjectiveSpec spec = spec_from_args(mode, fluency_weight, output_softmax_tau);
              ObjectivePlan<float> plan;
              plan.build(mm.cfg, target, spec);
              Scratch<float> s;
              return plan.replay_loss(mm.cfg, mm.w, x, s);
          },
          py::arg("model"), py::arg("target"), py::arg("x"), py::arg("mode") = "logit",
          py::arg("fluency_weight") = 0.0, py::arg("output_softmax_tau") = 1.0,
          "Exact output-matching loss of a discrete candidate; the true input "
          "scores 0.0 bit-for-bit.");

    py::class_<SodaParams>(m, "SodaParams")
        .def(py::init<>())
        .def_readwrite("t_max", &SodaParams::t_max)
        .def_readwrite("gamma", &SodaParams::gamma)
        .def_readwrite("beta1", &SodaParams::beta1)
        .def_readwrite("beta2", &SodaParams::beta2)
        .def_readwrite("tau", &SodaParams::tau)
        .def_readwrite("lambda_", &SodaParams::lambda)
        .def_readwrite("t1", &SodaParams::t1)
        .def_readwrite("t2", &SodaParams::t2)
        .def_readwrite("eps_adam", &SodaParams::eps_adam)
        .def_readwrite("eps_term", &SodaParams::eps_term)
        .def_readwrite("reinit_std", &SodaParams::reinit_std)
        .def_readwrite("seed", &SodaParams::seed)
        .def_readwrite("use_decay", &SodaParams::use_decay)
        .def_readwrite("use_resets", &SodaParams::use_resets)
        .def_readwrite("bias_correction", &SodaParams::bias_correction);

    py::class_<GcgParams>(m, "GcgParams")
        .def(py::init<>())
        .def_readwrite("t_max", &GcgParams::t_max)
        .def_readwrite("c_max", &GcgParams::c_max)
        .def_readwrite("k_sub", &GcgParams::k_sub)
        .def_readwrite("seed", &GcgParams::seed)
        .def_readwrite("eps_term", &GcgParams::eps_term)
        .def_readwrite("batched", &GcgParams::batched);

    m.def("invert",
          [](PyModel& mm, const TargetOutput& target, const std::string& algorithm,
             std::optional<SodaParams> soda, std::optional<GcgParams> gcg, const std::string& mode,
             double fluency_weight, double output_softmax_tau, long trace_every,
             std::optional<TokenSequence> truth, long forward_budget) {
              ObjectiveSpec spec = spec_from_args(mode, fluency_weight, output_softmax_tau);
              std::vector<TracePoint> trace;
              InvertOptions opt;
              opt.trace = trace_every > 0 ? &trace : nullptr;
              opt.trace_every = trace_every;
              opt.truth = truth ? &*truth : nullptr;
              opt.forward_budget = forward_budget;
              InversionResult r;
              {
                  py::gil_scoped_release nogil;
                  if (algorithm == "soda")
                      r = soda_invert(mm.cfg, mm.w, target, spec, soda.value_or(SodaParams{}), opt);
                  else if (algorithm == "embed")
                      r = embedding_invert(mm.cfg, mm.w, target, spec, soda.value_or(SodaParams{}),
                                           opt);
                  else if (algorithm == "gcg")
                      r = gcg_invert(mm.cfg, mm.w, target, spec, gcg.value_or(GcgParams{}), opt);
                  else
                      throw ConfigError("algorithm must be 'soda', 'embed' or 'gcg', got '" +
                                        algorithm + "'");
              }
              return result_to_dict(r, trace, trace_every > 0);
          },
          py::arg("model"), py::arg("target"), py::arg("algorithm") = "soda",
          py::arg("soda") = std::nullopt, py::arg("gcg") = std::nullopt, py::arg("mode") = "logit",
          py::arg("fluency_weight") = 0.0, py::arg("output_softmax_tau") = 1.0,
          py::arg("trace_every") = 0, py::arg("truth") = std::nullopt,
          py::arg("forward_budget") = 0,
          "Reconstruct the input behind a captured target. Success means the "
          "returned tokens replay the objective below the termination threshold; "
          "with default thresholds that requires hitting the recorded outputs "
          "exactly.");

    m.def("gen_dataset",
          [](long vocab_size, long len_lo, long len_hi, long per_length, std::uint64_t seed) {
              py::list out;
              for (const DatasetRecord& r : gen_random_dataset(vocab_size, len_lo, len_hi,
                                                               per_length, seed)) {
                  py::dict d;
                  d["id"] = r.id;
                  d["tokens"] = r.tokens;
                  d["pii_mask"] = r.pii_mask;
                  d["has_pii"] = r.has_pii;
                  out.append(d);
              }
              return out;
          },
          py::arg("vocab_size"), py::arg("len_lo"), py::arg("len_hi"), py::arg("per_length"),
          py::arg("seed"));
}
