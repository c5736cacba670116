// Python surface: the solver on numpy arrays, plus enough of the testbed and
// session engine to drive a consolidation from a notebook.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <cstring>

#include "qf/recipe.hpp"
#include "qf/report.hpp"

namespace py = pybind11;
using namespace qf;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Matrix to_matrix(const Array& a) {
  if (a.ndim() != 2) throw py::value_error("expected a 2-D array");
  Matrix m(a.shape(0), a.shape(1));
  if (m.size() > 0) std::memcpy(m.data().data(), a.data(), m.size() * sizeof(double));
  return m;
}

Array to_array(const Matrix& m) {
  Array a({m.rows(), m.cols()});
  if (m.size() > 0) std::memcpy(a.mutable_data(), m.data().data(), m.size() * sizeof(double));
  return a;
}

QfProblem problem(const Array& w, const Array& u, const Array& v, const Array& u_prime,
                  const Array& v_prime) {
  QfProblem p{to_matrix(w), to_matrix(u), to_matrix(v), to_matrix(u_prime), to_matrix(v_prime)};
  p.validate();
  return p;
}

py::dict report_dict(const UpdateReport& r) {
  py::dict d;
  d["w_prime"] = to_array(r.w_prime);
  d["delta_w"] = to_array(r.delta_w);
  d["delta_fro"] = r.delta_fro;
  d["residual_before"] = r.residual_before;
  d["residual_after"] = r.residual_after;
  d["gram_condition"] = r.gram_condition;
  d["effective_rank"] = r.effective_rank;
  d["tokens_used"] = r.tokens_used;
  return d;
}

}  // namespace

PYBIND11_MODULE(_qf, m) {
  m.doc() = "Closed-form knowledge consolidation";

  static py::exception<Error> qf_error(m, "QfError", PyExc_RuntimeError);
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      const py::object type = py::reinterpret_borrow<py::object>(qf_error.ptr());
      py::object exc = type(e.what());
      exc.attr("kind") = static_cast<int>(e.kind());
      PyErr_SetObject(type.ptr(), exc.ptr());
    }
  });
  py::enum_<ErrorKind>(m, "ErrorKind")
      .value("Shape", ErrorKind::Shape)
      .value("Contract", ErrorKind::Contract)
      .value("RankZero", ErrorKind::RankZero)
      .value("Degenerate", ErrorKind::Degenerate)
      .value("Overflow", ErrorKind::Overflow)
      .value("Tokenize", ErrorKind::Tokenize)
      .value("Divergence", ErrorKind::Divergence)
      .value("Io", ErrorKind::Io);

  m.def(
      "qf_update",
      [](const Array& w, const Array& u, const Array& v, const Array& u_prime, const Array& v_prime,
         double rel_tol) { return report_dict(qf_update(problem(w, u, v, u_prime, v_prime), rel_tol)); },
      py::arg("w"), py::arg("u"), py::arg("v"), py::arg("u_prime"), py::arg("v_prime"),
      py::arg("rel_tol") = kDefaultRelTol);
  m.def(
      "oracle_update",
      [](const Array& w, const Array& u, const Array& v, const Array& u_prime, const Array& v_prime) {
        return to_array(oracle_update(problem(w, u, v, u_prime, v_prime)));
      },
      py::arg("w"), py::arg("u"), py::arg("v"), py::arg("u_prime"), py::arg("v_prime"));
  m.def(
      "constraint_residual",
      [](const Array& candidate, const Array& w, const Array& u, const Array& v, const Array& u_prime,
         const Array& v_prime) {
        return constraint_residual(to_matrix(candidate), problem(w, u, v, u_prime, v_prime));
      },
      py::arg("candidate"), py::arg("w"), py::arg("u"), py::arg("v"), py::arg("u_prime"),
      py::arg("v_prime"));
  m.def(
      "apply_significance",
      [](const Array& w, const Array& u, const Array& v, const Array& u_prime, const Array& v_prime,
         const std::vector<int>& mask) {
        const QfProblem p = apply_significance(problem(w, u, v, u_prime, v_prime), mask);
        return py::make_tuple(to_array(p.w), to_array(p.u), to_array(p.v), to_array(p.u_prime),
                              to_array(p.v_prime));
      },
      py::arg("w"), py::arg("u"), py::arg("v"), py::arg("u_prime"), py::arg("v_prime"), py::arg("mask"));

  m.def("tokenize", [](const std::string& text) { return tokenize(text); });
  m.def("detokenize", [](const TokenSeq& ids) { return detokenize(ids); });
  m.attr("VOCAB_SIZE") = tokens::kVocabSize;

  py::class_<ModelConfig>(m, "ModelConfig")
      .def(py::init<>())
      .def_readwrite("n_layers", &ModelConfig::n_layers)
      .def_readwrite("d_model", &ModelConfig::d_model)
      .def_readwrite("n_heads", &ModelConfig::n_heads)
      .def_readwrite("d_ff", &ModelConfig::d_ff)
      .def_readwrite("vocab_size", &ModelConfig::vocab_size)
      .def_readwrite("max_seq", &ModelConfig::max_seq)
      .def_readwrite("layernorm_epsilon", &ModelConfig::layernorm_epsilon)
      .def("validate", &ModelConfig::validate)
      .def("__eq__", [](const ModelConfig& a, const ModelConfig& b) { return a == b; });

  py::class_<ModelWeights>(m, "Model")
      .def_static(
          "random",
          [](const ModelConfig& c, std::uint64_t seed, double stddev) {
            Rng rng(seed);
            return ModelWeights::random_init(c, rng, stddev);
          },
          py::arg("config"), py::arg("seed") = 0, py::arg("stddev") = 0.02)
      .def_static("load", &load_weights)
      .def("save", [](const ModelWeights& w, const std::filesystem::path& p) { save_weights(w, p); })
      .def_readonly("config", &ModelWeights::config)
      .def("tensor_names",
           [](const ModelWeights& w) {
             std::vector<std::string> out;
             for (const auto& t : w.tensors()) out.push_back(t.name);
             return out;
           })
      .def("tensor",
           [](const ModelWeights& w, const std::string& name) {
             for (const auto& t : w.tensors())
               if (t.name == name) return to_array(*t.tensor);
             throw py::key_error(name);
           })
      .def("down_proj", [](const ModelWeights& w, std::size_t layer) { return to_array(layer_down_proj(w, layer)); })
      .def("set_down_proj",
           [](ModelWeights& w, std::size_t layer, const Array& a) { set_layer_down_proj(w, layer, to_matrix(a)); })
      .def("logits", [](const ModelWeights& w, const TokenSeq& t) { return to_array(forward_full(w, t)); })
      .def("copy", [](const ModelWeights& w) { return ModelWeights(w); })
      .def("__eq__", [](const ModelWeights& a, const ModelWeights& b) { return a == b; });

  py::class_<Session>(m, "Session")
      .def(py::init([](std::string instruction, std::string query, std::string answer,
                       std::vector<int> significance, std::size_t layer, std::vector<std::string> paraphrases) {
             return Session{std::move(instruction), std::move(query), std::move(answer),
                            std::move(significance), layer, std::move(paraphrases)};
           }),
           py::arg("instruction"), py::arg("query"), py::arg("answer"), py::arg("significance"),
           py::arg("layer"), py::arg("paraphrases") = std::vector<std::string>{})
      .def_readwrite("instruction", &Session::instruction)
      .def_readwrite("query", &Session::query)
      .def_readwrite("answer", &Session::answer)
      .def_readwrite("significance", &Session::significance)
      .def_readwrite("layer", &Session::layer)
      .def_readwrite("paraphrases", &Session::paraphrases);

  m.def(
      "consolidate",
      [](ModelWeights& model, const Session& s, bool dry_run, double rel_tol) {
        const ConsolidationResult r = consolidate(model, s, dry_run, rel_tol);
        py::dict d = report_dict(r.report);
        d["answer_before"] = r.answer_before;
        d["answer_instructed"] = r.answer_instructed;
        d["answer_after"] = r.answer_after;
        d["committed"] = r.committed;
        return d;
      },
      py::arg("model"), py::arg("session"), py::arg("dry_run") = false, py::arg("rel_tol") = kDefaultRelTol);
  m.def("qf_infer", &qf_infer, py::arg("model"), py::arg("query"), py::arg("max_new") = kDefaultMaxNew);
  m.def("generate_instructed_answer", &generate_instructed_answer, py::arg("model"), py::arg("instruction"),
        py::arg("query"), py::arg("max_new") = kDefaultMaxNew);
  m.def(
      "forgetting_probe",
      [](const ModelWeights& before, const ModelWeights& after, const std::vector<std::string>& prompts) {
        const ForgettingProbe p = forgetting_probe(before, after, prompts);
        py::dict d;
        d["tv_distances"] = p.tv_distances;
        d["max_tv"] = p.max_tv;
        d["median_tv"] = p.median_tv;
        return d;
      },
      py::arg("before"), py::arg("after"), py::arg("prompts"));
  m.def(
      "continual_run_json",
      [](ModelWeights& model, const std::string& run_json, bool dry_run) {
        return report_to_json(continual_run(model, parse_run_json(run_json), dry_run));
      },
      py::arg("model"), py::arg("run_json"), py::arg("dry_run") = false);
  m.def("default_scenario_json", [] { return run_to_json(default_scenario(default_corpus())); });
}
