#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "kbprobe/calibrate.hpp"
#include "kbprobe/error.hpp"
#include "kbprobe/estimator.hpp"
#include "kbprobe/metrics.hpp"
#include "kbprobe/reformulate.hpp"
#include "kbprobe/state_store.hpp"

namespace py = pybind11;
using namespace kbprobe;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

std::vector<float> to_vector(const FloatArray& a) {
  if (a.ndim() != 1) throw Error(Errc::dimension_mismatch, "expected a 1-d array");
  return {a.data(), a.data() + a.size()};
}

FloatArray to_array(const std::vector<float>& v) {
  FloatArray a(static_cast<py::ssize_t>(v.size()));
  std::copy(v.begin(), v.end(), a.mutable_data());
  return a;
}

py::dict metrics_dict(const MetricsReport& r) {
  py::dict d;
  d["n"] = r.n;
  d["acc"] = r.acc;
  d["conf"] = r.conf_ratio;
  d["alignment"] = r.alignment;
  d["overconfidence"] = r.overconfidence;
  d["conservativeness"] = r.conservativeness;
  d["upr"] = r.upr ? py::cast(*r.upr) : py::none();
  return d;
}

py::dict record_dict(const HiddenStateRecord& r) {
  py::dict d;
  d["id"] = r.id;
  d["question"] = r.question;
  d["response"] = r.response;
  d["gold_answers"] = r.gold_answers;
  d["label"] = r.label;
  d["prompt_style"] = std::string(to_string(r.prompt_style));
  d["pre"] = to_array(r.states.pre);
  d["last"] = to_array(r.states.last);
  d["avg"] = to_array(r.states.avg);
  d["token_logprobs"] = to_array(r.token_logprobs);
  d["layer"] = r.layer;
  d["k"] = r.k;
  return d;
}

HiddenStateRecord record_from_dict(const py::dict& d) {
  HiddenStateRecord r;
  r.id = d["id"].cast<std::string>();
  r.question = d.contains("question") ? d["question"].cast<std::string>() : std::string{};
  r.response = d.contains("response") ? d["response"].cast<std::string>() : std::string{};
  if (d.contains("gold_answers")) r.gold_answers = d["gold_answers"].cast<std::vector<std::string>>();
  r.label = d["label"].cast<std::uint8_t>();
  if (d.contains("prompt_style")) r.prompt_style = parse_prompt_style(d["prompt_style"].cast<std::string>());
  r.states.pre = to_vector(d["pre"].cast<FloatArray>());
  r.states.last = to_vector(d["last"].cast<FloatArray>());
  r.states.avg = to_vector(d["avg"].cast<FloatArray>());
  if (d.contains("token_logprobs")) r.token_logprobs = to_vector(d["token_logprobs"].cast<FloatArray>());
  if (d.contains("layer")) r.layer = d["layer"].cast<int>();
  if (d.contains("k")) r.k = d["k"].cast<int>();
  return r;
}

Dataset dataset_from_records(const std::vector<py::dict>& records) {
  Dataset ds;
  for (const auto& d : records) ds.records.push_back(record_from_dict(d));
  ds.h = ds.records.empty() ? 0 : ds.records.front().states.h();
  return ds;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Hidden-state confidence probing toolkit";

  // Carries the error category as `.code`, e.g. "missing_key".
  static PyObject* error_type = PyErr_NewException("kbprobe._core.Error", PyExc_RuntimeError, nullptr);
  m.add_object("Error", py::handle(error_type));
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      py::object err = py::handle(error_type)(py::str(e.what()));
      err.attr("code") = errc_name(e.code());
      PyErr_SetObject(error_type, err.ptr());
    }
  });

  m.def("pool_states", [](py::array_t<float, py::array::c_style | py::array::forcecast> tokens, std::size_t question_len) {
    if (tokens.ndim() != 2) throw Error(Errc::dimension_mismatch, "token states must be 2-d (tokens x h)");
    const auto n = static_cast<std::size_t>(tokens.shape(0));
    const auto h = static_cast<std::size_t>(tokens.shape(1));
    std::vector<std::vector<float>> rows(n);
    for (std::size_t t = 0; t < n; ++t) rows[t].assign(tokens.data() + t * h, tokens.data() + (t + 1) * h);
    const auto s = pool_states(rows, question_len);
    py::dict d;
    d["pre"] = to_array(s.pre);
    d["last"] = to_array(s.last);
    d["avg"] = to_array(s.avg);
    return d;
  }, py::arg("token_states"), py::arg("question_len") = 1,
     "Pool per-token states (question tokens first) into pre/last/avg vectors.");

  m.def("contains_answer", [](const std::string& response, const std::vector<std::string>& gold) {
    return contains_answer(response, gold);
  });

  m.def("read_dump", [](const std::filesystem::path& path) {
    const auto ds = read_dump(path);
    py::list out;
    for (const auto& r : ds.records) out.append(record_dict(r));
    return out;
  }, py::arg("path"), "Read a dump and its text sidecar into a list of record dicts.");

  m.def("write_dump", [](const std::vector<py::dict>& records, const std::filesystem::path& path) {
    write_dump(dataset_from_records(records), path);
  }, py::arg("records"), py::arg("path"));

  m.def("compute_metrics", [](const std::vector<std::uint8_t>& correct, const std::vector<std::uint8_t>& confident) {
    if (correct.size() != confident.size()) throw Error(Errc::invalid_argument, "length mismatch");
    std::vector<Outcome> rows;
    for (std::size_t i = 0; i < correct.size(); ++i) rows.push_back({correct[i], confident[i]});
    return metrics_dict(compute_metrics(rows));
  }, py::arg("correct"), py::arg("confident"));

  m.def("c3_calibrate", [](std::uint8_t c, const std::map<int, std::uint8_t>& mc, std::vector<int> k_set, int beta) {
    CalibrationConfig cfg{std::move(k_set), beta};
    return c3_calibrate(c, mc, cfg);
  }, py::arg("c"), py::arg("mc"), py::arg("k_set") = std::vector<int>{2, 4, 6, 8}, py::arg("beta") = 0);

  m.def("parse_candidates", [](const std::string& raw, std::size_t alpha) {
    return parse_candidates(raw, alpha).answers;
  }, py::arg("raw"), py::arg("alpha") = 10);

  m.def("build_mc", [](const std::vector<std::string>& answers, std::size_t k, const std::string& question,
                       const std::vector<std::string>& gold, const std::string& style) {
    CandidateSet c;
    c.answers = answers;
    const auto q = build_mc(c, k, question, gold, parse_prompt_style(style));
    py::dict d;
    py::list options;
    for (const auto& o : q.options) options.append(py::make_tuple(std::string(1, o.letter), o.text));
    d["options"] = options;
    d["k_requested"] = q.k_requested;
    d["prompt"] = q.rendered_prompt;
    d["gold_letter"] = q.gold_letter ? py::cast(std::string(1, *q.gold_letter)) : py::none();
    return d;
  }, py::arg("answers"), py::arg("k"), py::arg("question"), py::arg("gold_answers"),
     py::arg("style") = "mc_vanilla");

  m.def("render_prompt", [](const std::string& style, const std::string& question) {
    return PromptTemplates::builtin().render(parse_prompt_style(style), question);
  });

  py::class_<EstimatorModel>(m, "Estimator")
      .def_static("load", [](const std::filesystem::path& p) { return load_model(p); })
      .def("save", [](const EstimatorModel& mdl, const std::filesystem::path& p) { save_model(mdl, p); })
      .def_property_readonly("h", &EstimatorModel::h)
      .def_readonly("seed", &EstimatorModel::seed)
      .def_property_readonly("pooling", [](const EstimatorModel& mdl) { return std::string(to_string(mdl.pooling_policy)); })
      .def("p1", [](const EstimatorModel& mdl, const FloatArray& x) { return forward(mdl, to_vector(x)).p1; },
           "Probability of class 1 (confident) for one pooled state.");

  m.def("predict", [](const std::vector<EstimatorModel>& models, const FloatArray& x) {
    return predict(models, to_vector(x)).c;
  }, py::arg("models"), py::arg("state"), "Majority vote of the ensemble, ties toward 0.");

  m.def("train", [](const std::vector<py::dict>& records, const std::string& pooling, std::uint32_t epochs,
                    std::vector<std::uint64_t> seeds, double learning_rate) {
    TrainConfig cfg;
    cfg.epochs = epochs;
    cfg.seeds = std::move(seeds);
    cfg.learning_rate = learning_rate;
    const auto ds = dataset_from_records(records);
    py::gil_scoped_release release;
    return train(ds, parse_pooling(pooling), cfg).models;
  }, py::arg("records"), py::arg("pooling") = "last", py::arg("epochs") = 30,
     py::arg("seeds") = std::vector<std::uint64_t>{0, 42, 100}, py::arg("learning_rate") = 5e-5);
}
