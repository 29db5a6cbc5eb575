// SPDX-License-Identifier: Apache-2.0
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "moelab/data.hpp"
#include "moelab/errors.hpp"
#include "moelab/gap_oracle.hpp"
#include "moelab/harness.hpp"
#include "moelab/overlap.hpp"
#include "moelab/stats.hpp"
#include "moelab/trainer.hpp"

namespace py = pybind11;
using namespace moelab;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

// Layers of expert matrices → owned tensors plus the pointer view the library expects.
struct OwnedWeights {
  std::vector<std::vector<Tensor>> tensors;
  ExpertWeights view;
  explicit OwnedWeights(const std::vector<std::vector<Array>>& layers) {
    for (const auto& layer : layers) {
      tensors.emplace_back();
      for (const auto& w : layer) tensors.back().push_back(to_tensor(w));
    }
    for (const auto& layer : tensors) {
      view.emplace_back();
      for (const auto& t : layer) view.back().push_back(&t);
    }
  }
};

py::dict correlation_dict(const stats::CorrelationResult& r) {
  py::dict d;
  d["r"] = r.r;
  d["n"] = r.n;
  d["t"] = r.t_statistic;
  d["p"] = r.p_two_sided;
  d["ci95"] = r.ci95 ? py::object(py::make_tuple(r.ci95->low, r.ci95->high)) : py::none();
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Native core of moelab";
  m.attr("__version__") = code_version();

  auto base = py::register_exception<Error>(m, "MoelabError", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", base);
  py::register_exception<DimensionError>(m, "DimensionError", base);
  py::register_exception<InputError>(m, "InputError", base);
  py::register_exception<UndefinedMetricError>(m, "UndefinedMetricError", base);
  py::register_exception<DegenerateParameterError>(m, "DegenerateParameterError", base);
  auto st = py::register_exception<StatisticsError>(m, "StatisticsError", base);
  py::register_exception<UndefinedCorrelationError>(m, "UndefinedCorrelationError", st);
  py::register_exception<SampleSizeError>(m, "SampleSizeError", st);
  py::register_exception<DegenerateTestError>(m, "DegenerateTestError", st);
  py::register_exception<AnalysisScopeError>(m, "AnalysisScopeError", base);
  py::register_exception<DivergenceError>(m, "DivergenceError", base);
  py::register_exception<IoError>(m, "IoError", base);

  m.def("student_t_cdf", &stats::student_t_cdf, py::arg("t"), py::arg("df"));
  m.def("regularized_incomplete_beta", &stats::regularized_incomplete_beta, py::arg("a"), py::arg("b"), py::arg("x"));
  m.def("correlation_p_value", &stats::correlation_p_value, py::arg("r"), py::arg("n"));
  m.def(
      "fisher_ci",
      [](double r, std::size_t n) {
        const auto ci = stats::fisher_ci(r, n);
        return py::make_tuple(ci.low, ci.high);
      },
      py::arg("r"), py::arg("n"));
  m.def(
      "pearson",
      [](const std::vector<double>& x, const std::vector<double>& y) { return correlation_dict(stats::pearson(x, y)); },
      py::arg("x"), py::arg("y"));
  m.def(
      "paired_t_test",
      [](const std::vector<double>& a, const std::vector<double>& b) {
        const auto r = stats::paired_t_test(a, b);
        py::dict d;
        d["n"] = r.n;
        d["mean_diff"] = r.mean_diff;
        d["sd_diff"] = r.sd_diff;
        d["t"] = r.t_statistic;
        d["df"] = r.degrees_freedom;
        d["p"] = r.p_two_sided;
        d["saturated"] = r.saturated;
        return d;
      },
      py::arg("a"), py::arg("b"));

  m.def(
      "weight_mso",
      [](const std::vector<std::vector<Array>>& layers) {
        const OwnedWeights w(layers);
        const WeightMso r = weight_mso(w.view);
        return py::make_tuple(r.per_layer, r.mean);
      },
      py::arg("layers"), "Per-layer and mean weight MSO of flattened expert up-projections.");
  m.def(
      "orthogonality_loss",
      [](const std::vector<std::vector<Array>>& layers) { return orthogonality_loss_value(OwnedWeights(layers).view); },
      py::arg("layers"));
  m.def(
      "activation_mso",
      [](const Array& outputs) {
        if (outputs.ndim() != 3) throw DimensionError("activation_mso expects an array [tokens, k, d_model]");
        RoutingTrace tr;
        tr.tokens = static_cast<std::size_t>(outputs.shape(0));
        tr.k = static_cast<std::size_t>(outputs.shape(1));
        tr.d_model = static_cast<std::size_t>(outputs.shape(2));
        tr.experts.resize(tr.tokens * tr.k, 0);
        tr.gates.resize(tr.tokens * tr.k, 0.0);
        tr.outputs.assign(outputs.data(), outputs.data() + outputs.size());
        return activation_mso(std::span(&tr, 1)).mean;
      },
      py::arg("outputs"), "Activation MSO of unweighted expert outputs for one layer.");

  m.def(
      "gap_oracle_json",
      [](std::size_t d_model, std::size_t d_ffn, std::size_t trials, std::uint64_t seed) {
        py::gil_scoped_release release;
        return Json(gap_oracle(d_model, d_ffn, trials, seed)).dump();
      },
      py::arg("d_model") = 32, py::arg("d_ffn") = 32, py::arg("trials") = 10000, py::arg("seed") = 0);

  m.def("default_model_config_json", [] { return Json(MoEModelConfig::desk()).dump(); });
  m.def("full_scale_model_config_json", [] { return Json(MoEModelConfig::full_scale()).dump(); });
  m.def("default_train_config_json", [] { return Json(TrainConfig{}).dump(); });
  m.def(
      "parameter_count",
      [](const std::string& config_json) {
        const auto c = Json::parse(config_json).get<MoEModelConfig>();
        c.validate();
        return c.parameter_count();
      },
      py::arg("config_json"));

  m.def(
      "corpus_info_json",
      [](const std::filesystem::path& path, double split) {
        const Corpus c = load_corpus(path, split);
        return Json{{"source", c.source},
                    {"digest_sha256", c.digest},
                    {"tokens", c.total_tokens()},
                    {"train_tokens", c.train_tokens.size()},
                    {"val_tokens", c.val_tokens.size()}}
            .dump();
      },
      py::arg("path"), py::arg("val_split") = 0.1);

  m.def(
      "train_json",
      [](const std::string& model_json, const std::string& train_json, const std::filesystem::path& corpus,
         double val_split, std::optional<std::filesystem::path> output_dir) {
        const auto mc = Json::parse(model_json).get<MoEModelConfig>();
        const auto tc = Json::parse(train_json).get<TrainConfig>();
        py::gil_scoped_release release;
        const Corpus c = load_corpus(corpus, val_split);
        RunOptions ro;
        ro.output_dir = output_dir;
        return Json(run_training(mc, tc, c, ro).records).dump();
      },
      py::arg("model_json"), py::arg("train_json"), py::arg("corpus"), py::arg("val_split") = 0.1,
      py::arg("output_dir") = py::none());

  m.def(
      "analyze_sweep_json",
      [](const std::filesystem::path& sweep_dir, bool partial, std::optional<std::filesystem::path> output_dir) {
        AnalysisOptions o;
        o.require_complete = !partial;
        const AnalysisBundle b = analyze_sweep(load_sweep(sweep_dir), o);
        if (output_dir) write_analysis(b, *output_dir);
        return Json(b).dump();
      },
      py::arg("sweep_dir"), py::arg("partial") = false, py::arg("output_dir") = py::none());
}
