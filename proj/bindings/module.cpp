#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "wpca/errors.hpp"
#include "wpca/gasearch.hpp"
#include "wpca/proxies.hpp"
#include "wpca/rankeval.hpp"
#include "wpca/rng.hpp"
#include "wpca/searchspace.hpp"
#include "wpca/serialize.hpp"
#include "wpca/version.hpp"

namespace py = pybind11;
using namespace wpca;

namespace {

ArchConfig config_of(const ArchGenome& genome, const SpaceSpec& space) { return decode(genome, space); }

std::vector<ProxyScore> score_genome(const ArchGenome& genome, const SpaceSpec& space,
                                     const std::vector<std::string>& proxies, const Batch& batch,
                                     double eta, std::uint64_t seed) {
  std::vector<Proxy> which;
  for (const std::string& name : proxies) which.push_back(parse_proxy(name));
  const std::uint64_t wseed = derive_seed(seed, std::span<const int>(genome));
  const Model model = instantiate(config_of(genome, space), wseed);
  ScoreOptions opts;
  opts.eta = eta;
  opts.seed = wseed;
  return score_proxies(which, model, batch, opts);
}

py::dict report_dict(const SearchReport& report) {
  py::dict d;
  d["best_genome"] = report.best_genome;
  d["best_fitness"] = report.best_fitness;
  d["best_total_params"] = report.best_params.total;
  d["best_config_json"] = config_to_json(report.best_config);
  d["fitness"] = report.fitness_name;
  d["seed"] = report.seed;
  d["evaluations"] = report.evaluations;
  d["wall_seconds"] = report.wall_seconds;
  d["fitness_trace"] = report.best_fitness_trace;
  d["genome_trace"] = report.best_genome_per_gen;
  return d;
}

py::dict search(const SpaceSpec& space, const std::string& fitness, int population, int generations,
                double crossover_prob, double mutation_prob, int parent_pool, std::uint64_t seed,
                int jobs, const Batch& batch, double eta) {
  const Proxy proxy = parse_proxy(fitness);
  GaConfig ga;
  ga.population = population;
  ga.generations = generations;
  ga.crossover_prob = crossover_prob;
  ga.mutation_prob = mutation_prob;
  ga.parent_pool = parent_pool;
  ga.seed = seed;
  ga.jobs = jobs;
  ga.fitness_name = to_string(proxy);
  const std::uint64_t weight_base = mix_seed(seed, 0x5eedull);
  SearchReport report;
  {
    py::gil_scoped_release release;
    report = run_search(space, ga, [&](const ArchGenome& genome) {
      const Model model =
          instantiate(decode(genome, space), derive_seed(weight_base, std::span<const int>(genome)));
      ScoreOptions opts;
      opts.eta = eta;
      return score_proxy(proxy, model, batch, opts).value;
    });
  }
  return report_dict(report);
}

int pca_dim_py(const py::array_t<double, py::array::c_style | py::array::forcecast>& h, double eta) {
  if (h.ndim() < 2) throw input_error("pca_dim: needs at least a 2-d array");
  std::vector<std::int64_t> shape(h.shape(), h.shape() + h.ndim());
  std::vector<double> data(h.data(), h.data() + h.size());
  return pca_dim(Tensor(std::move(shape), std::move(data)), eta);
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "training-free transformer architecture scoring and search";
  m.attr("__version__") = version;

  py::register_exception<input_error>(m, "InputError", PyExc_ValueError);
  py::register_exception<codec_error>(m, "CodecError", PyExc_ValueError);
  py::register_exception<config_error>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<shape_error>(m, "ShapeError", PyExc_ValueError);

  py::class_<SpaceSpec>(m, "SpaceSpec")
      .def(py::init<>())
      .def_static("small", &SpaceSpec::small_preset)
      .def_static("tiny", &SpaceSpec::tiny_preset)
      .def_readwrite("m", &SpaceSpec::m)
      .def_readwrite("n", &SpaceSpec::n)
      .def_readwrite("embed_dim", &SpaceSpec::embed_dim)
      .def_readwrite("dim_step", &SpaceSpec::dim_step)
      .def_readwrite("param_cap", &SpaceSpec::param_cap)
      .def_readwrite("token_embed_dim", &SpaceSpec::token_embed_dim)
      .def_readwrite("vocab_size", &SpaceSpec::vocab_size)
      .def_readwrite("max_seq_len", &SpaceSpec::max_seq_len)
      .def("genome_count", &SpaceSpec::genome_count);

  py::class_<ParamBreakdown>(m, "ParamBreakdown")
      .def_readonly("embeddings", &ParamBreakdown::embeddings)
      .def_readonly("attention", &ParamBreakdown::attention)
      .def_readonly("ffn", &ParamBreakdown::ffn)
      .def_readonly("norms", &ParamBreakdown::norms)
      .def_readonly("projections", &ParamBreakdown::projections)
      .def_readonly("total", &ParamBreakdown::total);

  py::class_<Batch>(m, "Batch")
      .def_readonly("b", &Batch::b)
      .def_readonly("n", &Batch::n)
      .def_readonly("ids", &Batch::ids);

  py::class_<ProxyScore>(m, "ProxyScore")
      .def_property_readonly("proxy", [](const ProxyScore& s) { return std::string(to_string(s.proxy)); })
      .def_readonly("value", &ProxyScore::value)
      .def_readonly("seed", &ProxyScore::seed)
      .def_readonly("eta", &ProxyScore::eta)
      .def_readonly("headless", &ProxyScore::headless)
      .def("__repr__", [](const ProxyScore& s) {
        return "ProxyScore(" + std::string(to_string(s.proxy)) + ", " + std::to_string(s.value) + ")";
      });

  m.def("proxies", [] {
    std::vector<std::string> names;
    for (Proxy p : all_proxies()) names.emplace_back(to_string(p));
    return names;
  });
  m.def("parse_genome", &parse_genome, py::arg("text"));
  m.def("format_genome", &format_genome, py::arg("genome"));
  m.def("decode_json", [](const ArchGenome& genome, const SpaceSpec& space) {
    return config_to_json(config_of(genome, space));
  });
  m.def("param_breakdown",
        [](const ArchGenome& genome, const SpaceSpec& space) { return param_count(config_of(genome, space)); });
  m.def("genome_params", &genome_params, py::arg("genome"), py::arg("space"));
  m.def("feasible", &feasible, py::arg("genome"), py::arg("space"));
  m.def("random_batch", &random_batch, py::arg("b"), py::arg("n"), py::arg("vocab_size"), py::arg("seed"));

  m.def("score", &score_genome, py::arg("genome"), py::arg("space"), py::arg("proxies"), py::arg("batch"),
        py::arg("eta") = 0.99, py::arg("seed") = 0, py::call_guard<py::gil_scoped_release>());
  m.def("search", &search, py::arg("space"), py::arg("fitness") = "w-pca", py::arg("population") = 50,
        py::arg("generations") = 40, py::arg("crossover_prob") = 1.0, py::arg("mutation_prob") = 0.1,
        py::arg("parent_pool") = 10, py::arg("seed") = 0, py::arg("jobs") = 1, py::arg("batch"),
        py::arg("eta") = 0.99);

  m.def("pca_dim", &pca_dim_py, py::arg("h"), py::arg("eta") = 0.99);
  m.def(
      "kendall_tau",
      [](const std::vector<double>& x, const std::vector<double>& y) { return kendall_tau(x, y); },
      py::arg("x"), py::arg("y"));
  m.def(
      "spearman_rho",
      [](const std::vector<double>& x, const std::vector<double>& y) { return spearman_rho(x, y); },
      py::arg("x"), py::arg("y"));
}
