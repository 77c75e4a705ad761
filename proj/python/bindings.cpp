// Python bindings: axfault._core

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "axfault/axmul.hpp"
#include "axfault/campaign.hpp"
#include "axfault/dataset.hpp"
#include "axfault/error.hpp"
#include "axfault/faultsim.hpp"
#include "axfault/mitigate.hpp"
#include "axfault/network.hpp"
#include "axfault/quant.hpp"
#include "axfault/train.hpp"

namespace py = pybind11;
using namespace axfault;

namespace {

std::int8_t code(int v, const char* what) {
  if (v < -128 || v > 127) {
    throw InvalidArgument(std::string(what) + " must be in [-128, 127]");
  }
  return static_cast<std::int8_t>(v);
}

Matrix<std::int8_t> to_matrix(const py::array_t<std::int8_t, py::array::c_style | py::array::forcecast>& a) {
  if (a.ndim() != 2) throw ShapeError("expected a 2-D int8 array");
  Matrix<std::int8_t> m(static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1)));
  std::copy(a.data(), a.data() + a.size(), m.data().begin());
  return m;
}

py::array_t<std::int32_t> to_array(const Matrix<std::int32_t>& m) {
  py::array_t<std::int32_t> out({m.rows(), m.cols()});
  std::copy(m.data().begin(), m.data().end(), out.mutable_data());
  return out;
}

HyperParams make_hp(double lr, double momentum, std::size_t epochs, std::size_t batch_size,
                    std::uint64_t seed) {
  HyperParams hp;
  hp.lr = lr;
  hp.momentum = momentum;
  hp.epochs = epochs;
  hp.batch_size = batch_size;
  hp.seed = seed;
  return hp;
}

ExecEnv make_env(const std::string& engine, const AxMultiplier& m, std::size_t n) {
  ExecEnv env;
  if (engine == "float") return env;
  env.multiplier = m;
  if (parse_engine_kind(engine) == EngineKind::systolic) {
    env.engine = SystolicEngine{SystolicConfig{n, InjectMode::propagate}, FaultMap(n)};
  } else {
    env.engine = GpuTileEngine{n, std::nullopt};
  }
  return env;
}

// same keys as the report.json written by the CLI
py::dict report_dict(const MitigationReport& r) {
  return py::module_::import("json").attr("loads")(report_to_json(r));
}

}  // namespace

PYBIND11_MODULE(_core, mod) {
  mod.doc() = "Stuck-at fault simulation for quantised DNNs on approximate multipliers";

  static py::exception<Error> base_error(mod, "Error");
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      py::set_error(base_error, (std::string(e.category()) + ": " + e.what()).c_str());
    }
  });

  // multipliers
  py::class_<ErrorMetrics>(mod, "ErrorMetrics")
      .def_readonly("mae_percent", &ErrorMetrics::mae_percent)
      .def_readonly("worst_case_abs", &ErrorMetrics::worst_case_abs)
      .def_readonly("error_count", &ErrorMetrics::error_count);

  py::class_<AxMultiplier>(mod, "Multiplier")
      .def_static("exact", &AxMultiplier::exact)
      .def_static("truncated", &AxMultiplier::truncated, py::arg("k"))
      .def_static("broken_carry", &AxMultiplier::broken_carry, py::arg("k"))
      .def_static("parse", &parse_multiplier, py::arg("spec"))
      .def_static("load_lut", py::overload_cast<const std::filesystem::path&>(&load_lut),
                  py::arg("path"))
      .def("save_lut", [](const AxMultiplier& m, const std::filesystem::path& p) { save_lut(m, p); },
           py::arg("path"))
      .def("multiply",
           [](const AxMultiplier& m, int x, int y) {
             return m.multiply(code(x, "x"), code(y, "y"));
           },
           py::arg("x"), py::arg("y"))
      .def("mae", [](const AxMultiplier& m) { return mae(m); })
      .def("weight_map",
           [](const AxMultiplier& m) {
             const auto t = build_weight_map(m, ActivationSample::uniform_full());
             return std::vector<int>(t.map.begin(), t.map.end());
           },
           "256 entries; entry w+128 is the retuned code for w")
      .def_property_readonly("id", &AxMultiplier::id)
      .def_property_readonly("kind", [](const AxMultiplier& m) { return std::string(to_string(m.kind())); })
      .def("__repr__", [](const AxMultiplier& m) { return "<Multiplier " + m.id() + ">"; });

  // quantisation
  mod.def("quantize",
          [](const std::vector<double>& values) {
            const QTensor q = quantize(values, Shape{values.size()});
            return py::make_tuple(std::vector<int>(q.data.begin(), q.data.end()), q.scale);
          },
          py::arg("values"), "returns (codes, scale)");
  mod.def("dequantize",
          [](const std::vector<int>& codes, double scale) {
            std::vector<double> out;
            out.reserve(codes.size());
            for (int c : codes) out.push_back(static_cast<double>(code(c, "code")) * scale);
            return out;
          },
          py::arg("codes"), py::arg("scale"));

  // faults
  mod.def("apply_fault",
          [](int product, int bit, const std::string& kind) {
            if (product < -32768 || product > 32767) throw InvalidArgument("product must fit in int16");
            StuckAtFault f{bit, parse_stuck_at(kind)};
            validate(f);
            return apply_fault(static_cast<std::int16_t>(product), f);
          },
          py::arg("product"), py::arg("bit"), py::arg("kind"));

  py::class_<FaultMap>(mod, "FaultMap")
      .def(py::init<std::size_t>(), py::arg("n"))
      .def_property_readonly("n", &FaultMap::n)
      .def("__len__", &FaultMap::size)
      .def("add",
           [](FaultMap& fm, std::size_t i, std::size_t j, int bit, const std::string& kind) {
             StuckAtFault f{bit, parse_stuck_at(kind)};
             validate(f);
             fm.insert(i, j, f);
           },
           py::arg("row"), py::arg("col"), py::arg("bit") = 15, py::arg("kind") = "sa1")
      .def("entries",
           [](const FaultMap& fm) {
             std::vector<py::tuple> out;
             for (const auto& e : fm.entries()) {
               out.push_back(py::make_tuple(e.row, e.col, e.fault.bit, to_string(e.fault.kind)));
             }
             return out;
           })
      .def("save", [](const FaultMap& fm, const std::filesystem::path& p) { save_fault_map(fm, p); })
      .def_static("load", &load_fault_map)
      .def("__eq__", [](const FaultMap& a, const FaultMap& b) { return a == b; });

  mod.def("random_fault_map",
          [](std::size_t n, double percent, int bit, const std::string& kind, std::uint64_t seed) {
            StuckAtFault f{bit, parse_stuck_at(kind)};
            return random_fault_map(n, percent, f, seed);
          },
          py::arg("n"), py::arg("percent"), py::arg("bit") = 15, py::arg("kind") = "sa1",
          py::arg("seed") = 1);

  mod.def("systolic_gemm",
          [](const py::array_t<std::int8_t, py::array::c_style | py::array::forcecast>& w,
             const py::array_t<std::int8_t, py::array::c_style | py::array::forcecast>& a,
             const AxMultiplier& m, const FaultMap& fm, const std::string& mode) {
            return to_array(systolic_gemm(to_matrix(w), to_matrix(a), m, fm,
                                          SystolicConfig{fm.n(), parse_inject_mode(mode)}));
          },
          py::arg("weights"), py::arg("activations"), py::arg("multiplier"), py::arg("fault_map"),
          py::arg("mode") = "propagate");

  mod.def("map_pruned_indices", &map_pruned_indices, py::arg("fault_map"), py::arg("rows"),
          py::arg("cols"));

  // data and models
  py::class_<Dataset>(mod, "Dataset")
      .def_readonly("id", &Dataset::id)
      .def_readonly("sample_shape", &Dataset::sample_shape)
      .def_readonly("classes", &Dataset::classes)
      .def_readonly("labels", &Dataset::labels)
      .def("__len__", &Dataset::size)
      .def("head", &Dataset::head, py::arg("k"));

  mod.def("open_dataset",
          [](const std::string& spec) {
            DatasetPair p = open_dataset(spec);
            return py::make_tuple(std::move(p.train), std::move(p.test));
          },
          py::arg("spec"), "returns (train, test)");
  mod.def("load_idx", &load_idx, py::arg("images"), py::arg("labels"));

  py::class_<ModelSpec>(mod, "Model")
      .def_readonly("name", &ModelSpec::name)
      .def_readonly("input_shape", &ModelSpec::input_shape)
      .def("to_json", [](const ModelSpec& m) { return model_to_json(m); })
      .def("mac_count", [](const ModelSpec& m) { return mac_count(m); })
      .def_static("parse", &parse_model, py::arg("json"));
  mod.def("zoo_names", &zoo_names);
  mod.def("model", &resolve_model, py::arg("name_or_path"));

  py::class_<WeightSet>(mod, "Weights")
      .def("save", [](const WeightSet& w, const ModelSpec& m,
                      const std::filesystem::path& p) { save_weights(m, w, p); },
           py::arg("model"), py::arg("path"))
      .def_static("load", [](const ModelSpec& m, const std::filesystem::path& p) { return load_weights(m, p); },
                  py::arg("model"), py::arg("path"))
      .def("__eq__", [](const WeightSet& a, const WeightSet& b) { return a == b; });

  mod.def("train",
          [](const ModelSpec& m, const Dataset& d, double lr, double momentum, std::size_t epochs,
             std::size_t batch_size, std::uint64_t seed) {
            py::gil_scoped_release release;
            return train(m, d, make_hp(lr, momentum, epochs, batch_size, seed)).weights;
          },
          py::arg("model"), py::arg("data"), py::arg("lr") = 0.05, py::arg("momentum") = 0.9,
          py::arg("epochs") = 10, py::arg("batch_size") = 64, py::arg("seed") = 1);

  mod.def("evaluate",
          [](const ModelSpec& m, const WeightSet& w, const Dataset& d, const std::string& engine,
             const AxMultiplier& mul, std::size_t array_size, std::optional<std::size_t> limit) {
            const ExecEnv env = make_env(engine, mul, array_size);
            py::gil_scoped_release release;
            return evaluate(m, w, d, env, EvalOptions{limit, 1});
          },
          py::arg("model"), py::arg("weights"), py::arg("data"), py::arg("engine") = "float",
          py::arg("multiplier") = AxMultiplier::exact(), py::arg("array_size") = 64,
          py::arg("limit") = py::none());

  mod.def("inject",
          [](const ModelSpec& m, const WeightSet& w, const Dataset& d, const AxMultiplier& mul,
             const FaultMap& fm, std::optional<std::size_t> layer, const std::string& mode,
             std::optional<std::size_t> limit) {
            py::gil_scoped_release release;
            ExecEnv env;
            env.multiplier = mul;
            const InjectMode im = parse_inject_mode(mode);
            env.engine = SystolicEngine{SystolicConfig{fm.n(), im}, FaultMap(fm.n())};
            const EvalOptions opts{limit, 1};
            const double baseline = evaluate(m, w, d, env, opts);
            env.engine = SystolicEngine{SystolicConfig{fm.n(), im}, fm};
            env.layer_filter = layer;
            const double faulty = evaluate(m, w, d, env, opts);
            py::gil_scoped_acquire acquire;
            py::dict out;
            out["baseline_acc"] = baseline;
            out["faulty_acc"] = faulty;
            out["acc_loss"] = accuracy_loss(baseline, faulty);
            return out;
          },
          py::arg("model"), py::arg("weights"), py::arg("data"), py::arg("multiplier"),
          py::arg("fault_map"), py::arg("layer") = py::none(), py::arg("mode") = "propagate",
          py::arg("limit") = py::none());

  mod.def("fal_retune",
          [](const ModelSpec& m, const WeightSet& w, const FaultMap& fm, const AxMultiplier& mul,
             const Dataset& train_data, const Dataset& test_data, std::size_t epochs, double lr,
             double momentum, std::size_t batch_size, std::uint64_t seed, double acc_thresh,
             const std::string& acts) {
            FalRetuneConfig cfg;
            cfg.array = SystolicConfig{fm.n(), InjectMode::propagate};
            cfg.hp = make_hp(lr, momentum, epochs, batch_size, seed);
            cfg.acc_thresh = acc_thresh;
            cfg.acts = parse_activation_source(acts);
            MitigationResult r;
            {
              py::gil_scoped_release release;
              r = fal_retune(m, w, fm, mul, train_data, test_data, cfg);
            }
            return py::make_tuple(report_dict(r.report), std::move(r.retuned));
          },
          py::arg("model"), py::arg("weights"), py::arg("fault_map"), py::arg("multiplier"),
          py::arg("train_data"), py::arg("test_data"), py::arg("epochs") = 5, py::arg("lr") = 0.05,
          py::arg("momentum") = 0.9, py::arg("batch_size") = 64, py::arg("seed") = 1,
          py::arg("acc_thresh") = 100.0, py::arg("acts") = "uniform",
          "returns (report dict, retuned weights)");

  // campaigns
  mod.def("energy_estimate",
          [](const ModelSpec& m, const std::string& id, const std::map<std::string, double>& table) {
            EnergyTable t;
            t.pj_per_mac = table;
            return energy_estimate(m, id, t);
          },
          py::arg("model"), py::arg("multiplier_id"), py::arg("pj_per_mac"), "joules per inference");

  mod.def("run_campaign",
          [](const std::filesystem::path& spec_path, const std::filesystem::path& out_dir,
             std::size_t workers) {
            py::gil_scoped_release release;
            const CampaignSpec spec = load_campaign_spec(spec_path);
            const auto records = run_campaign(spec, RunOptions{workers});
            const auto files = emit_report(records, out_dir);
            return files;
          },
          py::arg("spec"), py::arg("out_dir"), py::arg("workers") = 1,
          "runs the sweep and writes results.csv, summary.md and charts; returns the paths");
}
