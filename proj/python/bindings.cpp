#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cmath>
#include <sstream>

#include "dsmr/checkpoint.hpp"
#include "dsmr/cli.hpp"
#include "dsmr/data.hpp"
#include "dsmr/engine.hpp"
#include "dsmr/errors.hpp"
#include "dsmr/gradcheck.hpp"
#include "dsmr/model.hpp"
#include "dsmr/raster.hpp"
#include "dsmr/synth.hpp"

namespace py = pybind11;
using namespace dsmr;

namespace {

using Array = py::array_t<float, py::array::c_style | py::array::forcecast>;

Array to_array(const Raster& r) {
  Array out({r.height, r.width});
  std::copy(r.heights.begin(), r.heights.end(), out.mutable_data());
  return out;
}

Raster from_array(const Array& a, double gsd) {
  if (a.ndim() != 2) throw DimensionError("expected a 2-D height array");
  Raster r(std::size_t(a.shape(1)), std::size_t(a.shape(0)), gsd);
  const float* p = a.data();
  for (std::size_t i = 0; i < r.size(); ++i) {
    if (std::isnan(p[i]))
      r.set_nodata(i);
    else
      r.heights[i] = p[i];
  }
  return r;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "DSM refinement with a residual encoder-decoder";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<DimensionError>(m, "DimensionError", PyExc_ValueError);
  py::register_exception<DataError>(m, "DataError", PyExc_IOError);

  m.def(
      "synth_pair",
      [](std::uint64_t seed, std::size_t width, std::size_t height, double noise_sigma,
         double hole_rate, std::size_t buildings) {
        SceneSpec s;
        s.seed = seed;
        s.width = width;
        s.height = height;
        s.noise_sigma = noise_sigma;
        s.hole_rate = hole_rate;
        s.building_count = buildings;
        const auto clean = generate_clean(s);
        return py::make_tuple(to_array(clean), to_array(degrade(clean, s)));
      },
      py::arg("seed") = 0, py::arg("width") = 256, py::arg("height") = 256,
      py::arg("noise_sigma") = 0.3, py::arg("hole_rate") = 0.03, py::arg("buildings") = 3,
      "Synthetic (clean, degraded) height arrays; NaN marks nodata.");

  m.def(
      "fill_holes", [](const Array& a) { return to_array(fill_holes(from_array(a, 0.1))); },
      "Laplace interpolation of NaN cells.");

  py::class_<Model<float>>(m, "Model")
      .def_static(
          "build",
          [](std::size_t depth, std::vector<std::size_t> channels, std::uint64_t seed) {
            ModelConfig c;
            c.depth = depth;
            c.channels = std::move(channels);
            c.seed = seed;
            return Model<float>::build(c);
          },
          py::arg("depth") = 3, py::arg("channels") = std::vector<std::size_t>{16, 32, 64, 64},
          py::arg("seed") = 0)
      .def_property_readonly("depth", [](const Model<float>& mdl) { return mdl.config().depth; })
      .def_property_readonly("channels",
                             [](const Model<float>& mdl) { return mdl.config().channels; })
      .def_property_readonly("param_count",
                             [](const Model<float>& mdl) { return param_count(mdl.config()); })
      .def("zero_head", &Model<float>::zero_head)
      .def(
          "residual",
          [](const Model<float>& mdl, const Array& x) {
            if (x.ndim() != 2) throw DimensionError("expected a 2-D array");
            const std::size_t h = std::size_t(x.shape(0)), w = std::size_t(x.shape(1));
            Tensor<float> t(Shape{1, 1, h, w}, std::vector<float>(x.data(), x.data() + h * w));
            auto g = Graph<float>::inference();
            const auto out = mdl.forward_residual(g, t);
            Array r({h, w});
            std::copy(out.residual.ptr(), out.residual.ptr() + h * w, r.mutable_data());
            return r;
          },
          "Raw network output f(x) on a normalized array whose sides are multiples of 2^depth.")
      .def(
          "refine",
          [](const Model<float>& mdl, const Array& heights, double std, std::size_t tile,
             std::size_t overlap, double gsd) {
            const auto r = from_array(heights, gsd);
            py::gil_scoped_release release;
            return infer_tiled(mdl, r, NormStats{std}, tile, overlap);
          },
          py::arg("heights"), py::arg("std"), py::arg("tile") = 512, py::arg("overlap") = 64,
          py::arg("gsd") = 0.1)
      .def("save", [](const Model<float>& mdl, const std::string& path,
                      std::optional<double> std) {
        save_model(mdl, path, std ? std::optional<NormStats>(NormStats{*std}) : std::nullopt);
      }, py::arg("path"), py::arg("std") = py::none());

  py::class_<Raster>(m, "Raster")
      .def_readonly("width", &Raster::width)
      .def_readonly("height", &Raster::height)
      .def_readonly("gsd", &Raster::gsd)
      .def("heights", [](const Raster& r) { return to_array(r); });

  m.def(
      "load_model",
      [](const std::string& path) {
        auto ck = load_model(path);
        std::optional<double> std;
        if (ck.stats) std = ck.stats->global_std;
        return py::make_tuple(std::move(ck.model), std);
      },
      "Returns (model, normalization std or None).");

  m.def(
      "metrics",
      [](const Array& pred, const Array& truth) {
        std::vector<double> err;
        const float* p = pred.data();
        const float* t = truth.data();
        if (pred.size() != truth.size()) throw DimensionError("arrays differ in size");
        for (py::ssize_t i = 0; i < pred.size(); ++i)
          if (!std::isnan(t[i])) err.push_back(std::abs(double(p[i]) - double(t[i])));
        const auto r = metrics_from_errors(err);
        py::dict d;
        d["acc_at_0_5"] = r.acc_at_0_5;
        d["mae"] = r.mae;
        d["medae"] = r.medae;
        d["pixels"] = r.pixels;
        return d;
      },
      "Accuracy at 0.5 m, MAE and median absolute error over non-NaN truth pixels.");

  m.def(
      "gradcheck",
      [](std::uint64_t seed) {
        GradcheckOptions opt;
        opt.seed = seed;
        std::vector<py::dict> rows;
        for (const auto& r : run_gradcheck(opt)) {
          py::dict d;
          d["op"] = r.op;
          d["max_rel_error"] = r.max_rel_error;
          d["passed"] = r.passed;
          rows.push_back(d);
        }
        return rows;
      },
      py::arg("seed") = 0);

  m.def(
      "cli",
      [](std::vector<std::string> args) {
        args.insert(args.begin(), "dsmr");
        std::vector<const char*> argv;
        for (const auto& a : args) argv.push_back(a.c_str());
        std::ostringstream out, err;
        const int code = run_cli(int(argv.size()), argv.data(), out, err);
        return py::make_tuple(code, out.str(), err.str());
      },
      "Runs the command-line tool in process; returns (exit code, stdout, stderr).");
}
