// SPDX-License-Identifier: Apache-2.0
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "mhaseg/autodiff/tape.hpp"
#include "mhaseg/cli.hpp"
#include "mhaseg/error.hpp"
#include "mhaseg/metrics.hpp"
#include "mhaseg/model.hpp"
#include "mhaseg/nifti.hpp"
#include "mhaseg/preprocess.hpp"
#include "mhaseg/synth.hpp"
#include "mhaseg/version.hpp"

namespace py = pybind11;
using namespace mhaseg;

namespace {

template <typename T>
using Array = py::array_t<T, py::array::c_style | py::array::forcecast>;

Extent3 extent_of(const py::array& a, std::size_t first) {
  if (static_cast<std::size_t>(a.ndim()) != first + 3) throw py::value_error("expected a " + std::to_string(first + 3) + "-d array");
  return {static_cast<std::size_t>(a.shape(first)), static_cast<std::size_t>(a.shape(first + 1)),
          static_cast<std::size_t>(a.shape(first + 2))};
}

template <typename T>
Grid<T> to_grid(const Array<T>& a, std::size_t channels_axes) {
  Grid<T> g(extent_of(a, channels_axes), channels_axes ? static_cast<std::size_t>(a.shape(0)) : 1);
  std::copy(a.data(), a.data() + a.size(), g.values.begin());
  return g;
}

template <typename T>
py::array_t<T> to_array(const Grid<T>& g, bool with_channels) {
  std::vector<py::ssize_t> shape;
  if (with_channels) shape.push_back(static_cast<py::ssize_t>(g.channels));
  for (auto e : {g.extent.depth, g.extent.height, g.extent.width}) shape.push_back(static_cast<py::ssize_t>(e));
  py::array_t<T> out(shape);
  std::copy(g.values.begin(), g.values.end(), out.mutable_data());
  return out;
}

LabelGrid labels_of(const Array<std::uint8_t>& a) { return to_grid<std::uint8_t>(a, 0); }

py::dict class_dict(const metrics::ClassMetrics& m) {
  py::dict d;
  d["accuracy"] = m.accuracy;
  d["iou"] = m.iou;
  d["dice"] = m.dice;
  d["precision"] = m.precision;
  d["sensitivity"] = m.sensitivity;
  d["specificity"] = m.specificity;
  d["soft_dice"] = m.soft_dice;
  return d;
}

// Volumes cross the boundary as (z, y, x) arrays of their stored element type.
py::array volume_array(const nifti::Volume& v) {
  const Extent3 e = v.spatial_extent();
  const std::vector<py::ssize_t> shape{static_cast<py::ssize_t>(e.depth), static_cast<py::ssize_t>(e.height),
                                       static_cast<py::ssize_t>(e.width)};
  auto make = [&](auto tag) {
    using T = decltype(tag);
    py::array_t<T> out(shape);
    std::memcpy(out.mutable_data(), v.bytes.data(), v.bytes.size());
    return py::array(out);
  };
  switch (v.kind) {
    case nifti::ElementKind::UInt8: return make(std::uint8_t{});
    case nifti::ElementKind::Int16: return make(std::int16_t{});
    case nifti::ElementKind::Int32: return make(std::int32_t{});
    case nifti::ElementKind::Float32: return make(float{});
    case nifti::ElementKind::Float64: return make(double{});
  }
  throw py::value_error("unsupported element kind");
}

template <typename T>
nifti::Volume volume_from(const py::array& a) {
  const auto arr = Array<T>::ensure(a);
  const Extent3 e = extent_of(arr, 0);
  return nifti::Volume::from_values<T>({e.width, e.height, e.depth}, std::span<const T>(arr.data(), arr.size()));
}

}  // namespace

PYBIND11_MODULE(_mhaseg, m) {
  m.doc() = "3D U-Net with multihead-attention skip fusion for brain-tumour segmentation";
  m.attr("__version__") = std::string(kVersion);
  static py::exception<Error> error(m, "MhasegError", PyExc_RuntimeError);
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      py::set_error(error, e.what());
    }
  });
  py::list names;
  for (auto n : metrics::kClassNames) names.append(std::string(n));
  m.attr("CLASS_NAMES") = names;

  m.def("read_nifti", [](const std::filesystem::path& p) { return volume_array(nifti::read_nifti(p)); },
        py::arg("path"), "Read a .nii or .nii.gz volume as a (z, y, x) array.");
  m.def(
      "write_nifti",
      [](const std::filesystem::path& p, const py::array& a) {
        nifti::Volume v;
        if (py::isinstance<py::array_t<std::uint8_t>>(a)) v = volume_from<std::uint8_t>(a);
        else if (py::isinstance<py::array_t<std::int16_t>>(a)) v = volume_from<std::int16_t>(a);
        else if (py::isinstance<py::array_t<std::int32_t>>(a)) v = volume_from<std::int32_t>(a);
        else if (py::isinstance<py::array_t<double>>(a)) v = volume_from<double>(a);
        else v = volume_from<float>(a);
        nifti::write_nifti(v, p);
      },
      py::arg("path"), py::arg("array"));

  m.def("minmax_normalize",
        [](const Array<float>& a) { return to_array(preprocess::minmax_normalize(to_grid<float>(a, 0)), false); });
  m.def("remap_labels",
        [](const Array<std::int32_t>& a) { return to_array(preprocess::remap_labels(to_grid<std::int32_t>(a, 0)), false); });

  m.def(
      "confusion_counts",
      [](const Array<std::uint8_t>& pred, const Array<std::uint8_t>& truth, int cls) {
        const auto c = metrics::confusion_counts(labels_of(pred), labels_of(truth), cls);
        py::dict d;
        d["tp"] = c.tp;
        d["tn"] = c.tn;
        d["fp"] = c.fp;
        d["fn"] = c.fn;
        return d;
      },
      py::arg("pred"), py::arg("truth"), py::arg("class_id"));
  m.def("bce_loss", [](const Array<double>& p, const Array<double>& y) {
    return metrics::bce_loss<double, double>(std::span<const double>(p.data(), p.size()),
                                            std::span<const double>(y.data(), y.size()));
  });
  m.def(
      "report",
      [](const Array<std::uint8_t>& pred, const Array<std::uint8_t>& truth, std::optional<Array<float>> probs) {
        std::span<const float> ps;
        if (probs) ps = std::span<const float>(probs->data(), probs->size());
        const auto r = metrics::report(labels_of(pred), labels_of(truth), ps);
        py::dict d, per;
        for (int k = 0; k < kNumClasses; ++k) per[py::str(std::string(metrics::kClassNames[k]))] = class_dict(r.per_class[k]);
        d["per_class"] = per;
        d["macro"] = class_dict(r.macro);
        d["voxel_accuracy"] = r.voxel_accuracy;
        d["bce_loss"] = r.bce_loss;
        d["dice_loss"] = r.dice_loss;
        return d;
      },
      py::arg("pred"), py::arg("truth"), py::arg("probs") = py::none());

  using model::ModelConfig;
  py::class_<ModelConfig>(m, "ModelConfig")
      .def(py::init<>())
      .def_readwrite("in_channels", &ModelConfig::in_channels)
      .def_readwrite("num_classes", &ModelConfig::num_classes)
      .def_readwrite("base_filters", &ModelConfig::base_filters)
      .def_readwrite("levels", &ModelConfig::levels)
      .def_readwrite("kernel", &ModelConfig::kernel)
      .def_readwrite("heads", &ModelConfig::heads)
      .def_readwrite("attention_token_limit", &ModelConfig::attention_token_limit)
      .def_readwrite("attention_reduction", &ModelConfig::attention_reduction)
      .def_readwrite("channel_affine", &ModelConfig::channel_affine)
      .def_property(
          "input_extent",
          [](const ModelConfig& c) { return std::make_tuple(c.input_extent.depth, c.input_extent.height, c.input_extent.width); },
          [](ModelConfig& c, std::tuple<std::size_t, std::size_t, std::size_t> e) {
            c.input_extent = {std::get<0>(e), std::get<1>(e), std::get<2>(e)};
          })
      .def("validate", &ModelConfig::validate);
  m.def("parameter_count", &model::parameter_count);

  using Net = model::UNet3DMHA<float>;
  py::class_<Net>(m, "UNet3DMHA")
      .def_static("build", &Net::build, py::arg("config"), py::arg("seed") = 0)
      .def_property_readonly("config", &Net::config)
      .def("scalar_count", [](const Net& n) { return n.parameters().scalar_count(); })
      .def(
          "forward",
          [](const Net& n, const Array<float>& image) {
            const auto g = to_grid<float>(image, 1);
            ad::Tape<float> tape(false);
            py::gil_scoped_release release;
            const auto p = n.forward(tape, model::to_tensor<float>(g));
            py::gil_scoped_acquire acquire;
            std::vector<py::ssize_t> shape(p.shape().begin(), p.shape().end());
            py::array_t<float> out(shape);
            std::copy(p.data().begin(), p.data().end(), out.mutable_data());
            return out;
          },
          py::arg("image"), "Softmax probabilities K x D x H x W for a C x D x H x W image.")
      .def("predict", [](const Net& n, const Array<float>& image) {
        const auto g = to_grid<float>(image, 1);
        ad::Tape<float> tape(false);
        return to_array(model::predict_labels(n.forward(tape, model::to_tensor<float>(g))), false);
      });

  m.def(
      "make_subject",
      [](std::size_t extent, std::uint64_t seed, double ratio, std::size_t tumors) {
        const auto s = synth::make_subject({extent, extent, extent}, seed, ratio, tumors);
        py::list mods;
        for (const auto& g : s.modalities) mods.append(to_array(g, false));
        return py::make_tuple(mods, to_array(s.mask, false));
      },
      py::arg("extent"), py::arg("seed") = 0, py::arg("ratio") = 0.05, py::arg("tumors") = 1,
      "Synthetic (T2, T1CE, FLAIR) volumes and a BraTS-style mask.");

  m.def(
      "run_cli", [](const std::vector<std::string>& args) { return cli::run(args); }, py::arg("args"),
      "Run an mhaseg subcommand in-process; returns the exit code.");
}
