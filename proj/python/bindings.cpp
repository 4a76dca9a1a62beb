#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "simvae/analysis.hpp"
#include "simvae/dispersion.hpp"
#include "simvae/graph.hpp"
#include "simvae/losses.hpp"
#include "simvae/phantom.hpp"
#include "simvae/seed.hpp"
#include "simvae/sweep.hpp"
#include "simvae/training.hpp"

namespace py = pybind11;
using namespace simvae;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Json to_json(const py::object& obj) {
  if (obj.is_none()) return Json::object();
  const std::string text = py::module_::import("json").attr("dumps")(obj).cast<std::string>();
  return Json::parse(text);
}

py::object from_json(const Json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

Array to_array(std::span<const double> values, std::vector<py::ssize_t> shape) {
  Array a(shape);
  std::copy(values.begin(), values.end(), a.mutable_data());
  return a;
}

Array volume_array(const Volume& v) {
  Array a({static_cast<py::ssize_t>(v.dims[2]), static_cast<py::ssize_t>(v.dims[1]), static_cast<py::ssize_t>(v.dims[0])});
  std::copy(v.voxels.begin(), v.voxels.end(), a.mutable_data());
  return a;
}

Volume array_volume(const Array& a) {
  if (a.ndim() != 3) throw std::invalid_argument("expected a 3-D array (z, y, x)");
  Volume v(a.shape(2), a.shape(1), a.shape(0));
  for (py::ssize_t i = 0; i < a.size(); ++i) v.voxels[i] = static_cast<float>(a.data()[i]);
  return v;
}

Tensor to_tensor(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

Array tensor_array(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  return to_array(t.values(), shape);
}

Codes rows_of(const Array& a) {
  if (a.ndim() == 1) {
    Codes c;
    for (py::ssize_t i = 0; i < a.shape(0); ++i) c.push_back({a.data()[i]});
    return c;
  }
  if (a.ndim() != 2) throw std::invalid_argument("expected a 1-D or 2-D array");
  Codes c(a.shape(0));
  for (py::ssize_t i = 0; i < a.shape(0); ++i) c[i].assign(a.data() + i * a.shape(1), a.data() + (i + 1) * a.shape(1));
  return c;
}

Array codes_array(const Codes& c) {
  const py::ssize_t n = static_cast<py::ssize_t>(c.size()), d = c.empty() ? 0 : static_cast<py::ssize_t>(c[0].size());
  Array a({n, d});
  for (py::ssize_t i = 0; i < n; ++i) std::copy(c[i].begin(), c[i].end(), a.mutable_data() + i * d);
  return a;
}

std::span<const double> flat(const Array& a) { return {a.data(), static_cast<std::size_t>(a.size())}; }

// x: [N, D, H, W] or [N, 1, D, H, W].
Tensor volume_batch(const Array& x) {
  Tensor t = to_tensor(x);
  if (t.rank() == 4) t = Tensor({t.dim(0), 1, t.dim(1), t.dim(2), t.dim(3)}, std::vector<double>(t.values().begin(), t.values().end()));
  if (t.rank() != 5) throw std::invalid_argument("expected volumes shaped [N, D, H, W]");
  return t;
}

py::dict breakdown_dict(const LossBreakdown& b) {
  py::dict d;
  d["mse"] = b.mse;
  d["kl"] = b.kl;
  d["similarity"] = b.similarity;
  d["total"] = b.total;
  return d;
}

py::dict metrics_dict(const MeanStd& m) {
  py::dict d;
  d["mean"] = m.mean;
  d["std"] = m.std;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Semi-supervised similarity-regularized beta-VAE on 3-D volumes";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<TrainingError>(m, "TrainingError", PyExc_RuntimeError);
  py::register_exception<CheckpointError>(m, "CheckpointError", PyExc_IOError);

  m.def("derive_seed", [](std::uint64_t base, const std::vector<std::uint64_t>& path) {
    std::uint64_t s = derive_seed(base, {});
    for (auto p : path) s = mix64(s ^ mix64(p + 0x632be59bd9b4e019ULL));
    return s;
  }, py::arg("base"), py::arg("path") = std::vector<std::uint64_t>{});

  // ---- data
  m.def("corpus_defaults", [] { return from_json(CorpusSpec{}.to_json()); });
  m.def(
      "phantom",
      [](const py::object& spec, double score, std::array<double, 3> translation, std::array<double, 3> rotation,
         std::array<double, 3> scale, double gain, double noise, std::uint64_t seed) {
        const CorpusSpec s = CorpusSpec::from_json(to_json(spec));
        GenerativeFactors f;
        f.score = score;
        f.translation = translation;
        f.rotation = rotation;
        f.scale = scale;
        f.gain = gain;
        f.noise = noise;
        f.seed = seed;
        return volume_array(generate_phantom(s, f));
      },
      py::arg("spec") = py::none(), py::arg("score") = 0.0, py::arg("translation") = std::array<double, 3>{0, 0, 0},
      py::arg("rotation") = std::array<double, 3>{0, 0, 0}, py::arg("scale") = std::array<double, 3>{1, 1, 1},
      py::arg("gain") = 1.0, py::arg("noise") = 0.0, py::arg("seed") = 0,
      "One phantom volume as a (z, y, x) array.");
  m.def(
      "generate_corpus",
      [](const py::object& spec, const std::filesystem::path& out, std::size_t threads) {
        const Manifest man = generate_corpus(CorpusSpec::from_json(to_json(spec)), out, threads);
        return man.subjects.size();
      },
      py::arg("spec"), py::arg("out_dir"), py::arg("threads") = 1);
  m.def("load_volume", [](const std::filesystem::path& p) { return volume_array(load_volume(p)); });
  m.def("save_volume", [](const std::filesystem::path& p, const Array& a) { save_volume(array_volume(a), p); });
  m.def("normalize_intensity",
        [](const Array& a, double gamma) { return volume_array(normalize_intensity(array_volume(a), gamma)); },
        py::arg("volume"), py::arg("gamma") = 1.0);

  py::class_<Dataset>(m, "Dataset")
      .def_property_readonly("ids", [](const Dataset& d) { return d.ids; })
      .def_property_readonly("scores", [](const Dataset& d) { return to_array(d.scores, {static_cast<py::ssize_t>(d.size())}); })
      .def_property_readonly("diagnoses",
                             [](const Dataset& d) {
                               std::vector<std::string> out;
                               for (auto x : d.diagnoses) out.push_back(to_string(x));
                               return out;
                             })
      .def_property_readonly("shape", [](const Dataset& d) { return d.shape; })
      .def("volumes",
           [](const Dataset& d) {
             std::vector<std::size_t> rows(d.size());
             for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
             const Tensor t = d.batch(rows);
             return to_array(t.values(), {static_cast<py::ssize_t>(d.size()), static_cast<py::ssize_t>(d.shape[0]),
                                          static_cast<py::ssize_t>(d.shape[1]), static_cast<py::ssize_t>(d.shape[2])});
           })
      .def("subset", [](const Dataset& d, const std::vector<std::string>& ids) { return d.subset(ids); })
      .def("__len__", &Dataset::size);
  m.def("load_dataset",
        [](const std::filesystem::path& manifest, double gamma) {
          const auto p = std::filesystem::is_directory(manifest) ? manifest / "manifest.csv" : manifest;
          return load_dataset(read_manifest(p), gamma);
        },
        py::arg("manifest"), py::arg("gamma") = 1.0);
  m.def("split_ids",
        [](const std::vector<std::string>& ids, std::array<double, 3> proportions, std::uint64_t seed) {
          const Split s = split_dataset(ids, proportions, seed);
          return py::make_tuple(s.train, s.val, s.test);
        },
        py::arg("ids"), py::arg("proportions") = kDefaultSplit, py::arg("seed") = 0);

  // ---- losses
  m.def("pearson", [](const Array& a, const Array& b) {
    const PearsonResult r = pearson(flat(a), flat(b));
    return py::make_tuple(r.r, r.degenerate);
  });
  m.def("kl_gaussian", [](const Array& mu, const Array& logvar) {
    Graph g;
    return kl_gaussian(g.constant(to_tensor(mu)), g.constant(to_tensor(logvar))).value()[0];
  });
  m.def("mse_loss", [](const Array& x, const Array& r) {
    Graph g;
    return mse_loss(g.constant(to_tensor(x)), g.constant(to_tensor(r))).value()[0];
  });
  m.def("dispersion", [](const Array& mus) { return dispersion(rows_of(mus)).value; });

  // ---- model and training
  py::class_<VaeModel>(m, "Model")
      .def(py::init([](const py::object& config) { return build_model(ModelConfig::from_json(to_json(config))); }),
           py::arg("config") = py::none())
      .def_property_readonly("config", [](const VaeModel& v) { return from_json(v.config().to_json()); })
      .def_property_readonly("parameter_count", &VaeModel::parameter_count)
      .def("parameter_names",
           [](const VaeModel& v) {
             std::vector<std::string> out;
             for (const auto& p : v.parameters()) out.push_back(p.name);
             return out;
           })
      .def("encode",
           [](VaeModel& v, const Array& x) {
             auto [mu, logvar] = v.encode(volume_batch(x));
             return py::make_tuple(tensor_array(mu), tensor_array(logvar));
           },
           "Eval-mode encoder: volumes [N, D, H, W] -> (mu, logvar) each [N, d].")
      .def("decode",
           [](VaeModel& v, const Array& z) {
             const Tensor x = v.decode(to_tensor(z));
             return to_array(x.values(), {static_cast<py::ssize_t>(x.dim(0)), static_cast<py::ssize_t>(x.dim(2)),
                                          static_cast<py::ssize_t>(x.dim(3)), static_cast<py::ssize_t>(x.dim(4))});
           },
           "Eval-mode decoder: codes [N, d] -> volumes [N, D, H, W].")
      .def_property_readonly("hash", [](const VaeModel& v) { return parameter_hash(v); });

  py::class_<Trainer>(m, "Trainer")
      .def(py::init([](const py::object& model, const py::object& training) {
             return Trainer(build_model(ModelConfig::from_json(to_json(model))), HyperParams::from_json(to_json(training)));
           }),
           py::arg("model") = py::none(), py::arg("training") = py::none())
      .def_property_readonly("model", [](Trainer& t) -> VaeModel& { return t.model; }, py::return_value_policy::reference_internal)
      .def_property_readonly("training", [](const Trainer& t) { return from_json(t.hp.to_json()); })
      .def("train_epoch",
           [](Trainer& t, const Dataset& train, const Dataset& val) {
             py::gil_scoped_release release;
             t.train_epoch(train, val);
           })
      .def(
          "fit",
          [](Trainer& t, const Dataset& train, const Dataset& val, const std::function<void(std::size_t)>& on_epoch) {
            t.fit(train, val, [&](const Trainer& tr) {
              if (on_epoch) on_epoch(tr.history.size());
            });
          },
          py::arg("train"), py::arg("val"), py::arg("on_epoch") = std::function<void(std::size_t)>{})
      .def_property_readonly("history",
                             [](const Trainer& t) {
                               py::list out;
                               for (const auto& e : t.history) {
                                 py::dict d;
                                 d["epoch"] = e.epoch;
                                 d["train"] = breakdown_dict(e.train);
                                 d["val"] = breakdown_dict(e.val);
                                 d["val_r"] = e.val_r;
                                 d["val_dispersion"] = e.val_dispersion;
                                 d["skipped_steps"] = e.skipped_steps;
                                 out.append(d);
                               }
                               return out;
                             })
      .def("save", [](const Trainer& t, const std::filesystem::path& p) { save_checkpoint(t, p); })
      .def("evaluate", [](Trainer& t, const Dataset& d) {
        const Evaluation e = evaluate(t.model, d, t.hp);
        py::dict out;
        out["loss"] = breakdown_dict(e.loss);
        out["r"] = e.r;
        out["dispersion"] = e.dispersion;
        out["mu"] = codes_array(e.mu);
        return out;
      });
  m.def("load_checkpoint", [](const std::filesystem::path& p) { return load_checkpoint(p); });

  // ---- analysis
  m.def("correlate", [](const Array& a, const Array& b) {
    const Correlation c = correlate(flat(a), flat(b));
    py::dict d;
    d["r"] = c.r;
    d["t"] = c.t;
    d["p"] = c.p;
    d["n"] = c.n;
    d["degenerate"] = c.degenerate;
    return d;
  });
  m.def(
      "glm_voxelwise",
      [](const Array& volumes, const Array& regressor) {
        if (volumes.ndim() != 4) throw std::invalid_argument("expected volumes shaped [N, D, H, W]");
        const Shape3 shape{static_cast<std::size_t>(volumes.shape(1)), static_cast<std::size_t>(volumes.shape(2)),
                           static_cast<std::size_t>(volumes.shape(3))};
        const std::size_t v = shape[0] * shape[1] * shape[2];
        std::vector<std::vector<double>> vols;
        for (py::ssize_t i = 0; i < volumes.shape(0); ++i) vols.emplace_back(volumes.data() + i * v, volumes.data() + (i + 1) * v);
        const GlmMap g = glm_voxelwise(vols, flat(regressor), shape);
        std::vector<py::ssize_t> s{volumes.shape(1), volumes.shape(2), volumes.shape(3)};
        py::dict d;
        d["slope"] = to_array(g.slope, s);
        d["intercept"] = to_array(g.intercept, s);
        d["t"] = to_array(g.t, s);
        return d;
      },
      "Per-voxel OLS of intensity on [1, regressor]; returns slope, intercept and t maps.");
  m.def(
      "logistic_fit",
      [](const Array& x, const std::vector<int>& y, double lambda) {
        LogisticOptions o;
        o.lambda = lambda;
        const LogisticModel lm = logistic_fit(rows_of(x), y, o);
        return py::make_tuple(to_array(lm.weights, {static_cast<py::ssize_t>(lm.weights.size())}), lm.intercept);
      },
      py::arg("features"), py::arg("labels"), py::arg("lam") = 1e-4);
  m.def(
      "bootstrap_classify",
      [](const Array& train_x, const std::vector<int>& train_y, const Array& test_x, const std::vector<int>& test_y,
         std::size_t resamples, std::uint64_t seed) {
        BootstrapOptions o;
        o.resamples = resamples;
        o.seed = seed;
        const ClassificationReport r = bootstrap_classify(rows_of(train_x), train_y, rows_of(test_x), test_y, o);
        py::dict d;
        d["accuracy"] = metrics_dict(r.accuracy);
        d["sensitivity"] = metrics_dict(r.sensitivity);
        d["specificity"] = metrics_dict(r.specificity);
        d["balanced"] = metrics_dict(r.balanced);
        d["resamples"] = r.resamples;
        return d;
      },
      py::arg("train_x"), py::arg("train_y"), py::arg("test_x"), py::arg("test_y"), py::arg("resamples") = 10,
      py::arg("seed") = 0);
  m.def(
      "average_reconstruction",
      [](VaeModel& model, double z0, std::size_t samples, std::uint64_t seed) {
        const auto& in = model.config().input;
        return to_array(average_reconstruction(model, z0, samples, seed),
                        {static_cast<py::ssize_t>(in[0]), static_cast<py::ssize_t>(in[1]), static_cast<py::ssize_t>(in[2])});
      },
      py::arg("model"), py::arg("z0"), py::arg("samples") = 32, py::arg("seed") = 0);
  m.def(
      "latent_traversal",
      [](VaeModel& model, std::size_t latent, double lo, double hi, std::size_t steps) {
        const TraversalSheet s = latent_traversal(model, latent, lo, hi, steps);
        const auto [D, H, W] = s.shape;
        Array out({static_cast<py::ssize_t>(steps), static_cast<py::ssize_t>(D), static_cast<py::ssize_t>(H),
                   static_cast<py::ssize_t>(W)});
        for (std::size_t i = 0; i < steps; ++i) std::copy(s.volumes[i].begin(), s.volumes[i].end(), out.mutable_data() + i * D * H * W);
        return py::make_tuple(to_array(s.values, {static_cast<py::ssize_t>(steps)}), out);
      },
      py::arg("model"), py::arg("latent"), py::arg("lo"), py::arg("hi"), py::arg("steps") = 7);
  m.def("converged_value", &converged_value);
}
