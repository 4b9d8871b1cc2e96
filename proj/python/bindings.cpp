// Python bindings for the core operations.
#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "illusion/consensus.hpp"
#include "illusion/errors.hpp"
#include "illusion/harness.hpp"

namespace py = pybind11;
using namespace illusion;

namespace {

ExperimentConfig parse_config(const std::string& text) {
  return config_from_json(text.empty() ? Json::object() : Json::parse(text));
}

py::dict summary_dict(const MetricSummary& s) {
  py::dict d;
  d["top1"] = s.top1;
  d["top5"] = s.top5;
  d["cs_mean"] = s.cs_mean;
  d["cs_std"] = s.cs_std;
  d["n"] = s.n;
  return d;
}

py::dict dataset_dict(const Dataset& data) {
  const auto split = [](const std::vector<ImageSample>& samples) {
    Mat pixels(static_cast<Eigen::Index>(samples.size()), samples.empty() ? 0 : samples[0].pixels.size());
    std::vector<int> labels, ids;
    for (std::size_t i = 0; i < samples.size(); ++i) {
      pixels.row(static_cast<Eigen::Index>(i)) = samples[i].pixels.transpose();
      labels.push_back(samples[i].label);
      ids.push_back(samples[i].sample_id);
    }
    return py::make_tuple(pixels, labels, ids);
  };
  py::dict d;
  const auto train = split(data.train);
  const auto eval = split(data.eval);
  d["train_pixels"] = train[0];
  d["train_labels"] = train[1];
  d["eval_pixels"] = eval[0];
  d["eval_labels"] = eval[1];
  d["eval_ids"] = eval[2];
  d["prototypes"] = Mat(data.prototype_matrix().transpose());
  d["label_embeddings"] = Mat(data.labels.embeddings.transpose());
  d["content_hash"] = dataset_content_hash(data);
  return d;
}

py::list grid_rows(const ReportGrid& g) {
  py::list rows;
  for (const auto& r : g.rows) {
    py::dict d = summary_dict(r.summary);
    d["method"] = r.method;
    d["input_kind"] = r.input_kind;
    d["label_kind"] = to_string(r.label_kind);
    rows.append(d);
  }
  return rows;
}

/// A fitted pipeline held across calls.
class Session {
 public:
  explicit Session(const std::string& config_json) {
    const auto cfg = parse_config(config_json);
    py::gil_scoped_release release;
    p_ = std::make_unique<Pipeline>(build_pipeline(cfg));
  }

  std::string config_hash() const { return p_->hash; }
  double vae_sigma() const { return p_->vae_sigma; }
  py::dict dataset() const { return dataset_dict(p_->data); }

  Vec encode(const Vec& x) const { return illusion::encode(p_->encoder, check(x)); }
  Vec scores(const Vec& x) const { return classify(p_->encoder, p_->data.labels, check(x)).scores; }

  Vec sanitize(const Vec& x, const std::string& kind, std::uint64_t draw) const {
    check(x);
    if (kind == "ae") return Reconstructor::ae(p_->pca).apply(x, draw);
    if (kind == "vae") return p_->vae().apply(x, draw);
    if (kind == "dm") return p_->dm().apply(x, draw);
    throw ConfigError("sanitizer: expected 'ae', 'vae' or 'dm'");
  }

  py::dict attack(const Vec& x, int target) const {
    check(x);
    AttackResult r;
    {
      py::gil_scoped_release release;
      r = pgd_illusion(x, target, p_->encoder, p_->data.labels, p_->cfg.attack);
    }
    py::dict d;
    d["perturbed"] = r.perturbed;
    d["delta"] = r.delta;
    d["best_cos"] = r.best_cos;
    d["loops_used"] = r.loops_used;
    d["success"] = r.success;
    d["cos_trajectory"] = r.cos_trajectory;
    return d;
  }

  py::dict consensus(const Vec& x, int sample_id, int num_samples) const {
    check(x);
    ConsensusConfig cfg{num_samples > 0 ? num_samples : p_->cfg.consensus_samples, p_->vae(), p_->cfg.seed};
    ConsensusDecision c;
    {
      py::gil_scoped_release release;
      c = consensus_classify(x, cfg, p_->encoder, p_->data.labels, sample_id);
    }
    py::dict d;
    d["winner"] = c.winner;
    d["votes"] = c.votes;
    d["vote_counts"] = c.vote_counts;
    d["mean_scores"] = c.mean_scores;
    d["tie_broken"] = c.tie_broken;
    return d;
  }

  py::list grid() const {
    ReportGrid g;
    {
      py::gil_scoped_release release;
      g = run_grid(*p_);
    }
    return grid_rows(g);
  }

  py::list sweep() const {
    SweepTable t;
    {
      py::gil_scoped_release release;
      t = run_sweep(*p_);
    }
    py::list rows;
    for (const auto& r : t.rows) {
      py::dict d;
      d["sanitizer"] = r.sanitizer;
      d["input_kind"] = r.input_kind;
      d["num_samples"] = r.num_samples;
      d["original"] = summary_dict(r.original);
      d["target"] = summary_dict(r.target);
      rows.append(d);
    }
    return rows;
  }

  py::dict eta_check() const {
    EtaCheck e;
    {
      py::gil_scoped_release release;
      e = run_eta_check(*p_);
    }
    py::dict d;
    d["num_samples"] = e.num_samples;
    d["eta"] = e.eta.eta;
    d["predicted"] = e.predicted;
    d["observed"] = e.observed;
    d["pooled_se"] = e.pooled_se();
    d["consistent"] = e.consistent();
    return d;
  }

 private:
  const Vec& check(const Vec& x) const {
    if (x.size() != p_->data.config.pixels())
      throw ShapeError("expected " + std::to_string(p_->data.config.pixels()) + " pixels, got " +
                       std::to_string(x.size()));
    return x;
  }

  std::unique_ptr<Pipeline> p_;
};

}  // namespace

PYBIND11_MODULE(_illusion_core, m) {
  m.doc() = "Adversarial illusions on a synthetic embedding space and the consensus defence";

  // translators run newest first, so the base class goes in before the subclasses
  py::register_exception<Error>(m, "IllusionError", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);

  m.def("default_config", [] { return to_json(default_config()).dump(2); },
        "Default configuration as a JSON string.");
  m.def("config_hash", [](const std::string& cfg) { return config_hash(parse_config(cfg)); }, py::arg("config"));
  m.def("majority_attack_probability", &majority_attack_probability, py::arg("eta"), py::arg("num_samples"));
  m.def("cosine_similarity", &cosine_similarity, py::arg("a"), py::arg("b"));
  m.def(
      "generate_dataset",
      [](const std::string& cfg) {
        const auto c = parse_config(cfg);
        return dataset_dict(generate_dataset(c.data));
      },
      py::arg("config") = "");
  m.def(
      "run_experiment",
      [](const std::string& cfg) {
        const auto c = parse_config(cfg);
        {
          py::gil_scoped_release release;
          run_experiment(c);
        }
        return c.out_dir;
      },
      py::arg("config"), "Runs the selected experiment and returns the output directory.");

  py::class_<Session>(m, "Session")
      .def(py::init<const std::string&>(), py::arg("config") = "")
      .def_property_readonly("config_hash", &Session::config_hash)
      .def_property_readonly("vae_sigma", &Session::vae_sigma)
      .def("dataset", &Session::dataset)
      .def("encode", &Session::encode, py::arg("x"))
      .def("scores", &Session::scores, py::arg("x"))
      .def("sanitize", &Session::sanitize, py::arg("x"), py::arg("kind"), py::arg("draw") = 0)
      .def("attack", &Session::attack, py::arg("x"), py::arg("target"))
      .def("consensus", &Session::consensus, py::arg("x"), py::arg("sample_id") = 0, py::arg("num_samples") = 0)
      .def("grid", &Session::grid)
      .def("sweep", &Session::sweep)
      .def("eta_check", &Session::eta_check);
}
