#include "illusion/harness.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <numeric>
#include <sstream>

#include <Eigen/Core>

#include "illusion/csv.hpp"
#include "illusion/errors.hpp"
#include "illusion/hash.hpp"
#include "illusion/parallel.hpp"
#include "illusion/rng.hpp"

namespace illusion {

namespace {

constexpr std::array<const char*, 4> kInputKinds{"org_img", "org_rec", "prt_img", "prt_rec"};
constexpr double kLoopBinWidth = 250.0;
constexpr double kCosBinWidth = 0.05;

double rounded(double v) { return std::stod(fmt6(v)); }

template <typename T>
T get_as(const Json& v, const std::string& path) {
  try {
    return v.get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(path + ": wrong type");
  }
}

void require_object(const Json& j, const std::string& path) {
  if (!j.is_object()) throw ConfigError(path + ": expected an object");
}

[[noreturn]] void unknown_key(const std::string& path, const std::string& key) {
  throw ConfigError("unknown key '" + (path.empty() ? key : path + "." + key) + "'");
}

TransformKind transform_kind_from_string(const std::string& s, const std::string& path) {
  for (auto k : {TransformKind::dct_quantize, TransformKind::gaussian_blur, TransformKind::translate,
                 TransformKind::hflip, TransformKind::jitter})
    if (s == to_string(k)) return k;
  throw ConfigError(path + ": unknown transform '" + s + "'");
}

Json to_json(const TransformSpec& t) {
  Json j;
  j["kind"] = to_string(t.kind);
  j["levels"] = t.levels;
  j["keep_fraction"] = t.keep_fraction;
  j["blur_sigma"] = t.blur_sigma;
  j["max_shift"] = t.max_shift;
  j["contrast_range"] = t.contrast_range;
  j["brightness_range"] = t.brightness_range;
  return j;
}

TransformSpec transform_from_json(const Json& j, const std::string& path) {
  require_object(j, path);
  if (!j.contains("kind")) throw ConfigError(path + ".kind: required");
  TransformSpec t;
  for (const auto& [key, v] : j.items()) {
    const std::string p = path + "." + key;
    if (key == "kind") t.kind = transform_kind_from_string(get_as<std::string>(v, p), p);
    else if (key == "levels") t.levels = get_as<int>(v, p);
    else if (key == "keep_fraction") t.keep_fraction = get_as<double>(v, p);
    else if (key == "blur_sigma") t.blur_sigma = get_as<double>(v, p);
    else if (key == "max_shift") t.max_shift = get_as<int>(v, p);
    else if (key == "contrast_range") t.contrast_range = get_as<double>(v, p);
    else if (key == "brightness_range") t.brightness_range = get_as<double>(v, p);
    else unknown_key(path, key);
  }
  return t;
}

double median(std::vector<double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const auto h = v.size() / 2;
  return v.size() % 2 ? v[h] : 0.5 * (v[h - 1] + v[h]);
}

struct Method {
  std::string name;
  std::optional<Reconstructor> sanitizer;
  bool sampling = false;
};

struct SampleOutcome {
  std::array<MetricRecord, 4> records;  // indexed like kInputKinds
  std::vector<VoteRecord> votes;
};

SampleOutcome evaluate_sample(const Pipeline& p, const Method& m, const ImageSample& s, const PlainAttack& a,
                              bool keep_votes) {
  const auto& enc = p.encoder;
  const auto& bank = p.data.labels;
  const std::uint64_t seed = p.cfg.seed;
  SampleOutcome out;
  const std::array<const Vec*, 2> inputs{&s.pixels, &a.result.perturbed};
  for (int b = 0; b < 2; ++b) {
    const Vec& x = *inputs[static_cast<std::size_t>(b)];
    auto rec_of = [&](const Vec& embedding) {
      return make_record(s.sample_id, s.label, a.target,
                         classify(enc, bank, decode_embedding(p.decoder, embedding)));
    };
    MetricRecord img;
    MetricRecord rec;
    try {
      if (!m.sanitizer) {
        const Vec e = encode(enc, x);
        img = make_record(s.sample_id, s.label, a.target, classify_embedding(bank, e));
        rec = rec_of(e);
      } else if (!m.sampling) {
        const ConsensusDraw d = consensus_draw(x, *m.sanitizer, enc, bank, seed, s.sample_id, 0);
        img = make_record(s.sample_id, s.label, a.target, classify_embedding(bank, d.embedding));
        rec = rec_of(d.embedding);
      } else {
        const ConsensusConfig cc{p.cfg.consensus_samples, *m.sanitizer, seed};
        const ConsensusDecision d = consensus_classify(x, cc, enc, bank, s.sample_id);
        img = make_record(s.sample_id, s.label, a.target, d);
        rec = rec_of(d.draws[static_cast<std::size_t>(d.best_winning_draw())].embedding);
        if (keep_votes) {
          for (std::size_t i = 0; i < d.draws.size(); ++i)
            out.votes.push_back({s.sample_id, m.name, kInputKinds[static_cast<std::size_t>(2 * b)],
                                 static_cast<int>(i), d.draws[i].vote, d.draws[i].top_score});
        }
      }
    } catch (const Error& e) {
      throw Error("sample " + std::to_string(s.sample_id) + ", method " + m.name + ": " + e.what());
    }
    out.records[static_cast<std::size_t>(2 * b)] = img;
    out.records[static_cast<std::size_t>(2 * b + 1)] = rec;
  }
  return out;
}

ReportGrid evaluate_methods(const Pipeline& p, const std::string& name, const std::vector<Method>& methods) {
  ReportGrid grid;
  grid.name = name;
  const auto& eval = p.data.eval;
  for (const auto& m : methods) {
    const auto outcomes = parallel_map(p.cfg.threads, eval.size(), [&](std::size_t i) {
      return evaluate_sample(p, m, eval[i], p.attacks[i], p.cfg.dump_votes);
    });
    for (std::size_t k = 0; k < kInputKinds.size(); ++k) {
      std::vector<MetricRecord> recs;
      for (const auto& o : outcomes) recs.push_back(o.records[k]);
      for (auto label : {LabelKind::original, LabelKind::target})
        grid.rows.push_back({m.name, kInputKinds[k], label, summarize(recs, label)});
    }
    for (const auto& o : outcomes) grid.votes.insert(grid.votes.end(), o.votes.begin(), o.votes.end());
  }
  std::sort(grid.rows.begin(), grid.rows.end(), [](const GridRow& a, const GridRow& b) {
    return std::tuple(a.method, a.input_kind, std::string(to_string(a.label_kind))) <
           std::tuple(b.method, b.input_kind, std::string(to_string(b.label_kind)));
  });
  std::stable_sort(grid.votes.begin(), grid.votes.end(), [](const VoteRecord& a, const VoteRecord& b) {
    return std::tie(a.method, a.input_kind, a.sample_id, a.draw_index) <
           std::tie(b.method, b.input_kind, b.sample_id, b.draw_index);
  });
  return grid;
}

Json summary_json(const MetricSummary& m) {
  Json j;
  j["top1"] = rounded(m.top1);
  j["top5"] = rounded(m.top5);
  j["cs_mean"] = rounded(m.cs_mean);
  j["cs_std"] = rounded(m.cs_std);
  j["n"] = m.n;
  return j;
}

Json grid_json(const ReportGrid& g) {
  Json rows = Json::array();
  for (const auto& r : g.rows) {
    Json j;
    j["method"] = r.method;
    j["input_kind"] = r.input_kind;
    j["label_kind"] = to_string(r.label_kind);
    const Json m = summary_json(r.summary);
    for (const auto& [k, v] : m.items()) j[k] = v;
    rows.push_back(j);
  }
  return rows;
}

Json histogram_json(const std::vector<HistogramBin>& bins) {
  Json a = Json::array();
  for (const auto& b : bins) a.push_back(Json::array({rounded(b.lo), rounded(b.hi), b.count}));
  return a;
}

std::vector<double> loops_of(const std::vector<AttackCostRecord>& r) {
  std::vector<double> v;
  for (const auto& x : r) v.push_back(x.loops_used);
  return v;
}

std::vector<double> final_cos_of(const std::vector<AttackCostRecord>& r) {
  std::vector<double> v;
  for (const auto& x : r) v.push_back(x.final_cos);
  return v;
}

std::vector<double> present(const std::vector<std::optional<double>>& v) {
  std::vector<double> out;
  for (const auto& x : v)
    if (x) out.push_back(*x);
  return out;
}

double loop_hist_hi(int budget) { return std::ceil(budget / kLoopBinWidth) * kLoopBinWidth; }

}  // namespace

const char* to_string(Experiment e) {
  switch (e) {
    case Experiment::grid: return "grid";
    case Experiment::baselines: return "baselines";
    case Experiment::sweep: return "sweep";
    case Experiment::attack_cost: return "attack_cost";
    case Experiment::transfer: return "transfer";
    case Experiment::report: return "report";
  }
  return "?";
}

Experiment experiment_from_string(const std::string& s) {
  for (auto e : {Experiment::grid, Experiment::baselines, Experiment::sweep, Experiment::attack_cost,
                 Experiment::transfer, Experiment::report})
    if (s == to_string(e)) return e;
  throw ConfigError("experiment: unknown selector '" + s + "'");
}

std::vector<TransformSpec> default_baselines() {
  std::vector<TransformSpec> out;
  for (auto k : {TransformKind::dct_quantize, TransformKind::gaussian_blur, TransformKind::translate,
                 TransformKind::jitter, TransformKind::hflip}) {
    TransformSpec t;
    t.kind = k;
    out.push_back(t);
  }
  return out;
}

ExperimentConfig default_config() {
  ExperimentConfig cfg;
  cfg.baselines = default_baselines();
  return cfg;
}

void ExperimentConfig::validate() const {
  data.validate();
  if (data.master_seed != seed) throw ConfigError("data.master_seed: must equal seed");
  if (threads < 1) throw ConfigError("threads: must be >= 1");
  if (out_dir.empty()) throw ConfigError("out_dir: must not be empty");
  if (encoder.prior_scale < 0.0) throw ConfigError("encoder.prior_scale: must be >= 0");
  if (encoder.ridge && *encoder.ridge < 0.0) throw ConfigError("encoder.ridge: must be >= 0");
  if (encoder.mlp.hidden < 1) throw ConfigError("encoder.mlp.hidden: must be >= 1");
  if (!(encoder.mlp.learning_rate > 0.0)) throw ConfigError("encoder.mlp.learning_rate: must be > 0");
  if (encoder.mlp.epochs < 0) throw ConfigError("encoder.mlp.epochs: must be >= 0");
  if (encoder.mlp.batch < 1) throw ConfigError("encoder.mlp.batch: must be >= 1");
  const int train_count = data.num_classes * data.train_per_class;
  if (reconstruct.pca_rank < 1 || reconstruct.pca_rank > std::min(data.pixels(), train_count))
    throw ConfigError("reconstruct.pca_rank: must lie in [1, min(pixels, train samples)]");
  if (reconstruct.vae_sigma && *reconstruct.vae_sigma < 0.0) throw ConfigError("reconstruct.vae_sigma: must be >= 0");
  if (!reconstruct.vae_sigma && reconstruct.sigma_candidates.empty())
    throw ConfigError("reconstruct.sigma_candidates: must not be empty");
  for (double s : reconstruct.sigma_candidates)
    if (s < 0.0) throw ConfigError("reconstruct.sigma_candidates: entries must be >= 0");
  if (reconstruct.clean_tolerance < 0.0) throw ConfigError("reconstruct.clean_tolerance: must be >= 0");
  if (reconstruct.eta_trials < 1) throw ConfigError("reconstruct.eta_trials: must be >= 1");
  if (!(reconstruct.dm.noise_level > 0.0 && reconstruct.dm.noise_level < 1.0))
    throw ConfigError("reconstruct.dm.noise_level: must lie in (0, 1)");
  if (reconstruct.dm.steps < 1) throw ConfigError("reconstruct.dm.steps: must be >= 1");
  for (const auto& t : baselines) {
    if (t.kind == TransformKind::dct_quantize && (data.height % 8 || data.width % 8))
      throw ConfigError("baselines: dct_quantize needs height and width divisible by 8");
    if (t.levels < 2) throw ConfigError("baselines.levels: must be >= 2");
    if (!(t.keep_fraction > 0.0 && t.keep_fraction <= 1.0)) throw ConfigError("baselines.keep_fraction: must lie in (0, 1]");
    if (t.blur_sigma < 0.0) throw ConfigError("baselines.blur_sigma: must be >= 0");
    if (t.max_shift < 0) throw ConfigError("baselines.max_shift: must be >= 0");
    if (t.contrast_range < 0.0 || t.brightness_range < 0.0) throw ConfigError("baselines: jitter ranges must be >= 0");
  }
  try {
    attack.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(e.what());
  }
  if (consensus_samples < 1) throw ConfigError("consensus.num_samples: must be >= 1");
  if (eta_check_samples < 1 || eta_check_samples % 2 == 0)
    throw ConfigError("consensus.eta_check_samples: must be odd and >= 1");
  if (sweep_values.empty()) throw ConfigError("consensus.sweep_values: must not be empty");
  for (int n : sweep_values)
    if (n < 1) throw ConfigError("consensus.sweep_values: entries must be >= 1");
}

Json to_json(const ExperimentConfig& cfg) {
  Json j;
  j["seed"] = cfg.seed;
  j["experiment"] = to_string(cfg.experiment);
  j["out_dir"] = cfg.out_dir;
  j["threads"] = cfg.threads;
  j["data"] = to_json(cfg.data);

  Json enc;
  enc["kind"] = to_string(cfg.encoder.kind);
  enc["prior_scale"] = cfg.encoder.prior_scale;
  enc["ridge"] = cfg.encoder.ridge ? Json(*cfg.encoder.ridge) : Json(nullptr);
  enc["mlp"] = {{"hidden", cfg.encoder.mlp.hidden},
                {"learning_rate", cfg.encoder.mlp.learning_rate},
                {"epochs", cfg.encoder.mlp.epochs},
                {"batch", cfg.encoder.mlp.batch}};
  j["encoder"] = enc;

  Json rec;
  rec["pca_rank"] = cfg.reconstruct.pca_rank;
  rec["vae_sigma"] = cfg.reconstruct.vae_sigma ? Json(*cfg.reconstruct.vae_sigma) : Json(nullptr);
  rec["sigma_candidates"] = cfg.reconstruct.sigma_candidates;
  rec["clean_tolerance"] = cfg.reconstruct.clean_tolerance;
  rec["eta_trials"] = cfg.reconstruct.eta_trials;
  rec["dm"] = {{"noise_level", cfg.reconstruct.dm.noise_level},
               {"steps", cfg.reconstruct.dm.steps},
               {"stochastic", cfg.reconstruct.dm.stochastic}};
  j["reconstruct"] = rec;

  Json base = Json::array();
  for (const auto& t : cfg.baselines) base.push_back(to_json(t));
  j["baselines"] = base;

  j["attack"] = {{"epsilon", cfg.attack.epsilon},
                 {"step", cfg.attack.step},
                 {"max_iters", cfg.attack.max_iters},
                 {"eot_samples", cfg.attack.eot_samples},
                 {"dm_gradient_mode", to_string(cfg.attack.dm_gradient_mode)},
                 {"cos_threshold", cfg.attack.cos_threshold},
                 {"loop_budget", cfg.attack.loop_budget}};
  j["consensus"] = {{"num_samples", cfg.consensus_samples},
                    {"eta_check_samples", cfg.eta_check_samples},
                    {"sweep_values", cfg.sweep_values},
                    {"dump_votes", cfg.dump_votes}};
  return j;
}

ExperimentConfig config_from_json(const Json& j) {
  require_object(j, "config");
  ExperimentConfig cfg = default_config();
  std::optional<std::uint64_t> data_seed;

  for (const auto& [key, v] : j.items()) {
    if (key == "seed") {
      cfg.seed = get_as<std::uint64_t>(v, key);
    } else if (key == "experiment") {
      cfg.experiment = experiment_from_string(get_as<std::string>(v, key));
    } else if (key == "out_dir") {
      cfg.out_dir = get_as<std::string>(v, key);
    } else if (key == "threads") {
      cfg.threads = get_as<int>(v, key);
    } else if (key == "data") {
      cfg.data = data_config_from_json(v, "data");
      if (v.contains("master_seed")) data_seed = cfg.data.master_seed;
    } else if (key == "encoder") {
      require_object(v, "encoder");
      for (const auto& [k, x] : v.items()) {
        const std::string p = "encoder." + k;
        if (k == "kind") {
          const auto s = get_as<std::string>(x, p);
          if (s == "linear") cfg.encoder.kind = EncoderKind::linear;
          else if (s == "mlp") cfg.encoder.kind = EncoderKind::mlp;
          else throw ConfigError(p + ": expected 'linear' or 'mlp'");
        } else if (k == "prior_scale") {
          cfg.encoder.prior_scale = get_as<double>(x, p);
        } else if (k == "ridge") {
          cfg.encoder.ridge = x.is_null() ? std::nullopt : std::optional<double>(get_as<double>(x, p));
        } else if (k == "mlp") {
          require_object(x, p);
          for (const auto& [mk, mv] : x.items()) {
            const std::string mp = p + "." + mk;
            if (mk == "hidden") cfg.encoder.mlp.hidden = get_as<int>(mv, mp);
            else if (mk == "learning_rate") cfg.encoder.mlp.learning_rate = get_as<double>(mv, mp);
            else if (mk == "epochs") cfg.encoder.mlp.epochs = get_as<int>(mv, mp);
            else if (mk == "batch") cfg.encoder.mlp.batch = get_as<int>(mv, mp);
            else unknown_key(p, mk);
          }
        } else {
          unknown_key("encoder", k);
        }
      }
    } else if (key == "reconstruct") {
      require_object(v, "reconstruct");
      auto& r = cfg.reconstruct;
      for (const auto& [k, x] : v.items()) {
        const std::string p = "reconstruct." + k;
        if (k == "pca_rank") r.pca_rank = get_as<int>(x, p);
        else if (k == "vae_sigma") r.vae_sigma = x.is_null() ? std::nullopt : std::optional<double>(get_as<double>(x, p));
        else if (k == "sigma_candidates") r.sigma_candidates = get_as<std::vector<double>>(x, p);
        else if (k == "clean_tolerance") r.clean_tolerance = get_as<double>(x, p);
        else if (k == "eta_trials") r.eta_trials = get_as<int>(x, p);
        else if (k == "dm") {
          require_object(x, p);
          for (const auto& [dk, dv] : x.items()) {
            const std::string dp = p + "." + dk;
            if (dk == "noise_level") r.dm.noise_level = get_as<double>(dv, dp);
            else if (dk == "steps") r.dm.steps = get_as<int>(dv, dp);
            else if (dk == "stochastic") r.dm.stochastic = get_as<bool>(dv, dp);
            else unknown_key(p, dk);
          }
        } else {
          unknown_key("reconstruct", k);
        }
      }
    } else if (key == "baselines") {
      if (!v.is_array()) throw ConfigError("baselines: expected an array");
      cfg.baselines.clear();
      for (std::size_t i = 0; i < v.size(); ++i)
        cfg.baselines.push_back(transform_from_json(v[i], "baselines[" + std::to_string(i) + "]"));
    } else if (key == "attack") {
      require_object(v, "attack");
      auto& a = cfg.attack;
      for (const auto& [k, x] : v.items()) {
        const std::string p = "attack." + k;
        if (k == "epsilon") a.epsilon = get_as<double>(x, p);
        else if (k == "step") a.step = get_as<double>(x, p);
        else if (k == "max_iters") a.max_iters = get_as<int>(x, p);
        else if (k == "eot_samples") a.eot_samples = get_as<int>(x, p);
        else if (k == "cos_threshold") a.cos_threshold = get_as<double>(x, p);
        else if (k == "loop_budget") a.loop_budget = get_as<int>(x, p);
        else if (k == "dm_gradient_mode") {
          const auto s = get_as<std::string>(x, p);
          if (s == "straight_through") a.dm_gradient_mode = DmGradientMode::straight_through;
          else if (s == "exact_jacobian") a.dm_gradient_mode = DmGradientMode::exact_jacobian;
          else throw ConfigError(p + ": expected 'straight_through' or 'exact_jacobian'");
        } else {
          unknown_key("attack", k);
        }
      }
    } else if (key == "consensus") {
      require_object(v, "consensus");
      for (const auto& [k, x] : v.items()) {
        const std::string p = "consensus." + k;
        if (k == "num_samples") cfg.consensus_samples = get_as<int>(x, p);
        else if (k == "eta_check_samples") cfg.eta_check_samples = get_as<int>(x, p);
        else if (k == "sweep_values") cfg.sweep_values = get_as<std::vector<int>>(x, p);
        else if (k == "dump_votes") cfg.dump_votes = get_as<bool>(x, p);
        else unknown_key("consensus", k);
      }
    } else {
      unknown_key("", key);
    }
  }

  if (data_seed && j.contains("seed") && *data_seed != cfg.seed)
    throw ConfigError("data.master_seed: conflicts with seed");
  if (data_seed && !j.contains("seed")) cfg.seed = *data_seed;
  cfg.data.master_seed = cfg.seed;
  cfg.attack.seed = cfg.seed;
  cfg.encoder.mlp.seed = cfg.seed;
  cfg.validate();
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  Json j;
  try {
    j = Json::parse(read_text_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  ExperimentConfig cfg = config_from_json(j);
  if (const char* env = std::getenv("ILLUSION_OUT_DIR"); env && *env) cfg.out_dir = env;
  return cfg;
}

std::string config_hash(const ExperimentConfig& cfg) {
  Json j = to_json(cfg);
  j.erase("out_dir");
  j.erase("threads");
  j.erase("experiment");
  Fnv1a h;
  h.update(j.dump());
  return "fnv1a64:" + h.hex();
}

int draw_target_label(std::uint64_t seed, int sample_id, int label, int num_classes) {
  if (num_classes < 2) throw ConfigError("target selection needs at least two classes");
  Engine rng = make_engine(seed, Stream::target, static_cast<std::uint64_t>(sample_id));
  std::uniform_int_distribution<int> pick(0, num_classes - 2);
  const int t = pick(rng);
  return t >= label ? t + 1 : t;
}

std::vector<AttackedSample> Pipeline::attacked_eval() const {
  std::vector<AttackedSample> out;
  for (std::size_t i = 0; i < data.eval.size(); ++i)
    out.push_back({attacks[i].result.perturbed, attacks[i].target, data.eval[i].sample_id});
  return out;
}

EncoderModel fit_encoder(const Dataset& data, const EncoderSettings& s, EncoderKind kind, std::uint64_t seed) {
  if (kind == EncoderKind::linear) {
    const Mat protos = data.prototype_matrix();
    std::optional<Mat> prior;
    if (s.prior_scale > 0.0)
      prior = random_encoder_prior(data.config.embed_dim, data.config.pixels(), s.prior_scale, seed);
    return fit_encoder_linear(protos, data.labels, s.ridge.value_or(default_ridge(protos)), prior);
  }
  MlpParams mp = s.mlp;
  mp.seed = seed;
  return fit_encoder_mlp(data.train, data.labels, mp);
}

Pipeline build_pipeline(const ExperimentConfig& cfg) {
  cfg.validate();
  Pipeline p;
  p.cfg = cfg;
  p.hash = config_hash(cfg);
  p.data = generate_dataset(cfg.data);
  p.encoder = fit_encoder(p.data, cfg.encoder, cfg.encoder.kind, cfg.seed);

  double cos_sum = 0.0;
  for (const auto& s : p.data.train) cos_sum += classify(p.encoder, p.data.labels, s.pixels)[s.label];
  p.encoder_train_cos = cos_sum / static_cast<double>(p.data.train.size());

  p.decoder = fit_downstream_decoder(p.encoder, p.data.train);
  p.pca = std::make_shared<const PcaBasis>(fit_pca(p.data.train_matrix(), cfg.reconstruct.pca_rank));
  p.mixture = std::make_shared<const MixtureModel>(p.data.mixture);

  const auto& eval = p.data.eval;
  const int classes = p.data.config.num_classes;
  p.attacks = parallel_map(cfg.threads, eval.size(), [&](std::size_t i) {
    PlainAttack a;
    a.target = draw_target_label(cfg.seed, eval[i].sample_id, eval[i].label, classes);
    a.result = pgd_illusion(eval[i].pixels, a.target, p.encoder, p.data.labels, cfg.attack);
    return a;
  });

  if (cfg.reconstruct.vae_sigma) {
    p.vae_sigma = *cfg.reconstruct.vae_sigma;
  } else {
    const auto attacked = p.attacked_eval();
    p.calibration = calibrate_sigma(p.pca, eval, attacked, p.encoder, p.data.labels,
                                    cfg.reconstruct.sigma_candidates, cfg.consensus_samples,
                                    cfg.reconstruct.eta_trials, cfg.seed, cfg.threads,
                                    cfg.reconstruct.clean_tolerance);
    p.vae_sigma = p.calibration->chosen;
  }
  return p;
}

const GridRow& ReportGrid::at(const std::string& method, const std::string& input_kind, LabelKind label) const {
  for (const auto& r : rows)
    if (r.method == method && r.input_kind == input_kind && r.label_kind == label) return r;
  throw Error("grid '" + name + "' has no row " + method + "/" + input_kind + "/" + to_string(label));
}

ReportGrid run_grid(const Pipeline& p) {
  std::vector<Method> methods;
  methods.push_back({"none", std::nullopt, false});
  methods.push_back({"ae", Reconstructor::ae(p.pca), false});
  methods.push_back({"dm", p.dm(), false});
  methods.push_back({"vae", p.vae(), false});
  methods.push_back({"dm+sampling", p.dm(), true});
  methods.push_back({"vae+sampling", p.vae(), true});
  return evaluate_methods(p, "grid", methods);
}

ReportGrid run_baselines(const Pipeline& p) {
  std::vector<Method> methods;
  methods.push_back({"none", std::nullopt, false});
  methods.push_back({"vae+sampling", p.vae(), true});
  for (const auto& t : p.cfg.baselines) {
    std::string name = to_string(t.kind);
    const auto dup = std::count_if(methods.begin(), methods.end(),
                                   [&](const Method& m) { return m.name.rfind(name, 0) == 0; });
    if (dup > 0) name += "#" + std::to_string(dup + 1);
    methods.push_back({name, Reconstructor::transform(t, p.data.config.grid()), false});
  }
  return evaluate_methods(p, "baselines", methods);
}

const SweepRow& SweepTable::at(const std::string& sanitizer, const std::string& input_kind, int n) const {
  for (const auto& r : rows)
    if (r.sanitizer == sanitizer && r.input_kind == input_kind && r.num_samples == n) return r;
  throw Error("sweep has no row " + sanitizer + "/" + input_kind + "/N=" + std::to_string(n));
}

SweepTable run_sweep(const Pipeline& p) {
  SweepTable table;
  std::vector<int> values = p.cfg.sweep_values;
  std::sort(values.begin(), values.end());
  values.erase(std::unique(values.begin(), values.end()), values.end());
  const int max_n = values.back();
  const auto& eval = p.data.eval;
  const auto& bank = p.data.labels;

  for (const auto& [name, sanitizer] : {std::pair{std::string("dm"), p.dm()}, std::pair{std::string("vae"), p.vae()}}) {
    for (int b = 0; b < 2; ++b) {
      const auto per_sample = parallel_map(p.cfg.threads, eval.size(), [&](std::size_t i) {
        const Vec& x = b == 0 ? eval[i].pixels : p.attacks[i].result.perturbed;
        std::vector<ConsensusDraw> draws;
        for (int k = 0; k < max_n; ++k)
          draws.push_back(consensus_draw(x, sanitizer, p.encoder, bank, p.cfg.seed, eval[i].sample_id, k));
        std::vector<MetricRecord> recs;
        for (int n : values) {
          const auto d = aggregate_votes(std::span(draws).first(static_cast<std::size_t>(n)), bank);
          recs.push_back(make_record(eval[i].sample_id, eval[i].label, p.attacks[i].target, d));
        }
        return recs;
      });
      for (std::size_t v = 0; v < values.size(); ++v) {
        std::vector<MetricRecord> recs;
        for (const auto& s : per_sample) recs.push_back(s[v]);
        table.rows.push_back({name, b == 0 ? "org_img" : "prt_img", values[v], summarize(recs, LabelKind::original),
                              summarize(recs, LabelKind::target)});
      }
    }
  }
  return table;
}

std::vector<HistogramBin> histogram(const std::vector<double>& values, double lo, double hi, double width) {
  if (!(hi > lo) || !(width > 0.0)) throw Error("histogram: need hi > lo and width > 0");
  const int bins = static_cast<int>(std::ceil((hi - lo) / width - 1e-9));
  std::vector<HistogramBin> out(static_cast<std::size_t>(bins));
  for (int b = 0; b < bins; ++b) {
    out[static_cast<std::size_t>(b)].lo = lo + b * width;
    out[static_cast<std::size_t>(b)].hi = std::min(hi, lo + (b + 1) * width);
  }
  for (double v : values) {
    int b = static_cast<int>(std::floor((v - lo) / width + 1e-9));
    b = std::clamp(b, 0, bins - 1);
    ++out[static_cast<std::size_t>(b)].count;
  }
  return out;
}

double AttackCostTable::success_rate(bool defended_arm) const {
  const auto& r = defended_arm ? defended : undefended;
  if (r.empty()) return 0.0;
  return static_cast<double>(std::count_if(r.begin(), r.end(), [](const auto& x) { return x.success; })) /
         static_cast<double>(r.size());
}

double AttackCostTable::median_loops(bool defended_arm) const {
  return median(loops_of(defended_arm ? defended : undefended));
}

double AttackCostTable::median_final_cos(bool defended_arm) const {
  return median(final_cos_of(defended_arm ? defended : undefended));
}

double AttackCostTable::median_success_cos() const { return median(present(success_cos)); }

AttackCostTable run_attack_cost(const Pipeline& p) {
  AttackCostTable t;
  t.loop_budget = p.cfg.attack.loop_budget;
  const auto& eval = p.data.eval;
  const auto& bank = p.data.labels;
  AttackConfig run = p.cfg.attack;
  run.max_iters = run.loop_budget;

  using Outcome = std::pair<AttackCostRecord, std::optional<double>>;
  const auto plain = parallel_map(p.cfg.threads, eval.size(), [&](std::size_t i) {
    const int target = p.attacks[i].target;
    std::optional<double> hit;
    auto observer = [&](int, const Vec& xt, double cos) {
      if (!hit) {
        const Vec e = encode(p.encoder, xt);
        if (classify(p.encoder, bank, decode_embedding(p.decoder, e)).argmax() == target) hit = cos;
      }
      return false;
    };
    const AttackResult r = pgd_illusion(eval[i].pixels, target, p.encoder, bank, run, observer);
    AttackCostRecord rec;
    rec.sample_id = eval[i].sample_id;
    rec.target_label = target;
    rec.success = r.success;
    rec.loops_used = r.success ? r.loops_used : run.loop_budget;
    rec.final_cos = r.best_cos;
    return Outcome{rec, hit};
  });
  for (const auto& [rec, hit] : plain) {
    t.undefended.push_back(rec);
    t.success_cos.push_back(hit);
  }

  std::vector<int> targets;
  for (const auto& a : p.attacks) targets.push_back(a.target);
  const Reconstructor vae = p.vae();
  t.defended = measure_attack_cost(eval, targets, p.encoder, bank, &vae, p.cfg.attack, p.cfg.threads);
  return t;
}

TransferTable run_transfer(const Pipeline& p) {
  const auto& eval = p.data.eval;
  const auto& bank = p.data.labels;
  const EncoderModel linear = p.cfg.encoder.kind == EncoderKind::linear
                                  ? p.encoder
                                  : fit_encoder(p.data, p.cfg.encoder, EncoderKind::linear, p.cfg.seed);
  const EncoderModel mlp = p.cfg.encoder.kind == EncoderKind::mlp
                               ? p.encoder
                               : fit_encoder(p.data, p.cfg.encoder, EncoderKind::mlp, p.cfg.seed);
  const Reconstructor vae = p.vae();

  TransferTable table;
  const std::array<std::pair<const EncoderModel*, const EncoderModel*>, 2> directions{
      std::pair{&linear, &mlp}, std::pair{&mlp, &linear}};
  for (const auto& [src, dst] : directions) {
    struct Outcome {
      bool source_hit, plain_target, plain_orig, def_target, def_orig;
    };
    const auto outcomes = parallel_map(p.cfg.threads, eval.size(), [&](std::size_t i) {
      const int target = p.attacks[i].target;
      const AttackResult r = pgd_illusion(eval[i].pixels, target, *src, bank, p.cfg.attack);
      const int plain = classify(*dst, bank, r.perturbed).argmax();
      const ConsensusConfig cc{p.cfg.consensus_samples, vae, p.cfg.seed};
      const int winner = consensus_classify(r.perturbed, cc, *dst, bank, eval[i].sample_id).winner;
      return Outcome{classify(*src, bank, r.perturbed).argmax() == target, plain == target,
                     plain == eval[i].label, winner == target, winner == eval[i].label};
    });
    const double n = static_cast<double>(eval.size());
    auto frac = [&](auto pick) {
      return static_cast<double>(std::count_if(outcomes.begin(), outcomes.end(), pick)) / n;
    };
    const double source_rate = frac([](const Outcome& o) { return o.source_hit; });
    for (bool defended : {false, true}) {
      TransferRow row;
      row.source = to_string(src->kind);
      row.evaluator = to_string(dst->kind);
      row.defended = defended;
      row.target_top1 = frac([&](const Outcome& o) { return defended ? o.def_target : o.plain_target; });
      row.original_top1 = frac([&](const Outcome& o) { return defended ? o.def_orig : o.plain_orig; });
      row.source_target_top1 = source_rate;
      row.n = static_cast<int>(eval.size());
      table.rows.push_back(row);
    }
  }
  return table;
}

double EtaCheck::pooled_se() const { return std::sqrt(predicted_se * predicted_se + observed_se * observed_se); }

bool EtaCheck::consistent(double z) const { return std::abs(predicted - observed) <= z * pooled_se() + 1e-12; }

EtaCheck run_eta_check(const Pipeline& p) {
  EtaCheck c;
  c.num_samples = p.cfg.eta_check_samples;
  const auto attacked = p.attacked_eval();
  const Reconstructor vae = p.vae();
  c.eta = calibrate_eta(attacked, vae, p.encoder, p.data.labels, p.cfg.reconstruct.eta_trials, p.cfg.seed,
                        p.cfg.threads);
  c.predicted = majority_attack_probability(c.eta.eta, c.num_samples);
  const double h = 1e-6;
  const double lo = std::max(0.0, c.eta.eta - h);
  const double hi = std::min(1.0, c.eta.eta + h);
  const double slope =
      (majority_attack_probability(hi, c.num_samples) - majority_attack_probability(lo, c.num_samples)) / (hi - lo);
  c.predicted_se = std::abs(slope) * c.eta.std_error;

  const ConsensusConfig cc{c.num_samples, vae, p.cfg.seed};
  const auto hits = parallel_map(p.cfg.threads, attacked.size(), [&](std::size_t i) {
    return static_cast<int>(consensus_classify(attacked[i].pixels, cc, p.encoder, p.data.labels,
                                               attacked[i].sample_id)
                                .winner == attacked[i].target);
  });
  c.n = static_cast<int>(attacked.size());
  c.observed = std::accumulate(hits.begin(), hits.end(), 0.0) / c.n;
  c.observed_se = std::sqrt(c.observed * (1.0 - c.observed) / c.n);
  return c;
}

std::string grid_csv(const ReportGrid& grid, std::uint64_t seed, const std::string& hash) {
  if (grid.rows.empty()) throw Error("grid '" + grid.name + "' is empty");
  std::ostringstream out;
  out << "method,input_kind,label_kind,top1,top5,cs_mean,cs_std,n,seed,config_hash\n";
  for (const auto& r : grid.rows) {
    const auto& m = r.summary;
    out << r.method << ',' << r.input_kind << ',' << to_string(r.label_kind) << ',' << fmt6(m.top1) << ','
        << fmt6(m.top5) << ',' << fmt6(m.cs_mean) << ',' << fmt6(m.cs_std) << ',' << m.n << ',' << seed << ','
        << hash << '\n';
  }
  return out.str();
}

std::string sweep_csv(const SweepTable& t, std::uint64_t seed, const std::string& hash) {
  if (t.rows.empty()) throw Error("sweep table is empty");
  std::ostringstream out;
  out << "sanitizer,input_kind,num_samples,top1_original,top5_original,top1_target,top5_target,cs_original_mean,"
         "cs_target_mean,n,seed,config_hash\n";
  for (const auto& r : t.rows) {
    out << r.sanitizer << ',' << r.input_kind << ',' << r.num_samples << ',' << fmt6(r.original.top1) << ','
        << fmt6(r.original.top5) << ',' << fmt6(r.target.top1) << ',' << fmt6(r.target.top5) << ','
        << fmt6(r.original.cs_mean) << ',' << fmt6(r.target.cs_mean) << ',' << r.original.n << ',' << seed << ','
        << hash << '\n';
  }
  return out.str();
}

std::string transfer_csv(const TransferTable& t, std::uint64_t seed, const std::string& hash) {
  if (t.rows.empty()) throw Error("transfer table is empty");
  std::ostringstream out;
  out << "source_encoder,eval_encoder,defended,target_top1,original_top1,source_target_top1,n,seed,config_hash\n";
  for (const auto& r : t.rows) {
    out << r.source << ',' << r.evaluator << ',' << (r.defended ? 1 : 0) << ',' << fmt6(r.target_top1) << ','
        << fmt6(r.original_top1) << ',' << fmt6(r.source_target_top1) << ',' << r.n << ',' << seed << ',' << hash
        << '\n';
  }
  return out.str();
}

std::string calibration_csv(const SigmaCalibration& c) {
  std::ostringstream out;
  out << "sigma,clean_top1,reference_top1,eta,eta_std_error,chosen\n";
  for (const auto& k : c.candidates) {
    out << fmt6(k.sigma) << ',' << fmt6(k.clean_top1) << ',' << fmt6(c.reference_top1) << ',' << fmt6(k.eta.eta)
        << ',' << fmt6(k.eta.std_error) << ',' << (k.sigma == c.chosen ? 1 : 0) << '\n';
  }
  return out.str();
}

std::string votes_csv(const std::vector<VoteRecord>& votes) {
  std::ostringstream out;
  out << "sample_id,method,input_kind,draw_index,vote,top_score\n";
  for (const auto& v : votes)
    out << v.sample_id << ',' << v.method << ',' << v.input_kind << ',' << v.draw_index << ',' << v.vote << ','
        << fmt6(v.top_score) << '\n';
  return out.str();
}

std::string histogram_csv(const std::vector<std::pair<std::string, std::vector<HistogramBin>>>& series) {
  std::ostringstream out;
  out << "series,bin_lo,bin_hi,count\n";
  for (const auto& [name, bins] : series)
    for (const auto& b : bins) out << name << ',' << fmt6(b.lo) << ',' << fmt6(b.hi) << ',' << b.count << '\n';
  return out.str();
}

std::vector<std::filesystem::path> emit_report(const Report& report, const std::filesystem::path& out_dir) {
  if (!report.grid && !report.baselines && !report.sweep && !report.attack_cost && !report.transfer)
    throw Error("emit_report: nothing to write");
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create '" + out_dir.string() + "': " + ec.message());

  std::vector<std::filesystem::path> written;
  auto put = [&](const std::string& name, const std::string& text) {
    const auto path = out_dir / name;
    write_text_file(path, text);
    written.push_back(path);
  };

  Json summary;
  summary["provenance"] = {{"config_hash", report.config_hash},
                           {"seed", report.seed},
                           {"library", "illusion 1.0.0"},
                           {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) +
                                         "." + std::to_string(EIGEN_MINOR_VERSION)}};
  if (!report.fit.is_null()) summary["fit"] = report.fit;

  if (report.calibration) {
    put("calibration.csv", calibration_csv(*report.calibration));
    Json c;
    c["chosen_sigma"] = rounded(report.calibration->chosen);
    c["reference_top1"] = rounded(report.calibration->reference_top1);
    Json cands = Json::array();
    for (const auto& k : report.calibration->candidates)
      cands.push_back({{"sigma", rounded(k.sigma)},
                       {"clean_top1", rounded(k.clean_top1)},
                       {"eta", rounded(k.eta.eta)},
                       {"eta_std_error", rounded(k.eta.std_error)}});
    c["candidates"] = cands;
    summary["calibration"] = c;
  }
  if (report.grid) {
    put("grid.csv", grid_csv(*report.grid, report.seed, report.config_hash));
    summary["grid"] = grid_json(*report.grid);
    if (!report.grid->votes.empty()) put("votes.csv", votes_csv(report.grid->votes));
  }
  if (report.baselines) {
    put("baselines.csv", grid_csv(*report.baselines, report.seed, report.config_hash));
    summary["baselines"] = grid_json(*report.baselines);
    if (!report.baselines->votes.empty()) put("votes_baselines.csv", votes_csv(report.baselines->votes));
  }
  if (report.sweep) {
    put("sweep.csv", sweep_csv(*report.sweep, report.seed, report.config_hash));
    Json rows = Json::array();
    for (const auto& r : report.sweep->rows)
      rows.push_back({{"sanitizer", r.sanitizer},
                      {"input_kind", r.input_kind},
                      {"num_samples", r.num_samples},
                      {"original", summary_json(r.original)},
                      {"target", summary_json(r.target)}});
    summary["sweep"] = rows;
  }
  if (report.attack_cost) {
    const auto& t = *report.attack_cost;
    std::vector<AttackCostRecord> all = t.undefended;
    all.insert(all.end(), t.defended.begin(), t.defended.end());
    put("attack_cost.csv", attack_records_csv(all));
    const double hi = loop_hist_hi(t.loop_budget);
    const auto success_hist = histogram(present(t.success_cos), -1.0, 1.0, kCosBinWidth);
    const auto final_hist_u = histogram(final_cos_of(t.undefended), -1.0, 1.0, kCosBinWidth);
    const auto final_hist_d = histogram(final_cos_of(t.defended), -1.0, 1.0, kCosBinWidth);
    const auto loops_hist_u = histogram(loops_of(t.undefended), 0.0, hi, kLoopBinWidth);
    const auto loops_hist_d = histogram(loops_of(t.defended), 0.0, hi, kLoopBinWidth);
    put("hist_success_cosine.csv", histogram_csv({{"undefended", success_hist}}));
    put("hist_final_cosine.csv", histogram_csv({{"undefended", final_hist_u}, {"defended", final_hist_d}}));
    put("hist_loops.csv", histogram_csv({{"undefended", loops_hist_u}, {"defended", loops_hist_d}}));
    Json a;
    a["loop_budget"] = t.loop_budget;
    for (bool d : {false, true}) {
      const auto& recs = d ? t.defended : t.undefended;
      a[d ? "defended" : "undefended"] = {{"success_rate", rounded(t.success_rate(d))},
                                          {"median_loops", rounded(t.median_loops(d))},
                                          {"median_final_cos", rounded(t.median_final_cos(d))},
                                          {"n", recs.size()}};
    }
    const auto hits = present(t.success_cos);
    a["success_cosine"] = {{"median", hits.empty() ? Json(nullptr) : Json(rounded(t.median_success_cos()))},
                           {"count", hits.size()}};
    a["histograms"] = {{"hist_success_cosine", histogram_json(success_hist)},
                       {"hist_final_cosine_undefended", histogram_json(final_hist_u)},
                       {"hist_final_cosine_defended", histogram_json(final_hist_d)},
                       {"hist_loops_undefended", histogram_json(loops_hist_u)},
                       {"hist_loops_defended", histogram_json(loops_hist_d)}};
    summary["attack_cost"] = a;
  }
  if (report.transfer) {
    put("transfer.csv", transfer_csv(*report.transfer, report.seed, report.config_hash));
    Json rows = Json::array();
    for (const auto& r : report.transfer->rows)
      rows.push_back({{"source_encoder", r.source},
                      {"eval_encoder", r.evaluator},
                      {"defended", r.defended},
                      {"target_top1", rounded(r.target_top1)},
                      {"original_top1", rounded(r.original_top1)},
                      {"source_target_top1", rounded(r.source_target_top1)},
                      {"n", r.n}});
    summary["transfer"] = rows;
  }
  if (report.eta_check) {
    const auto& e = *report.eta_check;
    summary["eta_check"] = {{"num_samples", e.num_samples},
                            {"eta", rounded(e.eta.eta)},
                            {"eta_std_error", rounded(e.eta.std_error)},
                            {"predicted", rounded(e.predicted)},
                            {"observed", rounded(e.observed)},
                            {"pooled_std_error", rounded(e.pooled_se())},
                            {"consistent_3se", e.consistent()},
                            {"n", e.n}};
  }

  put("summary.json", summary.dump(2) + "\n");
  put("config_echo.json", report.config.dump(2) + "\n");
  Json timing;
  for (const auto& [k, v] : report.timing_seconds) timing[k] = v;
  put("timing.json", timing.dump(2) + "\n");
  return written;
}

Report run_experiment(const ExperimentConfig& cfg) {
  using Clock = std::chrono::steady_clock;
  Report report;
  auto timed = [&](const std::string& name, auto&& fn) {
    const auto t0 = Clock::now();
    fn();
    report.timing_seconds[name] = std::chrono::duration<double>(Clock::now() - t0).count();
  };

  Pipeline p;
  timed("fit", [&] { p = build_pipeline(cfg); });
  report.config_hash = p.hash;
  report.seed = cfg.seed;
  report.config = to_json(cfg);
  report.calibration = p.calibration;

  Json fit;
  fit["encoder"] = to_string(p.encoder.kind);
  fit["encoder_train_cos"] = rounded(p.encoder_train_cos);
  fit["decoder_fit_residual"] = rounded(p.decoder.fit_residual);
  fit["pca_rank"] = p.pca->rank();
  fit["pca_explained_fraction"] = rounded(p.pca->explained_fraction);
  fit["vae_sigma"] = rounded(p.vae_sigma);
  fit["dataset_hash"] = dataset_content_hash(p.data);
  report.fit = fit;

  const auto e = cfg.experiment;
  const bool all = e == Experiment::report;
  if (all || e == Experiment::grid) {
    timed("grid", [&] { report.grid = run_grid(p); });
    timed("eta_check", [&] { report.eta_check = run_eta_check(p); });
  }
  if (all || e == Experiment::baselines) timed("baselines", [&] { report.baselines = run_baselines(p); });
  if (all || e == Experiment::sweep) timed("sweep", [&] { report.sweep = run_sweep(p); });
  if (all || e == Experiment::attack_cost) timed("attack_cost", [&] { report.attack_cost = run_attack_cost(p); });
  if (all || e == Experiment::transfer) timed("transfer", [&] { report.transfer = run_transfer(p); });

  const auto t0 = Clock::now();
  emit_report(report, cfg.out_dir);
  report.timing_seconds["emit"] = std::chrono::duration<double>(Clock::now() - t0).count();
  return report;
}

}  // namespace illusion
