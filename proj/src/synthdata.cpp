#include "illusion/synthdata.hpp"

#include <cmath>
#include <fstream>
#include <random>

#include "illusion/errors.hpp"
#include "illusion/hash.hpp"
#include "illusion/json_io.hpp"
#include "illusion/rng.hpp"

namespace illusion {

namespace {

constexpr double kCoherenceBound = 0.5;

double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

std::vector<ImageSample> make_samples(const DataConfig& cfg, const std::vector<ClassPrototype>& protos,
                                      Split split) {
  const int per_class = split == Split::train ? cfg.train_per_class : cfg.eval_per_class;
  const Stream tag = split == Split::train ? Stream::train_noise : Stream::eval_noise;
  std::vector<ImageSample> samples;
  samples.reserve(static_cast<std::size_t>(per_class) * cfg.num_classes);
  const int n = cfg.pixels();
  for (int y = 0; y < cfg.num_classes; ++y) {
    for (int i = 0; i < per_class; ++i) {
      const int id = y * per_class + i;
      Engine rng = make_engine(cfg.master_seed, tag, static_cast<std::uint64_t>(id));
      std::normal_distribution<double> normal(0.0, 1.0);
      Vec noise(n);
      for (int p = 0; p < n; ++p) noise[p] = normal(rng);
      samples.push_back({clip01(protos[y].mean_image + cfg.pixel_noise_std * noise), y, split, id});
    }
  }
  return samples;
}

// Raw array helpers for the on-disk layout.
template <typename T>
std::span<const std::byte> bytes_of(const std::vector<T>& v) {
  return std::as_bytes(std::span(v.data(), v.size()));
}

std::vector<double> rows_of(const std::vector<ImageSample>& samples) {
  std::vector<double> out;
  for (const auto& s : samples) out.insert(out.end(), s.pixels.data(), s.pixels.data() + s.pixels.size());
  return out;
}

std::vector<std::int32_t> labels_of(const std::vector<ImageSample>& samples) {
  std::vector<std::int32_t> out;
  for (const auto& s : samples) out.push_back(s.label);
  return out;
}

std::vector<double> prototype_rows(const Dataset& d) {
  std::vector<double> out;
  for (const auto& p : d.prototypes)
    out.insert(out.end(), p.mean_image.data(), p.mean_image.data() + p.mean_image.size());
  return out;
}

std::vector<double> embedding_rows(const LabelBank& bank) {
  std::vector<double> out;
  for (int y = 0; y < bank.num_classes(); ++y)
    for (int k = 0; k < bank.embed_dim(); ++k) out.push_back(bank.embeddings(k, y));
  return out;
}

struct ArrayFile {
  std::string name;
  std::string dtype;
  std::vector<std::byte> bytes;
  std::vector<long> shape;
};

template <typename T>
ArrayFile make_array(std::string name, std::string dtype, const std::vector<T>& v, std::vector<long> shape) {
  auto b = bytes_of(v);
  return {std::move(name), std::move(dtype), std::vector<std::byte>(b.begin(), b.end()), std::move(shape)};
}

std::vector<ArrayFile> arrays_of(const Dataset& d) {
  const long n = d.config.pixels();
  const long c = d.config.num_classes;
  std::vector<ArrayFile> files;
  files.push_back(make_array("prototypes.f64", "f64", prototype_rows(d), {c, n}));
  files.push_back(make_array("train_pixels.f64", "f64", rows_of(d.train), {static_cast<long>(d.train.size()), n}));
  files.push_back(make_array("train_labels.i32", "i32", labels_of(d.train), {static_cast<long>(d.train.size())}));
  files.push_back(make_array("eval_pixels.f64", "f64", rows_of(d.eval), {static_cast<long>(d.eval.size()), n}));
  files.push_back(make_array("eval_labels.i32", "i32", labels_of(d.eval), {static_cast<long>(d.eval.size())}));
  files.push_back(make_array("label_embeddings.f64", "f64", embedding_rows(d.labels), {c, d.config.embed_dim}));
  return files;
}

template <typename T>
std::vector<T> read_array(const std::filesystem::path& path, std::size_t count) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::vector<T> out(count);
  in.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(count * sizeof(T)));
  if (in.gcount() != static_cast<std::streamsize>(count * sizeof(T)))
    throw IoError("short read from '" + path.string() + "'");
  return out;
}

std::vector<ImageSample> samples_from(const std::vector<double>& px, const std::vector<std::int32_t>& labels,
                                      int n, Split split) {
  std::vector<ImageSample> out;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    out.push_back({Eigen::Map<const Vec>(px.data() + i * n, n), labels[i], split, static_cast<int>(i)});
  }
  return out;
}

}  // namespace

void DataConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& why) {
    throw ConfigError("data." + field + ": " + why);
  };
  if (num_classes < 2) fail("num_classes", "must be >= 2");
  if (height < 1) fail("height", "must be >= 1");
  if (width < 1) fail("width", "must be >= 1");
  if (embed_dim < 1) fail("embed_dim", "must be >= 1");
  if (pixels() < embed_dim) fail("embed_dim", "must not exceed height*width");
  if (!(pixel_noise_std >= 0.0)) fail("pixel_noise_std", "must be >= 0");
  if (train_per_class < 1) fail("train_per_class", "must be >= 1");
  if (eval_per_class < 1) fail("eval_per_class", "must be >= 1");
  if (!(prototype_smoothing_std >= 0.0)) fail("prototype_smoothing_std", "must be >= 0");
}

Mat Dataset::prototype_matrix() const {
  Mat p(config.pixels(), static_cast<Eigen::Index>(prototypes.size()));
  for (std::size_t y = 0; y < prototypes.size(); ++y) p.col(static_cast<Eigen::Index>(y)) = prototypes[y].mean_image;
  return p;
}

Mat Dataset::train_matrix() const {
  Mat x(static_cast<Eigen::Index>(train.size()), config.pixels());
  for (std::size_t i = 0; i < train.size(); ++i) x.row(static_cast<Eigen::Index>(i)) = train[i].pixels.transpose();
  return x;
}

Vec make_prototype(const DataConfig& cfg, int class_id) {
  const int n = cfg.pixels();
  Engine rng = make_engine(cfg.master_seed, Stream::prototype, static_cast<std::uint64_t>(class_id));
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  Vec raw(n);
  for (int p = 0; p < n; ++p) raw[p] = uniform(rng);
  const Vec smooth = gaussian_blur(raw, cfg.grid(), cfg.prototype_smoothing_std);

  const double mean = smooth.mean();
  const double sd = std::sqrt((smooth.array() - mean).square().mean());
  Vec out(n);
  for (int p = 0; p < n; ++p) {
    const double z = sd > 0.0 ? (smooth[p] - mean) / sd : 0.0;
    out[p] = 0.1 + 0.8 * normal_cdf(z);
  }
  return out;
}

LabelBank make_label_bank(const DataConfig& cfg) {
  const int c = cfg.num_classes;
  const int d = cfg.embed_dim;
  const long max_attempts = 10L * c * c;
  Engine rng = make_engine(cfg.master_seed, Stream::label_bank, 0);
  std::normal_distribution<double> normal(0.0, 1.0);

  LabelBank bank{Mat(d, c)};
  int accepted = 0;
  long attempts = 0;
  while (accepted < c) {
    if (++attempts > max_attempts) {
      throw GenerationError("label bank: coherence rejection exceeded " + std::to_string(max_attempts) +
                            " attempts; embed_dim " + std::to_string(d) + " is too small for " +
                            std::to_string(c) + " classes");
    }
    Vec v(d);
    for (int k = 0; k < d; ++k) v[k] = normal(rng);
    const double norm = v.norm();
    if (norm == 0.0) continue;
    v /= norm;
    bool ok = true;
    for (int z = 0; z < accepted && ok; ++z) ok = std::abs(v.dot(bank.embeddings.col(z))) <= kCoherenceBound;
    if (ok) bank.embeddings.col(accepted++) = v;
  }
  return bank;
}

Dataset generate_dataset(const DataConfig& cfg) {
  cfg.validate();
  Dataset d;
  d.config = cfg;
  for (int y = 0; y < cfg.num_classes; ++y) d.prototypes.push_back({y, make_prototype(cfg, y)});
  d.train = make_samples(cfg, d.prototypes, Split::train);
  d.eval = make_samples(cfg, d.prototypes, Split::eval);
  d.labels = make_label_bank(cfg);
  d.mixture = {d.prototype_matrix(), cfg.pixel_noise_std};
  return d;
}

namespace {

struct Responsibilities {
  Vec weights;  // per component
  double scale; // √ᾱ
  double variance;
};

Responsibilities responsibilities(const MixtureModel& m, const Vec& x, double alpha_bar) {
  if (!(alpha_bar > 0.0 && alpha_bar <= 1.0)) throw Error("mixture_score: alpha_bar must lie in (0, 1]");
  const double a = std::sqrt(alpha_bar);
  const double v = alpha_bar * m.component_std * m.component_std + (1.0 - alpha_bar);
  if (!(v > 0.0)) throw NumericFailure("mixture_score: zero component variance at alpha_bar = 1");
  const int c = m.num_components();
  Vec logits(c);
  for (int y = 0; y < c; ++y) logits[y] = -(x - a * m.means.col(y)).squaredNorm() / (2.0 * v);
  const double top = logits.maxCoeff();
  Vec w = (logits.array() - top).exp();
  w /= w.sum();
  return {std::move(w), a, v};
}

}  // namespace

Vec mixture_score(const MixtureModel& m, const Vec& x, double alpha_bar) {
  const auto r = responsibilities(m, x, alpha_bar);
  const Vec centre = r.scale * (m.means * r.weights);
  return (centre - x) / r.variance;
}

Vec mixture_score_vjp(const MixtureModel& m, const Vec& x, double alpha_bar, const Vec& g) {
  // J = (Cov_w[√ᾱ·μ] / v − I) / v
  const auto r = responsibilities(m, x, alpha_bar);
  const Vec centre = r.scale * (m.means * r.weights);
  Vec cov_g = Vec::Zero(x.size());
  for (int y = 0; y < m.num_components(); ++y) {
    if (r.weights[y] == 0.0) continue;
    const Vec dev = r.scale * m.means.col(y) - centre;
    cov_g += r.weights[y] * dev.dot(g) * dev;
  }
  return (cov_g / r.variance - g) / r.variance;
}

std::string dataset_content_hash(const Dataset& data) {
  Fnv1a h;
  for (const auto& a : arrays_of(data)) h.update(a.bytes);
  return h.hex();
}

void save_dataset(const Dataset& data, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create '" + dir.string() + "': " + ec.message());

  Json manifest;
  manifest["format"] = "illusion-dataset/1";
  manifest["config"] = to_json(data.config);
  manifest["arrays"] = Json::array();
  Fnv1a h;
  for (const auto& a : arrays_of(data)) {
    const auto path = dir / a.name;
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out.write(reinterpret_cast<const char*>(a.bytes.data()), static_cast<std::streamsize>(a.bytes.size()));
    if (!out) throw IoError("write failed for '" + path.string() + "'");
    h.update(a.bytes);
    manifest["arrays"].push_back({{"file", a.name}, {"dtype", a.dtype}, {"shape", a.shape}});
  }
  manifest["content_hash"] = "fnv1a64:" + h.hex();
  write_text_file(dir / "manifest.json", manifest.dump(2) + "\n");
}

Dataset load_dataset(const std::filesystem::path& dir) {
  Json manifest;
  try {
    manifest = Json::parse(read_text_file(dir / "manifest.json"));
  } catch (const nlohmann::json::exception& e) {
    throw IoError("bad manifest in '" + dir.string() + "': " + e.what());
  }
  Dataset d;
  d.config = data_config_from_json(manifest.at("config"), "config");
  d.config.validate();
  const auto& cfg = d.config;
  const int n = cfg.pixels();
  const int c = cfg.num_classes;
  const std::size_t n_train = static_cast<std::size_t>(cfg.train_per_class) * c;
  const std::size_t n_eval = static_cast<std::size_t>(cfg.eval_per_class) * c;

  const auto protos = read_array<double>(dir / "prototypes.f64", static_cast<std::size_t>(c) * n);
  for (int y = 0; y < c; ++y) d.prototypes.push_back({y, Eigen::Map<const Vec>(protos.data() + y * n, n)});
  d.train = samples_from(read_array<double>(dir / "train_pixels.f64", n_train * n),
                         read_array<std::int32_t>(dir / "train_labels.i32", n_train), n, Split::train);
  d.eval = samples_from(read_array<double>(dir / "eval_pixels.f64", n_eval * n),
                        read_array<std::int32_t>(dir / "eval_labels.i32", n_eval), n, Split::eval);
  const auto emb = read_array<double>(dir / "label_embeddings.f64", static_cast<std::size_t>(c) * cfg.embed_dim);
  d.labels.embeddings = Mat(cfg.embed_dim, c);
  for (int y = 0; y < c; ++y)
    for (int k = 0; k < cfg.embed_dim; ++k) d.labels.embeddings(k, y) = emb[static_cast<std::size_t>(y) * cfg.embed_dim + k];
  d.mixture = {d.prototype_matrix(), cfg.pixel_noise_std};

  const std::string expected = manifest.value("content_hash", "");
  if (expected != "fnv1a64:" + dataset_content_hash(d))
    throw IoError("content hash mismatch in '" + dir.string() + "'");
  return d;
}

}  // namespace illusion
