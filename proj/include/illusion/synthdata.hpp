#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "illusion/image.hpp"
#include "illusion/linalg.hpp"

namespace illusion {

struct DataConfig {
  int num_classes = 20;
  int height = 16;
  int width = 16;
  int embed_dim = 64;
  double pixel_noise_std = 0.05;
  int train_per_class = 50;
  int eval_per_class = 5;
  double prototype_smoothing_std = 2.0;
  std::uint64_t master_seed = 7;

  int pixels() const { return height * width; }
  GridShape grid() const { return {height, width}; }

  /// Throws ConfigError naming the first offending field.
  void validate() const;
};

enum class Split { train, eval };

struct ClassPrototype {
  int class_id = 0;
  Vec mean_image;
};

struct ImageSample {
  Vec pixels;
  int label = 0;
  Split split = Split::train;
  int sample_id = 0;
};

/// Unit-norm label embeddings, one column per class.
struct LabelBank {
  Mat embeddings;  // d × C

  int num_classes() const { return static_cast<int>(embeddings.cols()); }
  int embed_dim() const { return static_cast<int>(embeddings.rows()); }
  Vec embedding(int label) const { return embeddings.col(label); }
};

/// Equal-weight isotropic Gaussian mixture over the class prototypes.
struct MixtureModel {
  Mat means;  // n × C
  double component_std = 0.0;

  int num_components() const { return static_cast<int>(means.cols()); }
  double weight() const { return 1.0 / num_components(); }
};

struct Dataset {
  DataConfig config;
  std::vector<ClassPrototype> prototypes;
  std::vector<ImageSample> train;
  std::vector<ImageSample> eval;
  LabelBank labels;
  MixtureModel mixture;

  Mat prototype_matrix() const;  // n × C
  Mat train_matrix() const;      // N_train × n
};

Dataset generate_dataset(const DataConfig& cfg);

/// Prototype of one class: uniform noise, Gaussian smoothing, then each
/// pixel z-scored and squashed through 0.1 + 0.8·Φ(z).
Vec make_prototype(const DataConfig& cfg, int class_id);

LabelBank make_label_bank(const DataConfig& cfg);

/// ∇ₓ log pₜ(x) for pₜ = Σ_y (1/C)·N(√ᾱ·μ_y, (ᾱs² + 1 − ᾱ)·I).
Vec mixture_score(const MixtureModel& m, const Vec& x, double alpha_bar);

/// Jacobian of mixture_score is symmetric, so this is both J·g and Jᵀ·g.
Vec mixture_score_vjp(const MixtureModel& m, const Vec& x, double alpha_bar, const Vec& g);

/// Writes manifest.json plus raw little-endian arrays (see README).
void save_dataset(const Dataset& data, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

/// FNV-1a over the serialized arrays in manifest order.
std::string dataset_content_hash(const Dataset& data);

}  // namespace illusion
