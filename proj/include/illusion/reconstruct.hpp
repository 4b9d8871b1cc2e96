#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "illusion/image.hpp"
#include "illusion/linalg.hpp"
#include "illusion/synthdata.hpp"

namespace illusion {

struct PcaBasis {
  Vec mean;
  Mat basis;  // n×k, orthonormal columns
  Vec eigenvalues;              // top-k, descending
  double explained_fraction = 0.0;
  int effective_rank = 0;       // eigenvalues above 1e-10·λ_max

  int rank() const { return static_cast<int>(basis.cols()); }
};

/// Top-k principal subspace of the rows of `pixels` (N×n). Sign convention:
/// the first component with |u_i| > 1e-12 of each column is positive. When k
/// exceeds the numerical rank a warning is written to stderr.
PcaBasis fit_pca(const Mat& pixels, int rank);

enum class SanitizerKind { ae, vae, dm, transform };

const char* to_string(SanitizerKind kind);

struct DmParams {
  double noise_level = 0.3;  // τ
  int steps = 30;            // K
  bool stochastic = false;
};

enum class TransformKind { dct_quantize, gaussian_blur, translate, hflip, jitter };

const char* to_string(TransformKind kind);

struct TransformSpec {
  TransformKind kind = TransformKind::hflip;
  int levels = 16;              // dct_quantize
  double keep_fraction = 0.25;  // dct_quantize
  double blur_sigma = 1.0;      // gaussian_blur
  int max_shift = 2;            // translate
  double contrast_range = 0.2;  // jitter: a ~ U[1 − r, 1 + r]
  double brightness_range = 0.1;  // jitter: b ~ U[−r, r]

  bool stochastic() const { return kind == TransformKind::translate || kind == TransformKind::jitter; }
};

/// The sanitizer G(x, draw): immutable after construction.
class Reconstructor {
 public:
  static Reconstructor ae(std::shared_ptr<const PcaBasis> basis);
  static Reconstructor vae(std::shared_ptr<const PcaBasis> basis, double latent_std);
  static Reconstructor dm(std::shared_ptr<const MixtureModel> mixture, DmParams params);
  static Reconstructor transform(TransformSpec spec, GridShape grid);

  SanitizerKind kind() const { return kind_; }
  bool stochastic() const;
  std::string name() const;

  const PcaBasis& basis() const;
  const MixtureModel& mixture() const;
  double latent_std() const { return latent_std_; }
  const DmParams& dm_params() const { return dm_; }
  const TransformSpec& transform_spec() const { return transform_; }
  GridShape grid() const { return grid_; }

  /// Output always lies in [0,1]^n.
  Vec apply(const Vec& x, std::uint64_t draw_seed) const;

 private:
  SanitizerKind kind_ = SanitizerKind::ae;
  std::shared_ptr<const PcaBasis> basis_;
  std::shared_ptr<const MixtureModel> mixture_;
  double latent_std_ = 0.0;
  DmParams dm_;
  TransformSpec transform_;
  GridShape grid_;
};

Vec ae_reconstruct(const Reconstructor& r, const Vec& x);
Vec vae_reconstruct(const Reconstructor& r, const Vec& x, std::uint64_t draw_seed);

/// Forward noising to ᾱ = 1 − τ, then K uniform Euler steps of the
/// variance-preserving reverse flow up to ᾱ = 1 using the exact mixture score.
/// Throws NumericFailure on a non-finite state.
Vec dm_purify(const Reconstructor& r, const MixtureModel& m, const Vec& x, std::uint64_t draw_seed);

/// Jᵀ·g of dm_purify at (x, draw_seed), back through every Euler step; the
/// final clip is treated as identity.
Vec dm_purify_vjp(const Reconstructor& r, const MixtureModel& m, const Vec& x, std::uint64_t draw_seed,
                  const Vec& g);

Vec transform_apply(const Reconstructor& r, const Vec& x, std::uint64_t draw_seed);

/// dct_quantize on its own, for callers that only hold a spec.
Vec dct_quantize(const Vec& x, GridShape grid, int levels, double keep_fraction);

}  // namespace illusion
