#include "illusion/reconstruct.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <iostream>
#include <random>

#include "illusion/errors.hpp"
#include "illusion/rng.hpp"

namespace illusion {

PcaBasis fit_pca(const Mat& pixels, int rank) {
  const auto count = pixels.rows();
  const auto n = pixels.cols();
  if (rank < 1 || rank > std::min<Eigen::Index>(n, count))
    throw Error("fit_pca: rank " + std::to_string(rank) + " outside [1, min(n, samples)]");

  PcaBasis pca;
  pca.mean = pixels.colwise().mean().transpose();
  const Mat centred = pixels.rowwise() - pca.mean.transpose();
  const Mat cov = centred.transpose() * centred / static_cast<double>(std::max<Eigen::Index>(count - 1, 1));
  Eigen::SelfAdjointEigenSolver<Mat> eig(cov);
  if (eig.info() != Eigen::Success) throw NumericFailure("fit_pca: eigen-decomposition failed");

  const Vec values = eig.eigenvalues().reverse();
  const Mat vectors = eig.eigenvectors().rowwise().reverse();
  pca.basis = vectors.leftCols(rank);
  pca.eigenvalues = values.head(rank);
  for (int j = 0; j < rank; ++j) {
    for (Eigen::Index i = 0; i < n; ++i) {
      if (std::abs(pca.basis(i, j)) > 1e-12) {
        if (pca.basis(i, j) < 0.0) pca.basis.col(j) *= -1.0;
        break;
      }
    }
  }
  const double top = std::max(values[0], 0.0);
  pca.effective_rank = static_cast<int>((values.array() > 1e-10 * top).count());
  if (top == 0.0) pca.effective_rank = 0;
  const double total = values.cwiseMax(0.0).sum();
  pca.explained_fraction = total > 0.0 ? pca.eigenvalues.cwiseMax(0.0).sum() / total : 1.0;
  if (rank > pca.effective_rank) {
    std::cerr << "warning: fit_pca rank " << rank << " exceeds the numerical rank " << pca.effective_rank
              << " of the data\n";
  }
  return pca;
}

const char* to_string(SanitizerKind kind) {
  switch (kind) {
    case SanitizerKind::ae: return "ae";
    case SanitizerKind::vae: return "vae";
    case SanitizerKind::dm: return "dm";
    case SanitizerKind::transform: return "transform";
  }
  return "?";
}

const char* to_string(TransformKind kind) {
  switch (kind) {
    case TransformKind::dct_quantize: return "dct_quantize";
    case TransformKind::gaussian_blur: return "gaussian_blur";
    case TransformKind::translate: return "translate";
    case TransformKind::hflip: return "hflip";
    case TransformKind::jitter: return "jitter";
  }
  return "?";
}

Reconstructor Reconstructor::ae(std::shared_ptr<const PcaBasis> basis) {
  if (!basis) throw ConfigError("ae sanitizer needs a PCA basis");
  Reconstructor r;
  r.kind_ = SanitizerKind::ae;
  r.basis_ = std::move(basis);
  return r;
}

Reconstructor Reconstructor::vae(std::shared_ptr<const PcaBasis> basis, double latent_std) {
  if (!basis) throw ConfigError("vae sanitizer needs a PCA basis");
  if (!(latent_std >= 0.0)) throw ConfigError("reconstruct.vae_sigma: must be >= 0");
  Reconstructor r;
  r.kind_ = SanitizerKind::vae;
  r.basis_ = std::move(basis);
  r.latent_std_ = latent_std;
  return r;
}

Reconstructor Reconstructor::dm(std::shared_ptr<const MixtureModel> mixture, DmParams params) {
  if (!mixture) throw ConfigError("dm sanitizer needs a mixture model");
  // τ = 1 would start the flow at ᾱ = 0, where the Euler coefficient is singular
  if (!(params.noise_level > 0.0 && params.noise_level < 1.0))
    throw ConfigError("reconstruct.dm.noise_level: must lie in (0, 1)");
  if (params.steps < 1) throw ConfigError("reconstruct.dm.steps: must be >= 1");
  Reconstructor r;
  r.kind_ = SanitizerKind::dm;
  r.mixture_ = std::move(mixture);
  r.dm_ = params;
  return r;
}

Reconstructor Reconstructor::transform(TransformSpec spec, GridShape grid) {
  if (grid.height < 1 || grid.width < 1) throw ShapeError("transform: invalid grid");
  if (spec.kind == TransformKind::dct_quantize) {
    if (spec.levels < 2) throw ConfigError("transform.levels: must be >= 2");
    if (!(spec.keep_fraction >= 0.0 && spec.keep_fraction <= 1.0))
      throw ConfigError("transform.keep_fraction: must lie in [0, 1]");
  }
  if (spec.blur_sigma < 0.0) throw ConfigError("transform.blur_sigma: must be >= 0");
  if (spec.max_shift < 0) throw ConfigError("transform.max_shift: must be >= 0");
  if (spec.contrast_range < 0.0 || spec.brightness_range < 0.0)
    throw ConfigError("transform jitter ranges must be >= 0");
  Reconstructor r;
  r.kind_ = SanitizerKind::transform;
  r.transform_ = spec;
  r.grid_ = grid;
  return r;
}

bool Reconstructor::stochastic() const {
  switch (kind_) {
    case SanitizerKind::ae: return false;
    case SanitizerKind::vae: return latent_std_ > 0.0;
    case SanitizerKind::dm: return true;  // forward noise depends on the draw
    case SanitizerKind::transform: return transform_.stochastic();
  }
  return false;
}

std::string Reconstructor::name() const {
  return kind_ == SanitizerKind::transform ? to_string(transform_.kind) : to_string(kind_);
}

const PcaBasis& Reconstructor::basis() const {
  if (!basis_) throw Error("sanitizer '" + name() + "' has no PCA basis");
  return *basis_;
}

const MixtureModel& Reconstructor::mixture() const {
  if (!mixture_) throw Error("sanitizer '" + name() + "' has no mixture model");
  return *mixture_;
}

Vec Reconstructor::apply(const Vec& x, std::uint64_t draw_seed) const {
  switch (kind_) {
    case SanitizerKind::ae: return ae_reconstruct(*this, x);
    case SanitizerKind::vae: return vae_reconstruct(*this, x, draw_seed);
    case SanitizerKind::dm: return dm_purify(*this, *mixture_, x, draw_seed);
    case SanitizerKind::transform: return transform_apply(*this, x, draw_seed);
  }
  throw Error("unknown sanitizer");
}

Vec ae_reconstruct(const Reconstructor& r, const Vec& x) {
  if (r.kind() != SanitizerKind::ae) throw Error("ae_reconstruct: sanitizer is " + r.name());
  const auto& p = r.basis();
  const Vec z = p.basis.transpose() * (x - p.mean);
  return clip01(p.mean + p.basis * z);
}

Vec vae_reconstruct(const Reconstructor& r, const Vec& x, std::uint64_t draw_seed) {
  if (r.kind() != SanitizerKind::vae) throw Error("vae_reconstruct: sanitizer is " + r.name());
  const auto& p = r.basis();
  Vec z = p.basis.transpose() * (x - p.mean);
  Engine rng(draw_seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (Eigen::Index j = 0; j < z.size(); ++j) z[j] += r.latent_std() * normal(rng);
  return clip01(p.mean + p.basis * z);
}

namespace {

/// Runs the purifier and returns the pre-clip output; `states` receives the
/// state at the start of every Euler step when non-null.
Vec dm_trajectory(const DmParams& dm, const MixtureModel& m, const Vec& x, std::uint64_t draw_seed,
                  std::vector<Vec>* states) {
  const double tau = dm.noise_level;
  Engine rng(draw_seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Vec state(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) state[i] = std::sqrt(1.0 - tau) * x[i] + std::sqrt(tau) * normal(rng);

  const double step = tau / dm.steps;
  for (int j = 0; j < dm.steps; ++j) {
    const double alpha_bar = 1.0 - tau + j * step;
    if (states) states->push_back(state);
    const double c = step / (2.0 * alpha_bar);
    const Vec score = mixture_score(m, state, alpha_bar);
    if (dm.stochastic) {
      Vec noise(x.size());
      for (Eigen::Index i = 0; i < x.size(); ++i) noise[i] = normal(rng);
      state += c * (state + 2.0 * score) + std::sqrt(step / alpha_bar) * noise;
    } else {
      state += c * (state + score);
    }
    if (!state.allFinite())
      throw NumericFailure("dm_purify: non-finite state at step " + std::to_string(j));
  }
  return state;
}

}  // namespace

Vec dm_purify(const Reconstructor& r, const MixtureModel& m, const Vec& x, std::uint64_t draw_seed) {
  if (r.kind() != SanitizerKind::dm) throw Error("dm_purify: sanitizer is " + r.name());
  return clip01(dm_trajectory(r.dm_params(), m, x, draw_seed, nullptr));
}

Vec dm_purify_vjp(const Reconstructor& r, const MixtureModel& m, const Vec& x, std::uint64_t draw_seed,
                  const Vec& g) {
  if (r.kind() != SanitizerKind::dm) throw Error("dm_purify_vjp: sanitizer is " + r.name());
  const auto& dm = r.dm_params();
  std::vector<Vec> states;
  dm_trajectory(dm, m, x, draw_seed, &states);
  const double tau = dm.noise_level;
  const double step = tau / dm.steps;
  const double score_gain = dm.stochastic ? 2.0 : 1.0;
  Vec grad = g;
  for (int j = dm.steps - 1; j >= 0; --j) {
    const double alpha_bar = 1.0 - tau + j * step;
    const double c = step / (2.0 * alpha_bar);
    grad = (1.0 + c) * grad + c * score_gain * mixture_score_vjp(m, states[static_cast<std::size_t>(j)], alpha_bar, grad);
  }
  return std::sqrt(1.0 - tau) * grad;
}

Vec dct_quantize(const Vec& x, GridShape grid, int levels, double keep_fraction) {
  // Diagonal (u + v) order, lower row frequency first within a diagonal.
  static const std::array<int, 64> rank_of = [] {
    std::array<int, 64> order{};
    for (int i = 0; i < 64; ++i) order[static_cast<std::size_t>(i)] = i;
    std::stable_sort(order.begin(), order.end(), [](int a, int b) {
      const int da = a / 8 + a % 8;
      const int db = b / 8 + b % 8;
      return da != db ? da < db : a / 8 < b / 8;
    });
    std::array<int, 64> rank{};
    for (int i = 0; i < 64; ++i) rank[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = i;
    return rank;
  }();
  const int keep = static_cast<int>(std::lround(keep_fraction * 64.0));
  const double q = static_cast<double>(levels - 1);

  Vec coeff = block_dct8(x, grid);
  for (int r = 0; r < grid.height; ++r) {
    for (int c = 0; c < grid.width; ++c) {
      const int pos = (r % 8) * 8 + (c % 8);
      double& v = coeff[r * grid.width + c];
      v = rank_of[static_cast<std::size_t>(pos)] < keep ? std::round(v * q) / q : 0.0;
    }
  }
  return clip01(block_idct8(coeff, grid));
}

Vec transform_apply(const Reconstructor& r, const Vec& x, std::uint64_t draw_seed) {
  if (r.kind() != SanitizerKind::transform) throw Error("transform_apply: sanitizer is " + r.name());
  const auto& t = r.transform_spec();
  const GridShape grid = r.grid();
  require_grid(x, grid);
  Engine rng(draw_seed);
  switch (t.kind) {
    case TransformKind::dct_quantize: return dct_quantize(x, grid, t.levels, t.keep_fraction);
    case TransformKind::gaussian_blur: return clip01(gaussian_blur(x, grid, t.blur_sigma));
    case TransformKind::translate: {
      std::uniform_int_distribution<int> shift(-t.max_shift, t.max_shift);
      const int dx = shift(rng);
      const int dy = shift(rng);
      return translate(x, grid, dx, dy);
    }
    case TransformKind::hflip: return horizontal_flip(x, grid);
    case TransformKind::jitter: {
      std::uniform_real_distribution<double> contrast(1.0 - t.contrast_range, 1.0 + t.contrast_range);
      std::uniform_real_distribution<double> brightness(-t.brightness_range, t.brightness_range);
      const double a = contrast(rng);
      const double b = brightness(rng);
      return clip01((a * x.array() + b).matrix());
    }
  }
  throw Error("unknown transform");
}

}  // namespace illusion
