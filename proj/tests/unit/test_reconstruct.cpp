#include "doctest.h"

#include "helpers.hpp"
#include "illusion/errors.hpp"
#include "illusion/reconstruct.hpp"
#include "illusion/rng.hpp"

using namespace illusion;

namespace {

std::shared_ptr<const PcaBasis> desk_pca() {
  static const auto p = std::make_shared<const PcaBasis>(fit_pca(testing::desk_dataset().train_matrix(), 24));
  return p;
}

bool interior(const Vec& v) { return v.minCoeff() > 0.0 && v.maxCoeff() < 1.0; }

}  // namespace

TEST_SUITE("reconstruct") {
  TEST_CASE("pca recovers a line through the origin") {
    Mat pts(6, 2);
    for (int i = 0; i < 6; ++i) pts.row(i) << (i - 2.5), 2.0 * (i - 2.5);
    const auto p = fit_pca(pts, 1);
    CHECK(p.basis(0, 0) == doctest::Approx(1.0 / std::sqrt(5.0)));
    CHECK(p.basis(1, 0) == doctest::Approx(2.0 / std::sqrt(5.0)));
    CHECK(p.explained_fraction == doctest::Approx(1.0));
  }

  TEST_CASE("full-rank pca is a complete basis") {
    std::mt19937_64 rng(1);
    const Mat data = testing::random_mat(rng, 30, 6);
    const auto p = fit_pca(data, 6);
    CHECK((p.basis * p.basis.transpose() - Mat::Identity(6, 6)).norm() < 1e-8);
    const auto ae = Reconstructor::ae(std::make_shared<const PcaBasis>(p));
    const Vec x = testing::random_vec(rng, 6, 0.2, 0.8);
    CHECK((ae.apply(x, 0) - x).cwiseAbs().maxCoeff() < 1e-12);
  }

  TEST_CASE("desk basis is orthonormal and captures most variance") {
    const auto& p = *desk_pca();
    CHECK((p.basis.transpose() * p.basis - Mat::Identity(24, 24)).norm() <= 1e-8);
    CHECK(p.explained_fraction > 0.9);
    for (int j = 0; j < 24; ++j) {
      int first = 0;
      while (std::abs(p.basis(first, j)) <= 1e-12) ++first;
      CHECK(p.basis(first, j) > 0.0);
    }
    CHECK_THROWS_AS(fit_pca(testing::desk_dataset().train_matrix(), 0), Error);
  }

  TEST_CASE("ae fixes the mean and kills orthogonal components") {
    const auto pca = desk_pca();
    const auto ae = Reconstructor::ae(pca);
    CHECK((ae.apply(pca->mean, 0) - pca->mean).cwiseAbs().maxCoeff() < 1e-12);

    std::mt19937_64 rng(2);
    Vec w = testing::random_vec(rng, 256);
    w -= pca->basis * (pca->basis.transpose() * w);
    w *= 0.05 / w.cwiseAbs().maxCoeff();
    CHECK((ae.apply(pca->mean + w, 0) - pca->mean).cwiseAbs().maxCoeff() < 1e-12);

    const auto& clean = testing::desk_dataset().eval[0].pixels;
    const Vec a = ae.apply(clean, 0);
    REQUIRE(interior(a));
    REQUIRE(interior(clean + w));
    CHECK((ae.apply(clean + w, 0) - a).norm() <= 1e-8);
  }

  TEST_CASE("ae is idempotent away from the clip") {
    const auto ae = Reconstructor::ae(desk_pca());
    int checked = 0;
    for (const auto& s : testing::desk_dataset().eval) {
      const Vec once = ae.apply(s.pixels, 0);
      if (!interior(once)) continue;
      ++checked;
      CHECK((ae.apply(once, 0) - once).cwiseAbs().maxCoeff() <= 1e-8);
    }
    CHECK(checked > 50);
  }

  TEST_CASE("vae at zero sigma is bit-identical to ae") {
    const auto ae = Reconstructor::ae(desk_pca());
    const auto vae = Reconstructor::vae(desk_pca(), 0.0);
    CHECK_FALSE(vae.stochastic());
    std::mt19937_64 rng(3);
    for (int i = 0; i < 50; ++i) {
      const Vec x = testing::random_vec(rng, 256, 0.0, 1.0);
      CHECK(vae.apply(x, static_cast<std::uint64_t>(i)) == ae.apply(x, 0));
    }
  }

  TEST_CASE("vae draws are reproducible and centred on the ae output") {
    const auto pca = desk_pca();
    const auto vae = Reconstructor::vae(pca, 0.1);
    const Vec& x = testing::desk_dataset().eval[3].pixels;
    CHECK(vae.apply(x, 42) == vae.apply(x, 42));
    CHECK(vae.apply(x, 42) != vae.apply(x, 43));

    const Vec z0 = pca->basis.transpose() * (x - pca->mean);
    Vec zbar = Vec::Zero(24);
    for (int i = 0; i < 1000; ++i) zbar += pca->basis.transpose() * (vae.apply(x, static_cast<std::uint64_t>(i)) - pca->mean);
    zbar /= 1000.0;
    CHECK((zbar - z0).cwiseAbs().maxCoeff() < 4.0 * 0.1 / std::sqrt(1000.0));
  }

  TEST_CASE("dm at tiny tau moves x only by the forward noise") {
    const auto& d = testing::desk_dataset();
    const auto dm = Reconstructor::dm(std::make_shared<const MixtureModel>(d.mixture), DmParams{1e-6, 30, false});
    for (int i = 0; i < 10; ++i) {
      const Vec& x = d.eval[static_cast<std::size_t>(i)].pixels;
      CHECK((dm.apply(x, static_cast<std::uint64_t>(i)) - x).cwiseAbs().maxCoeff() < 6.0 * std::sqrt(1e-6));
    }
  }

  TEST_CASE("dm mostly pulls a prototype back to itself") {
    // the forward noise occasionally lands nearer another class, so count
    const auto& d = testing::desk_dataset();
    const auto dm = Reconstructor::dm(std::make_shared<const MixtureModel>(d.mixture), DmParams{});
    int kept = 0;
    for (int y = 0; y < 20; ++y) {
      const Vec out = dm.apply(d.prototypes[static_cast<std::size_t>(y)].mean_image, static_cast<std::uint64_t>(y));
      int nearest = 0;
      double best = 1e300;
      for (int z = 0; z < 20; ++z) {
        const double dist = (out - d.prototypes[static_cast<std::size_t>(z)].mean_image).norm();
        if (dist < best) {
          best = dist;
          nearest = z;
        }
      }
      kept += nearest == y;
    }
    CHECK(kept >= 18);
  }

  TEST_CASE("single-gaussian flow follows the closed form") {
    // The exact flow keeps (x − √ᾱ·μ)/√v constant, v = ᾱs² + 1 − ᾱ.
    const int n = 4;
    const double s = 0.1, tau = 0.9;
    Vec mu(n);
    mu << 0.3, 0.5, 0.6, 0.4;
    const auto m = std::make_shared<const MixtureModel>(MixtureModel{mu, s});
    const auto dm = Reconstructor::dm(m, DmParams{tau, 4000, false});
    const Vec x = Vec::Constant(n, 0.5);
    const std::uint64_t seed = 9;
    Engine rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    Vec xt(n);
    for (int i = 0; i < n; ++i) xt[i] = std::sqrt(1.0 - tau) * x[i] + std::sqrt(tau) * normal(rng);
    const double v0 = (1.0 - tau) * s * s + tau;
    const Vec expect = clip01(mu + s * (xt - std::sqrt(1.0 - tau) * mu) / std::sqrt(v0));
    CHECK((dm.apply(x, seed) - expect).cwiseAbs().maxCoeff() < 2e-3);
  }

  TEST_CASE("dm vjp matches finite differences") {
    const auto& d = testing::small_dataset();
    const auto m = std::make_shared<const MixtureModel>(MixtureModel{(d.mixture.means.array() * 0.3 + 0.35).matrix(), 0.05});
    for (bool stochastic : {false, true}) {
      const auto dm = Reconstructor::dm(m, DmParams{0.3, 6, stochastic});
      std::mt19937_64 rng(4);
      const Vec x = testing::random_vec(rng, 64, 0.3, 0.7);
      const Vec g = testing::random_vec(rng, 64);
      REQUIRE(interior(dm.apply(x, 5)));
      const Vec num = testing::numeric_gradient([&](const Vec& v) { return g.dot(dm.apply(v, 5)); }, x, 1e-6);
      CHECK(testing::rel_error(dm_purify_vjp(dm, *m, x, 5, g), num) < 1e-5);
    }
  }

  TEST_CASE("transforms") {
    const GridShape grid{16, 16};
    std::mt19937_64 rng(5);
    const Vec x = testing::random_vec(rng, 256, 0.0, 1.0);

    TransformSpec flip;
    flip.kind = TransformKind::hflip;
    const auto f = Reconstructor::transform(flip, grid);
    CHECK(f.apply(f.apply(x, 0), 0) == x);

    TransformSpec blur;
    blur.kind = TransformKind::gaussian_blur;
    blur.blur_sigma = 0.0;
    CHECK(Reconstructor::transform(blur, grid).apply(x, 0) == x);

    TransformSpec shift;
    shift.kind = TransformKind::translate;
    shift.max_shift = 0;
    CHECK(Reconstructor::transform(shift, grid).apply(x, 3) == x);
    shift.max_shift = 2;
    const auto t = Reconstructor::transform(shift, grid);
    CHECK(t.stochastic());
    CHECK(t.apply(x, 11) == t.apply(x, 11));

    TransformSpec jitter;
    jitter.kind = TransformKind::jitter;
    jitter.contrast_range = 0.0;
    jitter.brightness_range = 0.0;
    CHECK(Reconstructor::transform(jitter, grid).apply(x, 1) == x);
  }

  TEST_CASE("fine dct quantisation round-trips a smooth image") {
    const GridShape grid{16, 16};
    Vec smooth(256);
    for (int r = 0; r < 16; ++r)
      for (int c = 0; c < 16; ++c) smooth[r * 16 + c] = 0.5 + 0.3 * std::sin(0.2 * r) * std::cos(0.15 * c);
    CHECK((dct_quantize(smooth, grid, 256, 1.0) - smooth).cwiseAbs().maxCoeff() < 1.0 / 128.0);
    TransformSpec dct;
    dct.kind = TransformKind::dct_quantize;
    CHECK_THROWS_AS(Reconstructor::transform(dct, GridShape{6, 6}).apply(Vec::Zero(36), 0), ShapeError);
  }

  TEST_CASE("every sanitizer maps the unit cube into itself") {
    const auto& d = testing::desk_dataset();
    std::vector<Reconstructor> all{Reconstructor::ae(desk_pca()), Reconstructor::vae(desk_pca(), 0.3),
                                   Reconstructor::dm(std::make_shared<const MixtureModel>(d.mixture), DmParams{})};
    for (const auto& spec : {TransformKind::dct_quantize, TransformKind::gaussian_blur, TransformKind::translate,
                             TransformKind::hflip, TransformKind::jitter}) {
      TransformSpec t;
      t.kind = spec;
      all.push_back(Reconstructor::transform(t, d.config.grid()));
    }
    std::mt19937_64 rng(6);
    for (const auto& r : all) {
      for (int i = 0; i < 5; ++i) {
        const Vec out = r.apply(testing::random_vec(rng, 256, 0.0, 1.0), static_cast<std::uint64_t>(i));
        CHECK(out.minCoeff() >= 0.0);
        CHECK(out.maxCoeff() <= 1.0);
      }
    }
  }

  TEST_CASE("factories validate parameters") {
    CHECK_THROWS_AS(Reconstructor::vae(desk_pca(), -0.1), ConfigError);
    CHECK_THROWS_AS(Reconstructor::ae(nullptr), ConfigError);
    const auto m = std::make_shared<const MixtureModel>(testing::small_dataset().mixture);
    CHECK_THROWS_AS(Reconstructor::dm(m, DmParams{0.0, 30, false}), ConfigError);
    CHECK_THROWS_AS(Reconstructor::dm(m, DmParams{0.3, 0, false}), ConfigError);
    TransformSpec t;
    t.kind = TransformKind::dct_quantize;
    t.levels = 1;
    CHECK_THROWS_AS(Reconstructor::transform(t, GridShape{8, 8}), ConfigError);
  }
}
