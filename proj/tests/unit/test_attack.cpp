#include "doctest.h"

#include "helpers.hpp"
#include "illusion/attack.hpp"
#include "illusion/errors.hpp"
#include "illusion/rng.hpp"

using namespace illusion;

namespace {

EncoderModel linear_model(const Mat& w) {
  EncoderModel m;
  m.weights = w;
  return m;
}

struct Desk {
  EncoderModel enc;
  std::shared_ptr<const PcaBasis> pca;
};

const Desk& desk() {
  static const Desk d = [] {
    const auto& data = testing::small_dataset();
    const Mat p = data.prototype_matrix();
    Desk out;
    out.enc = fit_encoder_linear(p, data.labels, default_ridge(p), random_encoder_prior(16, 64, 2.0, 7));
    out.pca = std::make_shared<const PcaBasis>(fit_pca(data.train_matrix(), 8));
    return out;
  }();
  return d;
}

}  // namespace

TEST_SUITE("attack") {
  TEST_CASE("one hand-evaluated step") {
    const auto enc = linear_model(Mat::Identity(2, 2));
    const LabelBank bank{Mat::Identity(2, 2)};
    Vec x(2);
    x << 0, 1;
    AttackConfig cfg;
    cfg.epsilon = 0.3;
    cfg.step = 0.3;
    cfg.max_iters = 1;
    const auto r = pgd_illusion(x, 0, enc, bank, cfg);
    CHECK(r.perturbed[0] == doctest::Approx(0.3));
    CHECK(r.perturbed[1] == doctest::Approx(1.0));
    CHECK(r.best_cos == doctest::Approx(0.3 / std::sqrt(1.09)));
    CHECK(r.best_cos == doctest::Approx(0.2873).epsilon(1e-4));
    CHECK(r.loops_used == 1);
    CHECK_FALSE(r.success);
  }

  TEST_CASE("empty budget leaves the input alone") {
    const auto& d = testing::small_dataset();
    AttackConfig cfg;
    cfg.epsilon = 0.0;
    cfg.max_iters = 20;
    const auto& x = d.eval[0].pixels;
    const auto r = pgd_illusion(x, 1, desk().enc, d.labels, cfg);
    CHECK(r.delta.cwiseAbs().maxCoeff() == 0.0);
    CHECK(r.best_cos == doctest::Approx(classify(desk().enc, d.labels, x)[1]));
    CHECK(r.success == (r.best_cos >= cfg.cos_threshold));
  }

  TEST_CASE("iterates stay feasible and the best cosine is tracked") {
    const auto& d = testing::small_dataset();
    AttackConfig cfg;
    cfg.epsilon = 0.05;
    cfg.step = 0.01;
    cfg.max_iters = 40;
    cfg.cos_threshold = 1.0;
    for (int i = 0; i < 4; ++i) {
      const auto& s = d.eval[static_cast<std::size_t>(i)];
      const int target = (s.label + 1) % 6;
      const auto r = pgd_illusion(s.pixels, target, desk().enc, d.labels, cfg);
      CHECK(r.delta.cwiseAbs().maxCoeff() <= cfg.epsilon + 1e-15);
      CHECK(r.perturbed.minCoeff() >= 0.0);
      CHECK(r.perturbed.maxCoeff() <= 1.0);
      CHECK(r.best_cos == *std::max_element(r.cos_trajectory.begin(), r.cos_trajectory.end()));
      CHECK(r.cos_trajectory.size() == 41);
      CHECK(classify(desk().enc, d.labels, r.perturbed)[target] == doctest::Approx(r.best_cos));
      const auto again = pgd_illusion(s.pixels, target, desk().enc, d.labels, cfg);
      CHECK(again.delta == r.delta);
      CHECK(again.cos_trajectory == r.cos_trajectory);
    }
  }

  TEST_CASE("vacuous and unreachable thresholds") {
    const auto& d = testing::small_dataset();
    std::vector<ImageSample> samples(d.eval.begin(), d.eval.begin() + 4);
    std::vector<int> targets;
    for (const auto& s : samples) targets.push_back((s.label + 2) % 6);
    AttackConfig cfg;
    cfg.cos_threshold = -1.0;
    for (const auto& r : measure_attack_cost(samples, targets, desk().enc, d.labels, nullptr, cfg)) {
      CHECK(r.success);
      CHECK(r.loops_used == 1);
    }
    cfg.cos_threshold = 1.0;
    cfg.loop_budget = 25;
    for (const auto& r : measure_attack_cost(samples, targets, desk().enc, d.labels, nullptr, cfg, 2)) {
      CHECK_FALSE(r.success);
      CHECK(r.loops_used == 25);
    }
    cfg.loop_budget = 1;
    for (const auto& r : measure_attack_cost(samples, targets, desk().enc, d.labels, nullptr, cfg)) CHECK(r.loops_used == 1);
  }

  TEST_CASE("attack records csv") {
    std::vector<AttackCostRecord> recs{{3, 1, 12, 0.81234567, true, false}, {4, 0, 3000, -0.25, false, true}};
    CHECK(attack_records_csv(recs) ==
          "sample_id,target_label,loops_used,final_cos,success,defended_flag\n"
          "3,1,12,0.812346,1,0\n"
          "4,0,3000,-0.25,0,1\n");
  }

  TEST_CASE("an annihilated gradient makes no progress") {
    Mat data(40, 4);
    std::mt19937_64 rng(1);
    for (int i = 0; i < 40; ++i) data.row(i) << testing::random_vec(rng, 2, 0.2, 0.8).transpose(), 0.0, 0.0;
    const auto pca = std::make_shared<const PcaBasis>(fit_pca(data, 2));
    const auto enc = linear_model(Mat::Identity(4, 4));
    const LabelBank bank{Mat::Identity(4, 4)};
    Vec x(4);
    x << 0.5, 0.5, 0.0, 0.0;
    AttackConfig cfg;
    cfg.max_iters = 200;
    const auto r = adaptive_pgd(x, 3, enc, bank, Reconstructor::ae(pca), cfg);
    CHECK(r.stagnated);
    CHECK(r.loops_used == 50);
    CHECK(r.delta.cwiseAbs().maxCoeff() == 0.0);
    CHECK(r.best_cos == doctest::Approx(0.0));
  }

  TEST_CASE("zero-sigma vae with one draw retraces the ae attack") {
    const auto& d = testing::small_dataset();
    AttackConfig cfg;
    cfg.max_iters = 60;
    cfg.eot_samples = 1;
    const auto& s = d.eval[2];
    const auto a = adaptive_pgd(s.pixels, (s.label + 1) % 6, desk().enc, d.labels, Reconstructor::ae(desk().pca), cfg);
    const auto v = adaptive_pgd(s.pixels, (s.label + 1) % 6, desk().enc, d.labels,
                                Reconstructor::vae(desk().pca, 0.0), cfg);
    CHECK(a.cos_trajectory == v.cos_trajectory);
    CHECK(a.delta == v.delta);
  }

  TEST_CASE("adaptive attack rejects pixel transforms") {
    const auto& d = testing::small_dataset();
    TransformSpec t;
    const auto r = Reconstructor::transform(t, d.config.grid());
    CHECK_THROWS_AS(adaptive_pgd(d.eval[0].pixels, 1, desk().enc, d.labels, r, AttackConfig{}), Error);
  }

  TEST_CASE("adaptive attack through dm runs in both gradient modes") {
    const auto& d = testing::small_dataset();
    const auto dm = Reconstructor::dm(std::make_shared<const MixtureModel>(d.mixture), DmParams{0.3, 5, false});
    for (auto mode : {DmGradientMode::straight_through, DmGradientMode::exact_jacobian}) {
      AttackConfig cfg;
      cfg.max_iters = 5;
      cfg.eot_samples = 2;
      cfg.dm_gradient_mode = mode;
      const auto r = adaptive_pgd(d.eval[1].pixels, 0, desk().enc, d.labels, dm, cfg, 1);
      CHECK(r.cos_trajectory.size() == 6);
      CHECK(r.delta.cwiseAbs().maxCoeff() <= cfg.epsilon + 1e-15);
    }
  }

  TEST_CASE("eot gradient agrees with the expected gradient") {
    const auto& d = testing::small_dataset();
    const auto vae = Reconstructor::vae(desk().pca, 0.15);
    const auto& x = d.eval[4].pixels;
    const Vec e = d.labels.embedding(0);
    const Mat& u = desk().pca->basis;
    auto eot = [&](int draws, std::uint64_t offset) {
      Vec g = Vec::Zero(x.size());
      for (int i = 0; i < draws; ++i) {
        const Vec xr = vae.apply(x, derive_seed(7, Stream::eot, offset, static_cast<std::uint64_t>(i)));
        g += grad_cosine_wrt_input(desk().enc, xr, e);
      }
      return Vec(u * (u.transpose() * g) / draws);
    };
    const Vec small = eot(1000, 1);
    const Vec reference = eot(20000, 2);
    CHECK(small.dot(reference) / (small.norm() * reference.norm()) >= 0.95);
  }

  TEST_CASE("config validation") {
    AttackConfig cfg;
    cfg.step = 0.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = AttackConfig{};
    cfg.eot_samples = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
  }
}
