#include "doctest.h"

#include <filesystem>
#include <sstream>

#include "illusion/errors.hpp"
#include "illusion/harness.hpp"

using namespace illusion;
namespace fs = std::filesystem;

namespace {

ExperimentConfig small_config() {
  ExperimentConfig c = default_config();
  c.data.num_classes = 6;
  c.data.height = 8;
  c.data.width = 8;
  c.data.embed_dim = 16;
  c.data.train_per_class = 20;
  c.data.eval_per_class = 3;
  c.data.prototype_smoothing_std = 1.0;
  c.reconstruct.pca_rank = 8;
  c.reconstruct.eta_trials = 4;
  c.reconstruct.dm.steps = 10;
  c.encoder.mlp.epochs = 30;
  c.encoder.mlp.hidden = 32;
  c.attack.max_iters = 150;
  c.attack.loop_budget = 150;
  c.attack.eot_samples = 2;
  c.consensus_samples = 5;
  c.eta_check_samples = 5;
  c.sweep_values = {1, 3};
  return c;
}

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("illusion_unit_" + name);
  fs::remove_all(p);
  return p;
}

std::vector<std::vector<std::string>> parse_csv(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    rows.push_back(cells);
  }
  return rows;
}

}  // namespace

TEST_SUITE("harness") {
  TEST_CASE("a config holding only a seed is complete") {
    const auto c = config_from_json(Json::parse(R"({"seed": 11})"));
    CHECK(c.seed == 11);
    CHECK(c.data.master_seed == 11);
    CHECK(c.attack.seed == 11);
    CHECK(c.consensus_samples == 10);
    CHECK(c.data.num_classes == 20);
    CHECK_NOTHROW(c.validate());
  }

  TEST_CASE("config errors name the field") {
    try {
      config_from_json(Json::parse(R"({"consensus": {"num_samples": 0}})"));
      FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
      CHECK(std::string(e.what()).find("consensus.num_samples") != std::string::npos);
    }
    try {
      config_from_json(Json::parse(R"({"attack": {"epsilom": 0.1}})"));
      FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
      CHECK(std::string(e.what()).find("attack.epsilom") != std::string::npos);
    }
    CHECK_THROWS_AS(config_from_json(Json::parse(R"({"data": {"num_classes": "many"}})")), ConfigError);
    CHECK_THROWS_AS(config_from_json(Json::parse(R"({"experiment": "everything"})")), ConfigError);
    CHECK_THROWS_AS(config_from_json(Json::parse(R"({"reconstruct": {"dm": {"noise_level": 1.0}}})")), ConfigError);
    CHECK_THROWS_AS(config_from_json(Json::parse(R"({"consensus": {"eta_check_samples": 4}})")), ConfigError);
  }

  TEST_CASE("config round trip") {
    auto c = small_config();
    c.reconstruct.vae_sigma = 0.15;
    c.encoder.kind = EncoderKind::mlp;
    c.baselines = {TransformSpec{TransformKind::gaussian_blur}, TransformSpec{TransformKind::translate}};
    const auto back = config_from_json(to_json(c));
    CHECK(to_json(back) == to_json(c));
    CHECK(config_hash(back) == config_hash(c));

    auto other = c;
    other.threads = 8;
    other.out_dir = "elsewhere";
    CHECK(config_hash(other) == config_hash(c));
    other.attack.epsilon = 0.05;
    CHECK(config_hash(other) != config_hash(c));
  }

  TEST_CASE("target labels are wrong classes and stable") {
    for (int s = 0; s < 200; ++s) {
      const int y = s % 7;
      const int t = draw_target_label(7, s, y, 7);
      CHECK(t != y);
      CHECK(t >= 0);
      CHECK(t < 7);
      CHECK(draw_target_label(7, s, y, 7) == t);
    }
  }

  TEST_CASE("histogram bins") {
    const auto h = histogram({0.0, 0.1, 0.25, 1.0, 2.0, -3.0}, 0.0, 1.0, 0.25);
    REQUIRE(h.size() == 4);
    CHECK(h[0].count == 3);  // 0, 0.1 and the clamped −3
    CHECK(h[1].count == 1);
    CHECK(h[3].count == 2);  // the closed end and the clamped 2
    CHECK(h[3].hi == 1.0);
  }

  TEST_CASE("empty report is rejected") {
    Report r;
    CHECK_THROWS_AS(emit_report(r, scratch("empty")), Error);
  }

  TEST_CASE("pipeline tables have the documented shape") {
    const auto cfg = small_config();
    const auto p = build_pipeline(cfg);
    CHECK(p.attacks.size() == p.data.eval.size());
    REQUIRE(p.calibration.has_value());
    CHECK(p.vae_sigma == p.calibration->chosen);

    const auto g = run_grid(p);
    CHECK(g.rows.size() == 6 * 4 * 2);
    for (std::size_t i = 1; i < g.rows.size(); ++i) {
      const auto& a = g.rows[i - 1];
      const auto& b = g.rows[i];
      CHECK(std::tie(a.method, a.input_kind) <= std::tie(b.method, b.input_kind));
    }
    for (const auto& r : g.rows) CHECK(r.summary.n == static_cast<int>(p.data.eval.size()));

    // recompute one cell from scratch
    int hits = 0;
    for (const auto& s : p.data.eval) hits += classify(p.encoder, p.data.labels, s.pixels).argmax() == s.label;
    CHECK(g.at("none", "org_img", LabelKind::original).summary.top1 ==
          doctest::Approx(static_cast<double>(hits) / p.data.eval.size()));
    CHECK_THROWS(g.at("nonsense", "org_img", LabelKind::original));

    const auto sw = run_sweep(p);
    CHECK(sw.rows.size() == 2 * 2 * 2);
    // one draw of a sampling method is the single-draw consensus cell
    CHECK(sw.at("vae", "prt_img", 3).target.n == static_cast<int>(p.data.eval.size()));

    const auto b = run_baselines(p);
    CHECK(b.rows.size() == (2 + default_baselines().size()) * 4 * 2);

    const auto eta = run_eta_check(p);
    CHECK(eta.num_samples == cfg.eta_check_samples);
    CHECK(eta.pooled_se() >= 0.0);
  }

  TEST_CASE("csv output does not depend on the thread count") {
    auto cfg = small_config();
    cfg.experiment = Experiment::grid;
    const auto one = scratch("t1");
    const auto four = scratch("t4");
    cfg.threads = 1;
    cfg.out_dir = one.string();
    run_experiment(cfg);
    cfg.threads = 4;
    cfg.out_dir = four.string();
    run_experiment(cfg);
    for (const char* f : {"grid.csv", "calibration.csv", "summary.json"}) {
      INFO(f);
      CHECK(read_text_file(one / f) == read_text_file(four / f));
    }

    const auto rows = parse_csv(read_text_file(one / "grid.csv"));
    REQUIRE(rows.size() == 1 + 6 * 4 * 2);
    CHECK(rows[0][0] == "method");
    CHECK(rows[0].back() == "config_hash");
    for (std::size_t i = 1; i < rows.size(); ++i) {
      CHECK(rows[i].size() == rows[0].size());
      CHECK(rows[i].back() == config_hash(cfg));
    }

    // summary.json carries the same numbers as the csv
    const auto summary = Json::parse(read_text_file(one / "summary.json"));
    const auto& grid = summary.at("grid");
    REQUIRE(grid.size() == rows.size() - 1);
    for (std::size_t i = 0; i < grid.size(); ++i) {
      CHECK(grid[i].at("method").get<std::string>() == rows[i + 1][0]);
      CHECK(grid[i].at("top1").get<double>() == doctest::Approx(std::stod(rows[i + 1][3])).epsilon(1e-6));
    }
  }
}
