// Command-line driver for the illusion testbed.

#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"

#include "illusion/errors.hpp"
#include "illusion/harness.hpp"

using namespace illusion;

namespace {

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out_dir;
  std::optional<int> threads;
};

ExperimentConfig resolve(const Options& o) {
  Json j = o.config.empty() ? to_json(default_config()) : to_json(load_config(o.config));
  if (o.seed) {
    j["seed"] = *o.seed;
    j["data"]["master_seed"] = *o.seed;
  }
  if (o.threads) j["threads"] = *o.threads;
  ExperimentConfig cfg = config_from_json(j);
  if (o.out_dir) cfg.out_dir = *o.out_dir;
  else if (const char* env = std::getenv("ILLUSION_OUT_DIR"); env && *env) cfg.out_dir = env;
  return cfg;
}

void print_paths(const std::filesystem::path& dir) {
  std::cout << "wrote " << dir.string() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adversarial illusion testbed: attacks, generative sanitizers and consensus voting"};
  app.require_subcommand(1);
  Options opt;
  app.add_option("--config", opt.config, "JSON experiment config")->check(CLI::ExistingFile);
  app.add_option("--seed", opt.seed, "master seed (overrides the config)");
  app.add_option("--out-dir", opt.out_dir, "output directory (overrides config and ILLUSION_OUT_DIR)");
  app.add_option("--threads", opt.threads, "worker threads")->check(CLI::PositiveNumber);

  auto* gen = app.add_subcommand("gen-data", "generate and save the synthetic dataset");
  auto* fit = app.add_subcommand("fit", "fit encoder, decoder and sanitizers, calibrate sigma");
  struct Sub {
    CLI::App* app;
    Experiment experiment;
  };
  const Sub subs[] = {
      {app.add_subcommand("grid", "mitigation grid over all generative methods"), Experiment::grid},
      {app.add_subcommand("baselines", "pixel-transform baseline comparison"), Experiment::baselines},
      {app.add_subcommand("sweep", "consensus size sweep"), Experiment::sweep},
      {app.add_subcommand("attack-cost", "attack loop counts with and without the sanitizer"), Experiment::attack_cost},
      {app.add_subcommand("transfer", "cross-encoder transfer of attacks"), Experiment::transfer},
      {app.add_subcommand("report", "every experiment plus the combined summary"), Experiment::report},
  };
  for (const auto& s : subs) s.app->fallthrough();
  gen->fallthrough();
  fit->fallthrough();

  CLI11_PARSE(app, argc, argv);

  try {
    ExperimentConfig cfg = resolve(opt);
    const std::filesystem::path out = cfg.out_dir;

    if (gen->parsed()) {
      const Dataset data = generate_dataset(cfg.data);
      save_dataset(data, out / "dataset");
      std::cout << "dataset " << dataset_content_hash(data) << "\n";
      print_paths(out / "dataset");
      return 0;
    }
    if (fit->parsed()) {
      const Pipeline p = build_pipeline(cfg);
      Json j;
      j["config_hash"] = p.hash;
      j["encoder"] = to_string(p.encoder.kind);
      j["encoder_train_cos"] = p.encoder_train_cos;
      j["decoder_fit_residual"] = p.decoder.fit_residual;
      j["pca_explained_fraction"] = p.pca->explained_fraction;
      j["vae_sigma"] = p.vae_sigma;
      std::filesystem::create_directories(out);
      write_text_file(out / "fit.json", j.dump(2) + "\n");
      if (p.calibration) write_text_file(out / "calibration.csv", calibration_csv(*p.calibration));
      std::cout << j.dump(2) << "\n";
      print_paths(out);
      return 0;
    }
    for (const auto& s : subs) {
      if (!s.app->parsed()) continue;
      cfg.experiment = s.experiment;
      const Report r = run_experiment(cfg);
      double total = 0.0;
      for (const auto& [k, v] : r.timing_seconds) total += v;
      std::cout << to_string(s.experiment) << " done in " << total << " s\n";
      print_paths(out);
      return 0;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
