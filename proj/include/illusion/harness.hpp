#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "illusion/attack.hpp"
#include "illusion/consensus.hpp"
#include "illusion/encoder.hpp"
#include "illusion/json_io.hpp"
#include "illusion/reconstruct.hpp"
#include "illusion/synthdata.hpp"

namespace illusion {

enum class Experiment { grid, baselines, sweep, attack_cost, transfer, report };

const char* to_string(Experiment e);
Experiment experiment_from_string(const std::string& s);

struct EncoderSettings {
  EncoderKind kind = EncoderKind::linear;
  double prior_scale = 2.0;     // 0 gives the plain ridge fit
  std::optional<double> ridge;  // default_ridge() when absent
  MlpParams mlp;
};

struct ReconstructSettings {
  int pca_rank = 24;
  std::optional<double> vae_sigma;  // fixed σ; calibrated when absent
  std::vector<double> sigma_candidates{0.05, 0.1, 0.15, 0.2, 0.3};
  double clean_tolerance = 0.02;
  int eta_trials = 20;
  DmParams dm;
};

struct ExperimentConfig {
  std::uint64_t seed = 7;
  Experiment experiment = Experiment::grid;
  std::string out_dir = "out";
  int threads = 1;
  DataConfig data;
  EncoderSettings encoder;
  ReconstructSettings reconstruct;
  std::vector<TransformSpec> baselines;
  AttackConfig attack;
  int consensus_samples = 10;
  int eta_check_samples = 9;  // odd, so the majority event has no ties
  std::vector<int> sweep_values{1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16, 17, 18, 19, 20};
  bool dump_votes = false;

  /// Throws ConfigError naming the offending field.
  void validate() const;
};

ExperimentConfig default_config();
std::vector<TransformSpec> default_baselines();

/// Strict parse: unknown keys and type mismatches raise ConfigError with the
/// dotted key path. Missing keys keep their defaults.
ExperimentConfig config_from_json(const Json& j);
Json to_json(const ExperimentConfig& cfg);

/// Reads a config file; ILLUSION_OUT_DIR, when set, replaces out_dir.
ExperimentConfig load_config(const std::filesystem::path& path);

/// FNV-1a over the canonical JSON, excluding out_dir, threads and experiment.
std::string config_hash(const ExperimentConfig& cfg);

/// Uniform over the wrong classes, fixed per sample_id.
int draw_target_label(std::uint64_t seed, int sample_id, int label, int num_classes);

struct PlainAttack {
  AttackResult result;
  int target = 0;
};

/// Everything fitted once and shared by the experiments.
struct Pipeline {
  ExperimentConfig cfg;
  std::string hash;
  Dataset data;
  EncoderModel encoder;
  DownstreamDecoder decoder;
  std::shared_ptr<const PcaBasis> pca;
  std::shared_ptr<const MixtureModel> mixture;
  std::vector<PlainAttack> attacks;  // one per eval sample
  std::optional<SigmaCalibration> calibration;
  double vae_sigma = 0.0;
  double encoder_train_cos = 0.0;  // mean cos(f(x_i), e_{y_i}) over the train set

  std::vector<AttackedSample> attacked_eval() const;
  Reconstructor vae() const { return Reconstructor::vae(pca, vae_sigma); }
  Reconstructor dm() const { return Reconstructor::dm(mixture, cfg.reconstruct.dm); }
};

Pipeline build_pipeline(const ExperimentConfig& cfg);

EncoderModel fit_encoder(const Dataset& data, const EncoderSettings& settings, EncoderKind kind,
                         std::uint64_t seed);

struct GridRow {
  std::string method;
  std::string input_kind;  // org_img | org_rec | prt_img | prt_rec
  LabelKind label_kind = LabelKind::original;
  MetricSummary summary;
};

struct VoteRecord {
  int sample_id = 0;
  std::string method;
  std::string input_kind;
  int draw_index = 0;
  int vote = 0;
  double top_score = 0.0;
};

struct ReportGrid {
  std::string name;  // grid | baselines
  std::vector<GridRow> rows;  // lexicographic by (method, input_kind, label_kind)
  std::vector<VoteRecord> votes;

  const GridRow& at(const std::string& method, const std::string& input_kind, LabelKind label) const;
};

/// Methods: none, ae, dm, vae, dm+sampling, vae+sampling.
ReportGrid run_grid(const Pipeline& p);

/// none, vae+sampling and every configured pixel-transform baseline.
ReportGrid run_baselines(const Pipeline& p);

struct SweepRow {
  std::string sanitizer;   // vae | dm
  std::string input_kind;  // org_img | prt_img
  int num_samples = 0;
  MetricSummary original;
  MetricSummary target;
};

struct SweepTable {
  std::vector<SweepRow> rows;

  const SweepRow& at(const std::string& sanitizer, const std::string& input_kind, int n) const;
};

SweepTable run_sweep(const Pipeline& p);

struct HistogramBin {
  double lo = 0.0;
  double hi = 0.0;
  int count = 0;
};

/// Equal-width bins over [lo, hi]; the last bin is closed. Values outside
/// the range land in the nearest end bin.
std::vector<HistogramBin> histogram(const std::vector<double>& values, double lo, double hi, double width);

struct AttackCostTable {
  std::vector<AttackCostRecord> undefended;
  std::vector<AttackCostRecord> defended;
  /// cos(f(x̃), e_t) at the first loop whose decoded embedding classifies as
  /// the target; absent when that never happened.
  std::vector<std::optional<double>> success_cos;
  int loop_budget = 0;

  double success_rate(bool defended_arm) const;
  double median_loops(bool defended_arm) const;
  double median_final_cos(bool defended_arm) const;
  double median_success_cos() const;
};

AttackCostTable run_attack_cost(const Pipeline& p);

struct TransferRow {
  std::string source;
  std::string evaluator;
  bool defended = false;
  double target_top1 = 0.0;
  double original_top1 = 0.0;
  double source_target_top1 = 0.0;  // same-encoder attack success, for reference
  int n = 0;
};

struct TransferTable {
  std::vector<TransferRow> rows;
};

TransferTable run_transfer(const Pipeline& p);

/// Attack success rate of N-draw consensus against the prediction from η̂.
struct EtaCheck {
  int num_samples = 0;
  EtaEstimate eta;
  double predicted = 0.0;
  double predicted_se = 0.0;  // delta method through η̂
  double observed = 0.0;
  double observed_se = 0.0;
  int n = 0;

  double pooled_se() const;
  bool consistent(double z = 3.0) const;
};

EtaCheck run_eta_check(const Pipeline& p);

struct Report {
  std::string config_hash;
  std::uint64_t seed = 0;
  Json config;
  Json fit;
  std::optional<ReportGrid> grid;
  std::optional<ReportGrid> baselines;
  std::optional<SweepTable> sweep;
  std::optional<AttackCostTable> attack_cost;
  std::optional<TransferTable> transfer;
  std::optional<SigmaCalibration> calibration;
  std::optional<EtaCheck> eta_check;
  std::map<std::string, double> timing_seconds;
};

/// Column schema: method,input_kind,label_kind,top1,top5,cs_mean,cs_std,n,seed,config_hash
std::string grid_csv(const ReportGrid& grid, std::uint64_t seed, const std::string& hash);
std::string sweep_csv(const SweepTable& t, std::uint64_t seed, const std::string& hash);
std::string transfer_csv(const TransferTable& t, std::uint64_t seed, const std::string& hash);
std::string calibration_csv(const SigmaCalibration& c);
std::string votes_csv(const std::vector<VoteRecord>& votes);
std::string histogram_csv(const std::vector<std::pair<std::string, std::vector<HistogramBin>>>& series);

/// Writes every table present plus summary.json, config_echo.json and
/// timing.json. Returns the paths written. Throws Error on an empty report.
std::vector<std::filesystem::path> emit_report(const Report& report, const std::filesystem::path& out_dir);

/// Runs the selected experiment (report = all of them) and emits the files.
Report run_experiment(const ExperimentConfig& cfg);

}  // namespace illusion
