#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <vector>

#include "illusion/encoder.hpp"
#include "illusion/reconstruct.hpp"

namespace illusion {

/// a·b / (‖a‖‖b‖), clamped to [−1, 1]. Throws SingularError on a zero vector.
double cosine_similarity(const Vec& a, const Vec& b);

/// Position of `label` under a descending sort of the scores, ties to the
/// lower index. Zero means top-1.
int score_rank(const ScoreVector& scores, int label);

bool topk_hit(const ScoreVector& scores, int label, int k);

struct ConsensusConfig {
  int num_samples = 10;
  Reconstructor sanitizer;
  std::uint64_t seed = 7;

  void validate() const;
};

struct ConsensusDraw {
  int vote = 0;
  double top_score = 0.0;
  Vec embedding;
};

struct ConsensusDecision {
  std::vector<int> votes;
  std::vector<int> vote_counts;  // per class
  int winner = 0;
  Vec mean_scores;  // per class, averaged over the draws
  bool tie_broken = false;
  std::vector<ConsensusDraw> draws;

  /// Rank under (votes desc, mean cosine desc, index asc).
  int rank_of(int label) const;
  /// Draw whose vote matches the winner with the highest top score.
  int best_winning_draw() const;
};

/// Seed of draw i for sample s: derive_seed(seed, consensus, s, i); a draw
/// that fails numerically is retried once at draw index i + 2^32.
std::uint64_t consensus_draw_seed(std::uint64_t seed, int sample_id, std::uint64_t draw_index);

ConsensusDraw consensus_draw(const Vec& x, const Reconstructor& sanitizer, const EncoderModel& enc,
                             const LabelBank& bank, std::uint64_t seed, int sample_id, int draw_index);

/// Mode of the votes; ties go to the highest mean cosine, then the lowest index.
ConsensusDecision aggregate_votes(std::span<const ConsensusDraw> draws, const LabelBank& bank);

ConsensusDecision consensus_classify(const Vec& x, const ConsensusConfig& cfg, const EncoderModel& enc,
                                     const LabelBank& bank, int sample_id = 0);

/// Σ_{k=⌊N/2⌋+1}^{N} C(N,k) η^k (1−η)^{N−k}; log-binomials for N > 50.
double majority_attack_probability(double eta, int num_samples);

struct AttackedSample {
  Vec pixels;
  int target = 0;
  int sample_id = 0;
};

struct EtaEstimate {
  double eta = 0.0;
  double std_error = 0.0;
  long hits = 0;
  long total = 0;
};

/// Pooled fraction of single-draw reconstructions whose Top-1 is the target.
EtaEstimate calibrate_eta(std::span<const AttackedSample> attacked, const Reconstructor& sanitizer,
                          const EncoderModel& enc, const LabelBank& bank, int trials, std::uint64_t seed,
                          int threads = 1);

enum class LabelKind { original, target };

const char* to_string(LabelKind kind);

/// Per-sample outcome against both labels.
struct MetricRecord {
  int sample_id = 0;
  int original_label = 0;
  int target_label = 0;
  int rank_original = 0;
  int rank_target = 0;
  double cs_original = 0.0;
  double cs_target = 0.0;
};

MetricRecord make_record(int sample_id, int original, int target, const ScoreVector& scores);
MetricRecord make_record(int sample_id, int original, int target, const ConsensusDecision& decision);

struct MetricSummary {
  double top1 = 0.0;
  double top5 = 0.0;
  double cs_mean = 0.0;
  double cs_std = 0.0;  // population standard deviation
  int n = 0;
};

/// Accumulates in sample_id order. Throws Error on empty input.
MetricSummary summarize(std::span<const MetricRecord> records, LabelKind label);

struct SigmaCandidate {
  double sigma = 0.0;
  double clean_top1 = 0.0;
  EtaEstimate eta;
};

struct SigmaCalibration {
  double chosen = 0.0;
  double reference_top1 = 0.0;  // σ = 0, single AE reconstruction
  std::vector<SigmaCandidate> candidates;
};

/// Smallest σ among the candidates that minimise η̂ while keeping clean
/// consensus Top-1 within `tolerance` of the single-AE reference.
SigmaCalibration calibrate_sigma(std::shared_ptr<const PcaBasis> basis, const std::vector<ImageSample>& clean,
                                 std::span<const AttackedSample> attacked, const EncoderModel& enc,
                                 const LabelBank& bank, const std::vector<double>& candidates, int num_samples,
                                 int trials, std::uint64_t seed, int threads = 1, double tolerance = 0.02);

}  // namespace illusion
