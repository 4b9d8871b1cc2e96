#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "illusion/encoder.hpp"
#include "illusion/reconstruct.hpp"

namespace illusion {

enum class DmGradientMode { exact_jacobian, straight_through };

const char* to_string(DmGradientMode mode);

struct AttackConfig {
  double epsilon = 0.1;  // L∞ budget
  double step = 0.01;    // α
  int max_iters = 3000;
  int eot_samples = 8;
  DmGradientMode dm_gradient_mode = DmGradientMode::straight_through;
  double cos_threshold = 0.8;
  int loop_budget = 3000;
  std::uint64_t seed = 7;

  void validate() const;
};

struct AttackResult {
  Vec delta;
  Vec perturbed;  // clip01(x + delta)
  double best_cos = -1.0;
  std::vector<double> cos_trajectory;
  int loops_used = 0;
  bool success = false;
  bool stagnated = false;  // 50 consecutive all-zero gradients
};

/// Called once per evaluated iterate; returning true stops the attack.
using AttackObserver = std::function<bool(int loop, const Vec& perturbed, double cos)>;

/// Signed-gradient PGD maximising cos(f(x̃), e_target) inside the L∞ ball,
/// keeping x̃ in [0,1]^n. Loop i evaluates the current iterate, stops if the
/// threshold is met, then steps; after max_iters steps the last iterate is
/// evaluated as part of loop max_iters. Returns the best iterate.
AttackResult pgd_illusion(const Vec& x, int target, const EncoderModel& enc, const LabelBank& bank,
                          const AttackConfig& cfg, const AttackObserver& observer = {});

/// PGD on the expectation over sanitizer draws of cos(f(G(x̃, ε)), e_target).
/// ae/vae use the exact Jacobian U·Uᵀ; dm uses the mode in cfg. The clip is
/// treated as identity. Deterministic sanitizers use a single draw per loop.
AttackResult adaptive_pgd(const Vec& x, int target, const EncoderModel& enc, const LabelBank& bank,
                          const Reconstructor& recon, const AttackConfig& cfg, int sample_id = 0);

struct AttackCostRecord {
  int sample_id = 0;
  int target_label = 0;
  int loops_used = 0;
  double final_cos = 0.0;
  bool success = false;
  bool defended = false;
};

/// One attack per sample with max_iters = loop_budget; failures record the
/// full budget. `recon` selects the adaptive attack when non-null.
std::vector<AttackCostRecord> measure_attack_cost(const std::vector<ImageSample>& samples,
                                                  const std::vector<int>& targets, const EncoderModel& enc,
                                                  const LabelBank& bank, const Reconstructor* recon,
                                                  const AttackConfig& cfg, int threads = 1);

/// Header: sample_id,target_label,loops_used,final_cos,success,defended_flag
std::string attack_records_csv(const std::vector<AttackCostRecord>& records);

}  // namespace illusion
