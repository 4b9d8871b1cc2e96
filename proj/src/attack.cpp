#include "illusion/attack.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <sstream>

#include "illusion/csv.hpp"
#include "illusion/errors.hpp"
#include "illusion/parallel.hpp"
#include "illusion/rng.hpp"

namespace illusion {

namespace {

constexpr int kStagnationSteps = 50;

struct Evaluation {
  double cos = -1.0;
  std::optional<Vec> grad;  // empty when the gradient is singular
};

Vec signed_step(const Vec& g) {
  return g.unaryExpr([](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

template <typename Objective>
AttackResult run_pgd(const Vec& x, const AttackConfig& cfg, Objective&& objective, const AttackObserver& observer) {
  cfg.validate();
  const auto n = x.size();
  AttackResult result;
  result.best_cos = -std::numeric_limits<double>::infinity();
  Vec delta = Vec::Zero(n);
  Vec best_delta = delta;
  int zero_streak = 0;

  auto record = [&](const Vec& xt, int loop, const Evaluation& ev) {
    result.cos_trajectory.push_back(ev.cos);
    if (ev.cos > result.best_cos) {
      result.best_cos = ev.cos;
      best_delta = xt - x;
    }
    return observer && observer(loop, xt, ev.cos);
  };

  bool stopped = false;
  for (int loop = 1; loop <= cfg.max_iters && !stopped; ++loop) {
    const Vec xt = x + delta;
    if (delta.cwiseAbs().maxCoeff() > cfg.epsilon + 1e-15 || xt.minCoeff() < 0.0 || xt.maxCoeff() > 1.0)
      throw NumericFailure("pgd: iterate left the feasible set");
    const Evaluation ev = objective(xt, loop - 1);
    if (record(xt, loop, ev) || result.best_cos >= cfg.cos_threshold) {
      result.loops_used = loop;
      stopped = true;
      break;
    }
    if (!ev.grad || ev.grad->cwiseAbs().maxCoeff() == 0.0) {
      if (++zero_streak >= kStagnationSteps) {
        result.stagnated = true;
        result.loops_used = loop;
        stopped = true;
      }
      continue;
    }
    zero_streak = 0;
    delta = (delta + cfg.step * signed_step(*ev.grad)).cwiseMax(-cfg.epsilon).cwiseMin(cfg.epsilon);
    delta = clip01(x + delta) - x;
  }
  if (!stopped) {
    const Vec xt = x + delta;
    record(xt, cfg.max_iters, objective(xt, cfg.max_iters));
    result.loops_used = cfg.max_iters;
  }
  result.delta = best_delta;
  result.perturbed = clip01(x + best_delta);
  result.success = result.best_cos >= cfg.cos_threshold;
  return result;
}

}  // namespace

const char* to_string(DmGradientMode mode) {
  return mode == DmGradientMode::exact_jacobian ? "exact_jacobian" : "straight_through";
}

void AttackConfig::validate() const {
  if (!(epsilon >= 0.0)) throw ConfigError("attack.epsilon: must be >= 0");
  if (!(step > 0.0)) throw ConfigError("attack.step: must be > 0");
  if (max_iters < 1) throw ConfigError("attack.max_iters: must be >= 1");
  if (eot_samples < 1) throw ConfigError("attack.eot_samples: must be >= 1");
  if (!(cos_threshold <= 1.0)) throw ConfigError("attack.cos_threshold: must be <= 1");
  if (loop_budget < 1) throw ConfigError("attack.loop_budget: must be >= 1");
}

AttackResult pgd_illusion(const Vec& x, int target, const EncoderModel& enc, const LabelBank& bank,
                          const AttackConfig& cfg, const AttackObserver& observer) {
  const Vec e = bank.embedding(target);
  auto objective = [&](const Vec& xt, int) {
    Evaluation ev;
    const Vec u = encode(enc, xt);
    try {
      const Vec gu = grad_cosine_wrt_embedding(u, e);
      ev.cos = std::clamp(u.dot(e) / (u.norm() * e.norm()), -1.0, 1.0);
      ev.grad = encoder_vjp(enc, xt, gu);
    } catch (const SingularError&) {
      ev.cos = 0.0;
    }
    return ev;
  };
  return run_pgd(x, cfg, objective, observer);
}

AttackResult adaptive_pgd(const Vec& x, int target, const EncoderModel& enc, const LabelBank& bank,
                          const Reconstructor& recon, const AttackConfig& cfg, int sample_id) {
  const auto kind = recon.kind();
  if (kind == SanitizerKind::transform) throw Error("adaptive_pgd: sanitizer must be ae, vae or dm");
  const Vec e = bank.embedding(target);
  const int draws = recon.stochastic() ? cfg.eot_samples : 1;
  const bool exact_dm = kind == SanitizerKind::dm && cfg.dm_gradient_mode == DmGradientMode::exact_jacobian;

  auto objective = [&](const Vec& xt, int loop) {
    Mat recons(xt.size(), draws);
    std::vector<std::uint64_t> seeds(static_cast<std::size_t>(draws));
    for (int i = 0; i < draws; ++i) {
      seeds[static_cast<std::size_t>(i)] = derive_seed(cfg.seed, Stream::eot, static_cast<std::uint64_t>(sample_id),
                                                       static_cast<std::uint64_t>(loop) * draws + i);
      recons.col(i) = recon.apply(xt, seeds[static_cast<std::size_t>(i)]);
    }
    const Mat emb = encode_batch(enc, recons);
    Mat grads = Mat::Zero(emb.rows(), draws);
    double cos_sum = 0.0;
    int valid = 0;
    for (int i = 0; i < draws; ++i) {
      const Vec u = emb.col(i);
      try {
        grads.col(i) = grad_cosine_wrt_embedding(u, e);
        cos_sum += std::clamp(u.dot(e) / (u.norm() * e.norm()), -1.0, 1.0);
        ++valid;
      } catch (const SingularError&) {
      }
    }
    Evaluation ev;
    ev.cos = cos_sum / draws;
    if (valid == 0) return ev;

    Vec g;
    if (exact_dm) {
      g = Vec::Zero(xt.size());
      for (int i = 0; i < draws; ++i) {
        const Vec ge = encoder_vjp(enc, recons.col(i), grads.col(i));
        g += dm_purify_vjp(recon, recon.mixture(), xt, seeds[static_cast<std::size_t>(i)], ge);
      }
    } else {
      g = encoder_vjp_sum(enc, recons, grads);
      if (kind != SanitizerKind::dm) {
        const auto& u = recon.basis().basis;
        g = u * (u.transpose() * g);
      }
    }
    ev.grad = g / static_cast<double>(draws);
    return ev;
  };
  return run_pgd(x, cfg, objective, {});
}

std::vector<AttackCostRecord> measure_attack_cost(const std::vector<ImageSample>& samples,
                                                  const std::vector<int>& targets, const EncoderModel& enc,
                                                  const LabelBank& bank, const Reconstructor* recon,
                                                  const AttackConfig& cfg, int threads) {
  if (targets.size() != samples.size()) throw ShapeError("measure_attack_cost: one target per sample required");
  AttackConfig run = cfg;
  run.max_iters = cfg.loop_budget;
  return parallel_map(threads, samples.size(), [&](std::size_t i) {
    const auto& s = samples[i];
    const AttackResult r = recon ? adaptive_pgd(s.pixels, targets[i], enc, bank, *recon, run, s.sample_id)
                                 : pgd_illusion(s.pixels, targets[i], enc, bank, run);
    AttackCostRecord rec;
    rec.sample_id = s.sample_id;
    rec.target_label = targets[i];
    rec.success = r.success;
    rec.loops_used = r.success ? r.loops_used : cfg.loop_budget;
    rec.final_cos = r.best_cos;
    rec.defended = recon != nullptr;
    return rec;
  });
}

std::string attack_records_csv(const std::vector<AttackCostRecord>& records) {
  std::ostringstream out;
  out << "sample_id,target_label,loops_used,final_cos,success,defended_flag\n";
  for (const auto& r : records) {
    out << r.sample_id << ',' << r.target_label << ',' << r.loops_used << ',' << fmt6(r.final_cos) << ','
        << (r.success ? 1 : 0) << ',' << (r.defended ? 1 : 0) << '\n';
  }
  return out.str();
}

}  // namespace illusion
