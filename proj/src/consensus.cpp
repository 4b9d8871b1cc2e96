#include "illusion/consensus.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "illusion/errors.hpp"
#include "illusion/parallel.hpp"
#include "illusion/rng.hpp"

namespace illusion {

namespace {

constexpr std::uint64_t kRetryOffset = std::uint64_t{1} << 32;

}  // namespace

double cosine_similarity(const Vec& a, const Vec& b) {
  if (a.size() != b.size()) throw ShapeError("cosine_similarity: length mismatch");
  const double na = a.norm();
  const double nb = b.norm();
  if (na < 1e-12 || nb < 1e-12) throw SingularError("cosine_similarity: zero vector");
  return std::clamp(a.dot(b) / (na * nb), -1.0, 1.0);
}

int score_rank(const ScoreVector& scores, int label) {
  if (label < 0 || label >= scores.size()) throw ShapeError("score_rank: label out of range");
  const double s = scores[label];
  int rank = 0;
  for (int z = 0; z < scores.size(); ++z)
    if (scores[z] > s || (scores[z] == s && z < label)) ++rank;
  return rank;
}

bool topk_hit(const ScoreVector& scores, int label, int k) { return score_rank(scores, label) < k; }

void ConsensusConfig::validate() const {
  if (num_samples < 1) throw ConfigError("consensus.num_samples must be >= 1");
}

int ConsensusDecision::rank_of(int label) const {
  const int c = static_cast<int>(vote_counts.size());
  if (label < 0 || label >= c) throw ShapeError("rank_of: label out of range");
  int rank = 0;
  for (int z = 0; z < c; ++z) {
    if (z == label) continue;
    if (vote_counts[z] != vote_counts[label]) {
      rank += vote_counts[z] > vote_counts[label];
    } else if (mean_scores[z] != mean_scores[label]) {
      rank += mean_scores[z] > mean_scores[label];
    } else {
      rank += z < label;
    }
  }
  return rank;
}

int ConsensusDecision::best_winning_draw() const {
  int best = -1;
  for (int i = 0; i < static_cast<int>(draws.size()); ++i)
    if (draws[i].vote == winner && (best < 0 || draws[i].top_score > draws[best].top_score)) best = i;
  return best;
}

std::uint64_t consensus_draw_seed(std::uint64_t seed, int sample_id, std::uint64_t draw_index) {
  return derive_seed(seed, Stream::consensus, static_cast<std::uint64_t>(sample_id), draw_index);
}

namespace {

struct DrawOutcome {
  ConsensusDraw draw;
  Vec scores;
};

DrawOutcome draw_once(const Vec& x, const Reconstructor& sanitizer, const EncoderModel& enc, const LabelBank& bank,
                      std::uint64_t draw_seed) {
  const Vec xr = sanitizer.apply(x, draw_seed);
  DrawOutcome out;
  out.draw.embedding = encode(enc, xr);
  const ScoreVector s = classify_embedding(bank, out.draw.embedding);
  out.draw.vote = s.argmax();
  out.draw.top_score = s[out.draw.vote];
  out.scores = s.scores;
  return out;
}

DrawOutcome draw_with_retry(const Vec& x, const Reconstructor& sanitizer, const EncoderModel& enc,
                            const LabelBank& bank, std::uint64_t seed, int sample_id, int draw_index) {
  const auto i = static_cast<std::uint64_t>(draw_index);
  try {
    return draw_once(x, sanitizer, enc, bank, consensus_draw_seed(seed, sample_id, i));
  } catch (const NumericFailure&) {
  } catch (const SingularError&) {
  }
  return draw_once(x, sanitizer, enc, bank, consensus_draw_seed(seed, sample_id, i + kRetryOffset));
}

}  // namespace

ConsensusDraw consensus_draw(const Vec& x, const Reconstructor& sanitizer, const EncoderModel& enc,
                             const LabelBank& bank, std::uint64_t seed, int sample_id, int draw_index) {
  return draw_with_retry(x, sanitizer, enc, bank, seed, sample_id, draw_index).draw;
}

ConsensusDecision aggregate_votes(std::span<const ConsensusDraw> draws, const LabelBank& bank) {
  if (draws.empty()) throw Error("aggregate_votes: no draws");
  const int c = bank.num_classes();
  ConsensusDecision d;
  d.vote_counts.assign(c, 0);
  d.mean_scores = Vec::Zero(c);
  for (const auto& dr : draws) {
    if (dr.vote < 0 || dr.vote >= c) throw ShapeError("aggregate_votes: vote out of range");
    d.votes.push_back(dr.vote);
    ++d.vote_counts[dr.vote];
    d.mean_scores += classify_embedding(bank, dr.embedding).scores;
    d.draws.push_back(dr);
  }
  d.mean_scores /= static_cast<double>(draws.size());

  const int top = *std::max_element(d.vote_counts.begin(), d.vote_counts.end());
  int tied = 0;
  d.winner = -1;
  for (int y = 0; y < c; ++y) {
    if (d.vote_counts[y] != top) continue;
    ++tied;
    if (d.winner < 0 || d.mean_scores[y] > d.mean_scores[d.winner]) d.winner = y;
  }
  d.tie_broken = tied > 1;
  return d;
}

ConsensusDecision consensus_classify(const Vec& x, const ConsensusConfig& cfg, const EncoderModel& enc,
                                     const LabelBank& bank, int sample_id) {
  cfg.validate();
  std::vector<ConsensusDraw> draws;
  draws.reserve(cfg.num_samples);
  for (int i = 0; i < cfg.num_samples; ++i)
    draws.push_back(draw_with_retry(x, cfg.sanitizer, enc, bank, cfg.seed, sample_id, i).draw);
  return aggregate_votes(draws, bank);
}

double majority_attack_probability(double eta, int num_samples) {
  if (!(eta >= 0.0 && eta <= 1.0)) throw ConfigError("eta must lie in [0, 1]");
  if (num_samples < 1) throw ConfigError("num_samples must be >= 1");
  const int n = num_samples;
  if (eta == 0.0) return 0.0;
  if (eta == 1.0) return 1.0;
  double total = 0.0;
  if (n <= 50) {
    double binom = 1.0;  // C(n, k), built up incrementally
    for (int k = 0; k <= n; ++k) {
      if (k > 0) binom = binom * (n - k + 1) / k;
      if (k > n / 2) total += binom * std::pow(eta, k) * std::pow(1.0 - eta, n - k);
    }
  } else {
    const double le = std::log(eta);
    const double l1 = std::log1p(-eta);
    for (int k = n / 2 + 1; k <= n; ++k)
      total += std::exp(std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0) + k * le +
                        (n - k) * l1);
  }
  return std::clamp(total, 0.0, 1.0);
}

EtaEstimate calibrate_eta(std::span<const AttackedSample> attacked, const Reconstructor& sanitizer,
                          const EncoderModel& enc, const LabelBank& bank, int trials, std::uint64_t seed,
                          int threads) {
  if (trials < 1) throw ConfigError("eta trials must be >= 1");
  if (attacked.empty()) throw Error("calibrate_eta: no attacked samples");
  const auto hits = parallel_map(threads, attacked.size(), [&](std::size_t i) {
    const auto& a = attacked[i];
    long h = 0;
    for (int t = 0; t < trials; ++t) {
      const auto seed_t =
          derive_seed(seed, Stream::eta, static_cast<std::uint64_t>(a.sample_id), static_cast<std::uint64_t>(t));
      const Vec xr = sanitizer.apply(a.pixels, seed_t);
      if (classify(enc, bank, xr).argmax() == a.target) ++h;
    }
    return h;
  });
  EtaEstimate e;
  e.hits = std::accumulate(hits.begin(), hits.end(), 0L);
  e.total = static_cast<long>(attacked.size()) * trials;
  e.eta = static_cast<double>(e.hits) / static_cast<double>(e.total);
  e.std_error = std::sqrt(e.eta * (1.0 - e.eta) / static_cast<double>(e.total));
  return e;
}

const char* to_string(LabelKind kind) { return kind == LabelKind::original ? "original" : "target"; }

MetricRecord make_record(int sample_id, int original, int target, const ScoreVector& scores) {
  MetricRecord r;
  r.sample_id = sample_id;
  r.original_label = original;
  r.target_label = target;
  r.rank_original = score_rank(scores, original);
  r.rank_target = score_rank(scores, target);
  r.cs_original = scores[original];
  r.cs_target = scores[target];
  return r;
}

MetricRecord make_record(int sample_id, int original, int target, const ConsensusDecision& decision) {
  MetricRecord r;
  r.sample_id = sample_id;
  r.original_label = original;
  r.target_label = target;
  r.rank_original = decision.rank_of(original);
  r.rank_target = decision.rank_of(target);
  r.cs_original = decision.mean_scores[original];
  r.cs_target = decision.mean_scores[target];
  return r;
}

MetricSummary summarize(std::span<const MetricRecord> records, LabelKind label) {
  if (records.empty()) throw Error("summarize: no records");
  std::vector<const MetricRecord*> sorted;
  for (const auto& r : records) sorted.push_back(&r);
  std::stable_sort(sorted.begin(), sorted.end(),
                   [](const MetricRecord* a, const MetricRecord* b) { return a->sample_id < b->sample_id; });
  MetricSummary m;
  m.n = static_cast<int>(sorted.size());
  double sum = 0.0;
  for (const auto* r : sorted) {
    const int rank = label == LabelKind::original ? r->rank_original : r->rank_target;
    m.top1 += rank < 1;
    m.top5 += rank < 5;
    sum += label == LabelKind::original ? r->cs_original : r->cs_target;
  }
  m.top1 /= m.n;
  m.top5 /= m.n;
  m.cs_mean = sum / m.n;
  double var = 0.0;
  for (const auto* r : sorted) {
    const double v = (label == LabelKind::original ? r->cs_original : r->cs_target) - m.cs_mean;
    var += v * v;
  }
  m.cs_std = std::sqrt(var / m.n);
  return m;
}

SigmaCalibration calibrate_sigma(std::shared_ptr<const PcaBasis> basis, const std::vector<ImageSample>& clean,
                                 std::span<const AttackedSample> attacked, const EncoderModel& enc,
                                 const LabelBank& bank, const std::vector<double>& candidates, int num_samples,
                                 int trials, std::uint64_t seed, int threads, double tolerance) {
  if (candidates.empty()) throw ConfigError("calibration.sigma_candidates must not be empty");
  if (clean.empty()) throw Error("calibrate_sigma: no clean samples");
  SigmaCalibration cal;

  const Reconstructor ae = Reconstructor::ae(basis);
  const auto ref_hits = parallel_map(threads, clean.size(), [&](std::size_t i) {
    return static_cast<int>(classify(enc, bank, ae.apply(clean[i].pixels, 0)).argmax() == clean[i].label);
  });
  cal.reference_top1 = std::accumulate(ref_hits.begin(), ref_hits.end(), 0.0) / clean.size();

  for (double sigma : candidates) {
    SigmaCandidate cand;
    cand.sigma = sigma;
    ConsensusConfig cfg{num_samples, Reconstructor::vae(basis, sigma), seed};
    const auto hits = parallel_map(threads, clean.size(), [&](std::size_t i) {
      const auto d = consensus_classify(clean[i].pixels, cfg, enc, bank, clean[i].sample_id);
      return static_cast<int>(d.winner == clean[i].label);
    });
    cand.clean_top1 = std::accumulate(hits.begin(), hits.end(), 0.0) / clean.size();
    cand.eta = calibrate_eta(attacked, cfg.sanitizer, enc, bank, trials, seed, threads);
    cal.candidates.push_back(cand);
  }

  const SigmaCandidate* best = nullptr;
  for (const auto& c : cal.candidates) {
    if (c.clean_top1 < cal.reference_top1 - tolerance - 1e-12) continue;
    if (!best || c.eta.eta < best->eta.eta || (c.eta.eta == best->eta.eta && c.sigma < best->sigma)) best = &c;
  }
  if (!best) {
    // nothing stays within tolerance: take the least degraded candidate
    for (const auto& c : cal.candidates)
      if (!best || c.clean_top1 > best->clean_top1 || (c.clean_top1 == best->clean_top1 && c.sigma < best->sigma))
        best = &c;
  }
  cal.chosen = best->sigma;
  return cal;
}

}  // namespace illusion
