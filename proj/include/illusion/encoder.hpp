#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "illusion/linalg.hpp"
#include "illusion/synthdata.hpp"

namespace illusion {

enum class EncoderKind { linear, mlp };

const char* to_string(EncoderKind kind);

/// Image-to-embedding map f. Linear: f(x) = W·x. MLP: f(x) = W2·tanh(W1·x).
struct EncoderModel {
  EncoderKind kind = EncoderKind::linear;
  Mat weights;         // linear W (d×n) or MLP W1 (h×n)
  Mat output_weights;  // MLP W2 (d×h); empty for linear
  double ridge = 0.0;
  std::vector<double> loss_history;

  int input_dim() const { return static_cast<int>(weights.cols()); }
  int embed_dim() const {
    return static_cast<int>(kind == EncoderKind::linear ? weights.rows() : output_weights.rows());
  }
};

/// Per-class cosine similarities s_y ∈ [−1, 1].
struct ScoreVector {
  Vec scores;

  int size() const { return static_cast<int>(scores.size()); }
  double operator[](int y) const { return scores[y]; }
  /// Lowest index wins ties.
  int argmax() const;
};

/// Scale-aware ridge default: 1e-6 · trace(P·Pᵀ) / n.
double default_ridge(const Mat& prototypes);

/// Random prior for the linear encoder, entries N(0, scale²/n).
Mat random_encoder_prior(int embed_dim, int input_dim, double scale, std::uint64_t seed);

/// Ridge fit of prototypes (n×C, one column per class) onto the label bank,
/// shrinking toward `prior` (zero when absent):
///   W = W0 + (E − W0·P)·(PᵀP + λI)⁻¹·Pᵀ.
/// Throws RankDeficientError when λ = 0 and the prototypes are dependent.
EncoderModel fit_encoder_linear(const Mat& prototypes, const LabelBank& bank, double ridge,
                                const std::optional<Mat>& prior = std::nullopt);

struct MlpParams {
  int hidden = 128;
  double learning_rate = 0.05;
  int epochs = 200;
  int batch = 64;
  std::uint64_t seed = 7;
};

EncoderModel init_encoder_mlp(int input_dim, int embed_dim, const MlpParams& params);

struct MlpGradient {
  double loss = 0.0;  // mean (1 − cos(f(x_i), e_{y_i}))
  Mat hidden_weights;
  Mat output_weights;
};

/// Loss and exact gradient over the given rows of `inputs` (N×n).
MlpGradient mlp_loss_gradient(const EncoderModel& model, const Mat& inputs, const std::vector<int>& labels,
                              const LabelBank& bank);

/// Mini-batch gradient descent on mean (1 − cos). Throws DivergenceError on a
/// non-finite loss.
EncoderModel fit_encoder_mlp(const std::vector<ImageSample>& train, const LabelBank& bank,
                             const MlpParams& params);

Vec encode(const EncoderModel& m, const Vec& x);

/// Embeddings of the columns of `inputs` (n×M), returned as d×M.
Mat encode_batch(const EncoderModel& m, const Mat& inputs);

/// Jᵀ·g where J = ∂f/∂x at x.
Vec encoder_vjp(const EncoderModel& m, const Vec& x, const Vec& grad_embedding);

/// Σ_i J(x_i)ᵀ·g_i over the columns of `inputs` and `grad_embeddings`.
Vec encoder_vjp_sum(const EncoderModel& m, const Mat& inputs, const Mat& grad_embeddings);

ScoreVector classify_embedding(const LabelBank& bank, const Vec& embedding);
ScoreVector classify(const EncoderModel& m, const LabelBank& bank, const Vec& x);

/// ∇ᵤ cos(u, target).
Vec grad_cosine_wrt_embedding(const Vec& u, const Vec& target);

/// ∇ₓ cos(f(x), target). Throws SingularError when ‖f(x)‖ < 1e-12.
Vec grad_cosine_wrt_input(const EncoderModel& m, const Vec& x, const Vec& target);

/// Ridge map from embeddings back to pixels: x ≈ D·e + b.
struct DownstreamDecoder {
  Mat decode;  // n×d
  Vec bias;
  double ridge = 0.0;
  double fit_residual = 0.0;  // mean squared pixel error over the training set, before clipping
};

/// λ_dec defaults to 1e-6 · trace(FcᵀFc) / d on the centred embeddings.
DownstreamDecoder fit_downstream_decoder(const EncoderModel& m, const std::vector<ImageSample>& train,
                                         std::optional<double> ridge = std::nullopt);

Vec decode_embedding(const DownstreamDecoder& dec, const Vec& embedding);

}  // namespace illusion
