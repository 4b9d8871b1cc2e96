#include "illusion/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <string>

#include "illusion/errors.hpp"
#include "illusion/rng.hpp"

namespace illusion {

namespace {

constexpr double kSingularNorm = 1e-12;

Mat gaussian_matrix(int rows, int cols, double sd, Engine& rng) {
  std::normal_distribution<double> normal(0.0, sd);
  Mat m(rows, cols);
  // Column-major fill order is part of the determinism contract.
  for (int c = 0; c < cols; ++c)
    for (int r = 0; r < rows; ++r) m(r, c) = normal(rng);
  return m;
}

/// Solves A·X = B for symmetric PSD A; λ = 0 goes through a rank check.
Mat solve_normal(const Mat& a, const Mat& b, double ridge, const char* what) {
  if (ridge > 0.0) {
    Eigen::LDLT<Mat> ldlt(a);
    if (ldlt.info() == Eigen::Success) return ldlt.solve(b);
  }
  Eigen::FullPivLU<Mat> lu(a);
  lu.setThreshold(1e-12);
  if (lu.rank() < a.rows()) throw RankDeficientError(std::string(what) + ": singular normal matrix", lu.rank(), a.rows());
  return lu.solve(b);
}

}  // namespace

const char* to_string(EncoderKind kind) { return kind == EncoderKind::linear ? "linear" : "mlp"; }

int ScoreVector::argmax() const {
  int best = 0;
  for (int y = 1; y < size(); ++y)
    if (scores[y] > scores[best]) best = y;
  return best;
}

double default_ridge(const Mat& prototypes) {
  return 1e-6 * prototypes.squaredNorm() / static_cast<double>(prototypes.rows());
}

Mat random_encoder_prior(int embed_dim, int input_dim, double scale, std::uint64_t seed) {
  Engine rng = make_engine(seed, Stream::encoder_prior, 0);
  return gaussian_matrix(embed_dim, input_dim, scale / std::sqrt(static_cast<double>(input_dim)), rng);
}

EncoderModel fit_encoder_linear(const Mat& prototypes, const LabelBank& bank, double ridge,
                                const std::optional<Mat>& prior) {
  if (ridge < 0.0) throw Error("fit_encoder_linear: ridge must be >= 0");
  if (prototypes.cols() != bank.num_classes())
    throw ShapeError("fit_encoder_linear: " + std::to_string(prototypes.cols()) + " prototypes for " +
                     std::to_string(bank.num_classes()) + " labels");
  const auto c = prototypes.cols();
  const Mat gram = prototypes.transpose() * prototypes + ridge * Mat::Identity(c, c);

  Mat residual = bank.embeddings;
  if (prior) {
    if (prior->rows() != bank.embed_dim() || prior->cols() != prototypes.rows())
      throw ShapeError("fit_encoder_linear: prior has the wrong shape");
    residual -= *prior * prototypes;
  }
  // (E − W0·P)·G⁻¹ = ((G⁻¹)·(E − W0·P)ᵀ)ᵀ since G is symmetric.
  const Mat coeff = solve_normal(gram, residual.transpose(), ridge, "fit_encoder_linear").transpose();

  EncoderModel m;
  m.kind = EncoderKind::linear;
  m.weights = coeff * prototypes.transpose();
  if (prior) m.weights += *prior;
  m.ridge = ridge;
  return m;
}

EncoderModel init_encoder_mlp(int input_dim, int embed_dim, const MlpParams& params) {
  if (params.hidden < 1) throw ConfigError("encoder.mlp.hidden: must be >= 1");
  Engine rng = make_engine(params.seed, Stream::mlp_init, 0);
  EncoderModel m;
  m.kind = EncoderKind::mlp;
  m.weights = gaussian_matrix(params.hidden, input_dim, 1.0 / std::sqrt(static_cast<double>(input_dim)), rng);
  m.output_weights = gaussian_matrix(embed_dim, params.hidden, 1.0 / std::sqrt(static_cast<double>(params.hidden)), rng);
  return m;
}

MlpGradient mlp_loss_gradient(const EncoderModel& model, const Mat& inputs, const std::vector<int>& labels,
                              const LabelBank& bank) {
  const Mat x = inputs.transpose();  // n×B
  const auto batch = x.cols();
  const Mat hidden = (model.weights * x).array().tanh().matrix();
  const Mat out = model.output_weights * hidden;

  MlpGradient g;
  Mat grad_out = Mat::Zero(out.rows(), batch);
  for (Eigen::Index i = 0; i < batch; ++i) {
    const Vec u = out.col(i);
    const Vec target = bank.embedding(labels[static_cast<std::size_t>(i)]);
    const double nu = u.norm();
    if (nu < kSingularNorm) {
      g.loss += 1.0;
      continue;
    }
    g.loss += 1.0 - u.dot(target) / (nu * target.norm());
    grad_out.col(i) = -grad_cosine_wrt_embedding(u, target);
  }
  const double scale = 1.0 / static_cast<double>(batch);
  g.loss *= scale;
  grad_out *= scale;
  g.output_weights = grad_out * hidden.transpose();
  const Mat grad_hidden =
      ((model.output_weights.transpose() * grad_out).array() * (1.0 - hidden.array().square())).matrix();
  g.hidden_weights = grad_hidden * x.transpose();
  return g;
}

EncoderModel fit_encoder_mlp(const std::vector<ImageSample>& train, const LabelBank& bank,
                             const MlpParams& params) {
  if (train.empty()) throw Error("fit_encoder_mlp: empty training set");
  if (params.epochs < 0 || params.batch < 1) throw ConfigError("encoder.mlp: epochs >= 0 and batch >= 1 required");
  const int n = static_cast<int>(train.front().pixels.size());
  EncoderModel m = init_encoder_mlp(n, bank.embed_dim(), params);

  const auto count = static_cast<int>(train.size());
  std::vector<int> order(static_cast<std::size_t>(count));
  for (int epoch = 0; epoch < params.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    Engine rng = make_engine(params.seed, Stream::mlp_shuffle, static_cast<std::uint64_t>(epoch));
    std::shuffle(order.begin(), order.end(), rng);

    double epoch_loss = 0.0;
    for (int start = 0; start < count; start += params.batch) {
      const int stop = std::min(count, start + params.batch);
      Mat x(stop - start, n);
      std::vector<int> labels;
      for (int i = start; i < stop; ++i) {
        const auto& s = train[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])];
        x.row(i - start) = s.pixels.transpose();
        labels.push_back(s.label);
      }
      const auto g = mlp_loss_gradient(m, x, labels, bank);
      if (!std::isfinite(g.loss)) throw DivergenceError("fit_encoder_mlp: non-finite loss at epoch " + std::to_string(epoch));
      m.weights -= params.learning_rate * g.hidden_weights;
      m.output_weights -= params.learning_rate * g.output_weights;
      epoch_loss += g.loss * (stop - start);
    }
    m.loss_history.push_back(epoch_loss / count);
  }
  return m;
}

Vec encode(const EncoderModel& m, const Vec& x) {
  if (x.size() != m.input_dim()) throw ShapeError("encode: input length " + std::to_string(x.size()));
  if (m.kind == EncoderKind::linear) return m.weights * x;
  return m.output_weights * (m.weights * x).array().tanh().matrix();
}

Mat encode_batch(const EncoderModel& m, const Mat& inputs) {
  if (m.kind == EncoderKind::linear) return m.weights * inputs;
  return m.output_weights * (m.weights * inputs).array().tanh().matrix();
}

Vec encoder_vjp(const EncoderModel& m, const Vec& x, const Vec& grad_embedding) {
  if (m.kind == EncoderKind::linear) return m.weights.transpose() * grad_embedding;
  const Vec hidden = (m.weights * x).array().tanh().matrix();
  const Vec grad_hidden =
      ((m.output_weights.transpose() * grad_embedding).array() * (1.0 - hidden.array().square())).matrix();
  return m.weights.transpose() * grad_hidden;
}

Vec encoder_vjp_sum(const EncoderModel& m, const Mat& inputs, const Mat& grad_embeddings) {
  if (m.kind == EncoderKind::linear) return m.weights.transpose() * grad_embeddings.rowwise().sum();
  const Mat hidden = (m.weights * inputs).array().tanh().matrix();
  const Mat grad_hidden =
      ((m.output_weights.transpose() * grad_embeddings).array() * (1.0 - hidden.array().square())).matrix();
  return m.weights.transpose() * grad_hidden.rowwise().sum();
}

ScoreVector classify_embedding(const LabelBank& bank, const Vec& embedding) {
  const double norm = embedding.norm();
  if (norm < kSingularNorm) throw SingularError("classify: zero-norm embedding has no cosine score");
  ScoreVector s{bank.embeddings.transpose() * embedding};
  for (int y = 0; y < s.size(); ++y)
    s.scores[y] = std::clamp(s.scores[y] / (norm * bank.embeddings.col(y).norm()), -1.0, 1.0);
  return s;
}

ScoreVector classify(const EncoderModel& m, const LabelBank& bank, const Vec& x) {
  return classify_embedding(bank, encode(m, x));
}

Vec grad_cosine_wrt_embedding(const Vec& u, const Vec& target) {
  const double nu = u.norm();
  const double nt = target.norm();
  if (nu < kSingularNorm || nt < kSingularNorm) throw SingularError("cosine gradient at a zero vector");
  return target / (nu * nt) - (u.dot(target) / (nu * nu * nu * nt)) * u;
}

Vec grad_cosine_wrt_input(const EncoderModel& m, const Vec& x, const Vec& target) {
  return encoder_vjp(m, x, grad_cosine_wrt_embedding(encode(m, x), target));
}

DownstreamDecoder fit_downstream_decoder(const EncoderModel& m, const std::vector<ImageSample>& train,
                                         std::optional<double> ridge) {
  if (train.empty()) throw Error("fit_downstream_decoder: empty training set");
  const auto count = static_cast<Eigen::Index>(train.size());
  const auto n = train.front().pixels.size();
  Mat pixels(n, count);
  for (Eigen::Index i = 0; i < count; ++i) pixels.col(i) = train[static_cast<std::size_t>(i)].pixels;
  const Mat emb = encode_batch(m, pixels);

  const Vec pixel_mean = pixels.rowwise().mean();
  const Vec emb_mean = emb.rowwise().mean();
  const Mat xc = pixels.colwise() - pixel_mean;
  const Mat fc = emb.colwise() - emb_mean;
  const Mat gram = fc * fc.transpose();

  double lambda = 0.0;
  if (ridge) {
    if (*ridge < 0.0) throw Error("fit_downstream_decoder: ridge must be >= 0");
    lambda = *ridge;
  } else {
    lambda = 1e-6 * gram.trace() / static_cast<double>(gram.rows());
    if (lambda == 0.0) lambda = 1.0;  // embeddings carry no variance
  }

  const Mat a = gram + lambda * Mat::Identity(gram.rows(), gram.cols());
  DownstreamDecoder dec;
  dec.decode = solve_normal(a, fc * xc.transpose(), lambda, "fit_downstream_decoder").transpose();
  dec.bias = pixel_mean - dec.decode * emb_mean;
  dec.ridge = lambda;
  dec.fit_residual = ((dec.decode * emb).colwise() + dec.bias - pixels).squaredNorm() /
                     static_cast<double>(count * n);
  return dec;
}

Vec decode_embedding(const DownstreamDecoder& dec, const Vec& embedding) {
  if (embedding.size() != dec.decode.cols()) throw ShapeError("decode_embedding: embedding length mismatch");
  return clip01(dec.decode * embedding + dec.bias);
}

}  // namespace illusion
