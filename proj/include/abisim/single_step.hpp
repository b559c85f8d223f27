#pragma once

#include <cmath>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "abisim/experience.hpp"
#include "abisim/features.hpp"
#include "abisim/io.hpp"
#include "abisim/metrics.hpp"
#include "abisim/nn/checkpoint.hpp"
#include "abisim/nn/modules.hpp"

namespace abisim {

enum class SSObjective { inverse, infonce };
enum class InfoNceDistance { squared_l2, l2 };

struct SSTrainConfig {
  double beta_max = 1e-4;
  bool adaptive_beta = false;
  int k = 1;
  double learning_rate = 1e-4;
  int batch = 64;
  int steps = 20000;
  double eval_fraction = 0.05;
  int eval_interval = 500;
  int eval_max_samples = 4096;
  SSObjective objective = SSObjective::inverse;
  InfoNceDistance infonce_distance = InfoNceDistance::squared_l2;
  std::vector<int> inverse_hidden{256, 256};
  nn::EncoderSpec encoder;

  void validate() const;
};

/// beta_i = beta_max * (1 - exp(-4 alpha_{i-1}^2)).
inline double adaptive_beta(double prev_accuracy, double beta_max) {
  return beta_max * (1.0 - std::exp(-4.0 * prev_accuracy * prev_accuracy));
}

/// Single-step encoder psi with its inverse-dynamics head (and the action embedding table
/// used by the contrastive objective).
template <typename Scalar>
struct SingleStepModel {
  nn::Encoder<Scalar> encoder;
  nn::Mlp<Scalar> inverse;
  nn::Matrix<Scalar> action_embeddings;
  nn::Matrix<Scalar> grad_action_embeddings;

  SingleStepModel() = default;
  SingleStepModel(const nn::EncoderSpec& spec, const std::vector<int>& hidden, int n_actions,
                  Rng& rng)
      : encoder(spec, rng), inverse(2 * spec.embed_dim, hidden, n_actions, rng) {
    action_embeddings.resize(2 * spec.embed_dim, n_actions);
    nn::uniform_init(action_embeddings, Scalar(1), rng);
    grad_action_embeddings = nn::Matrix<Scalar>::Zero(2 * spec.embed_dim, n_actions);
  }

  int n_actions() const { return int(action_embeddings.cols()); }

  nn::ParamList<Scalar> parameters() {
    nn::ParamList<Scalar> out;
    encoder.parameters(out, "encoder");
    inverse.parameters(out, "inverse");
    out.push_back({"action_embeddings", &action_embeddings, &grad_action_embeddings});
    return out;
  }
};

struct LossStats {
  double loss = 0.0;
  double nll = 0.0;
  double reg = 0.0;
  double accuracy = 0.0;
};

namespace detail {

template <typename Scalar>
std::string matrix_fingerprint(const nn::RowMatrix<Scalar>& m) {
  return sha256_hex(m.data(), std::size_t(m.size()) * sizeof(Scalar)).substr(0, 16);
}

/// Numerically stable log-softmax over columns.
template <typename Scalar>
nn::Matrix<Scalar> log_softmax(const nn::Matrix<Scalar>& logits) {
  nn::Matrix<Scalar> out(logits.rows(), logits.cols());
  for (Eigen::Index b = 0; b < logits.cols(); ++b) {
    const Scalar m = logits.col(b).maxCoeff();
    const Scalar lse = m + std::log((logits.col(b).array() - m).exp().sum());
    out.col(b) = logits.col(b).array() - lse;
  }
  return out;
}

/// Mean cross-entropy over columns and its gradient w.r.t. the logits.
template <typename Scalar>
LossStats cross_entropy(const nn::Matrix<Scalar>& logits, std::span<const int> actions,
                        nn::Matrix<Scalar>* dlogits) {
  const Eigen::Index batch = logits.cols();
  const nn::Matrix<Scalar> logp = log_softmax(logits);
  LossStats s;
  int correct = 0;
  for (Eigen::Index b = 0; b < batch; ++b) {
    s.nll -= double(logp(actions[b], b));
    Eigen::Index arg;
    logits.col(b).maxCoeff(&arg);
    correct += arg == actions[b];
  }
  s.nll /= double(batch);
  s.accuracy = double(correct) / double(batch);
  if (dlogits) {
    *dlogits = logp.array().exp();
    for (Eigen::Index b = 0; b < batch; ++b) (*dlogits)(actions[b], b) -= Scalar(1);
    *dlogits /= Scalar(batch);
  }
  return s;
}

}  // namespace detail

/// Regularized inverse-dynamics loss on a batch of (s, a, s'):
/// mean[-log p(a | psi(s), psi(s')) + beta (|psi(s)|_1 + |psi(s')|_1)].
/// `inputs` stacks the batch of s followed by the batch of s' (2B samples). When `backward`
/// is set, gradients are accumulated into the model.
template <typename Scalar>
LossStats inverse_dynamics_loss(SingleStepModel<Scalar>& model, const nn::RowMatrix<Scalar>& inputs,
                                std::span<const int> actions, Scalar beta, bool backward) {
  using Mat = nn::Matrix<Scalar>;
  const Eigen::Index batch = Eigen::Index(actions.size());
  const int d = model.encoder.embed_dim();
  const Mat z = backward ? model.encoder.forward(inputs) : model.encoder.infer(inputs);
  Mat pair(2 * d, batch);
  pair.topRows(d) = z.leftCols(batch);
  pair.bottomRows(d) = z.rightCols(batch);
  const Mat logits = backward ? model.inverse.forward(pair) : model.inverse.infer(pair);

  Mat dlogits;
  LossStats s = detail::cross_entropy<Scalar>(logits, actions, backward ? &dlogits : nullptr);
  s.reg = double(beta) * double(z.cwiseAbs().sum()) / double(batch);
  s.loss = s.nll + s.reg;
  if (!std::isfinite(s.loss)) {
    throw NumericalError("non-finite inverse-dynamics loss (batch fingerprint " +
                         detail::matrix_fingerprint(inputs) + ")");
  }
  if (backward) {
    const Mat dpair = model.inverse.backward(dlogits);
    Mat dz(d, 2 * batch);
    dz.leftCols(batch) = dpair.topRows(d);
    dz.rightCols(batch) = dpair.bottomRows(d);
    dz += (beta / Scalar(batch)) * z.unaryExpr([](Scalar v) {
      return Scalar((v > Scalar(0)) - (v < Scalar(0)));
    });
    model.encoder.backward(dz);
  }
  return s;
}

/// Inverse-dynamics cross-entropy plus the L1 penalty, over a batch of transitions.
template <typename Scalar>
LossStats single_step_loss(SingleStepModel<Scalar>& model, std::span<const Transition* const> batch,
                           Scalar beta, bool backward = false) {
  std::vector<const Observation*> obs;
  std::vector<int> actions;
  obs.reserve(2 * batch.size());
  for (const auto* t : batch) obs.push_back(&t->obs);
  for (const auto* t : batch) {
    obs.push_back(&t->next_obs);
    actions.push_back(t->action);
  }
  return inverse_dynamics_loss(model, stack_observations<Scalar>(obs), actions, beta, backward);
}

/// k-step variant: (s_t, a_t, s_{t+k}), predicting the first action.
template <typename Scalar>
LossStats k_step_loss(SingleStepModel<Scalar>& model, std::span<const KStepSample> batch,
                      Scalar beta, bool backward = false) {
  std::vector<const Observation*> obs;
  std::vector<int> actions;
  obs.reserve(2 * batch.size());
  for (const auto& s : batch) obs.push_back(&s.start->obs);
  for (const auto& s : batch) {
    obs.push_back(s.future);
    actions.push_back(s.start->action);
  }
  return inverse_dynamics_loss(model, stack_observations<Scalar>(obs), actions, beta, backward);
}

/// Contrastive action loss: softmax cross-entropy where the logit of action a is the negative
/// distance between [psi(s), psi(s')] and the action embedding e_a.
template <typename Scalar>
LossStats infonce_loss_from_pairs(const nn::Matrix<Scalar>& pair, nn::Matrix<Scalar>& embeddings,
                                  std::span<const int> actions, InfoNceDistance distance,
                                  nn::Matrix<Scalar>* dpair, nn::Matrix<Scalar>* dembeddings) {
  using Mat = nn::Matrix<Scalar>;
  const Eigen::Index n_actions = embeddings.cols(), batch = pair.cols();
  if (n_actions < 2) throw ConfigError("degenerate contrast: need at least 2 actions");
  Mat dist(n_actions, batch);
  for (Eigen::Index b = 0; b < batch; ++b) {
    for (Eigen::Index a = 0; a < n_actions; ++a) {
      const Scalar sq = (pair.col(b) - embeddings.col(a)).squaredNorm();
      dist(a, b) = distance == InfoNceDistance::squared_l2 ? sq : std::sqrt(sq);
    }
  }
  const Mat logits = -dist;
  Mat dlogits;
  const bool grads = dpair || dembeddings;
  LossStats s = detail::cross_entropy<Scalar>(logits, actions, grads ? &dlogits : nullptr);
  s.loss = s.nll;
  if (!std::isfinite(s.loss)) throw NumericalError("non-finite InfoNCE loss");
  if (!grads) return s;
  if (dpair) *dpair = Mat::Zero(pair.rows(), batch);
  if (dembeddings) *dembeddings = Mat::Zero(embeddings.rows(), n_actions);
  for (Eigen::Index b = 0; b < batch; ++b) {
    for (Eigen::Index a = 0; a < n_actions; ++a) {
      const auto diff = (pair.col(b) - embeddings.col(a)).eval();
      // d(logit)/d(diff) = -d(dist)/d(diff)
      Scalar scale = Scalar(-2);
      if (distance == InfoNceDistance::l2) scale = dist(a, b) > Scalar(0) ? -Scalar(1) / dist(a, b) : Scalar(0);
      const auto g = (dlogits(a, b) * scale * diff).eval();
      if (dpair) dpair->col(b) += g;
      if (dembeddings) dembeddings->col(a) -= g;
    }
  }
  return s;
}

template <typename Scalar>
LossStats infonce_loss(SingleStepModel<Scalar>& model, std::span<const Transition* const> batch,
                       InfoNceDistance distance, bool backward = false) {
  using Mat = nn::Matrix<Scalar>;
  std::vector<const Observation*> obs;
  std::vector<int> actions;
  for (const auto* t : batch) obs.push_back(&t->obs);
  for (const auto* t : batch) {
    obs.push_back(&t->next_obs);
    actions.push_back(t->action);
  }
  const auto inputs = stack_observations<Scalar>(obs);
  const Eigen::Index n = Eigen::Index(batch.size());
  const int d = model.encoder.embed_dim();
  const Mat z = backward ? model.encoder.forward(inputs) : model.encoder.infer(inputs);
  Mat pair(2 * d, n);
  pair.topRows(d) = z.leftCols(n);
  pair.bottomRows(d) = z.rightCols(n);
  Mat dpair, demb;
  LossStats s = infonce_loss_from_pairs<Scalar>(pair, model.action_embeddings, actions, distance,
                                                backward ? &dpair : nullptr,
                                                backward ? &demb : nullptr);
  if (backward) {
    model.grad_action_embeddings += demb;
    Mat dz(d, 2 * n);
    dz.leftCols(n) = dpair.topRows(d);
    dz.rightCols(n) = dpair.bottomRows(d);
    model.encoder.backward(dz);
  }
  return s;
}

struct SingleStepResult {
  SingleStepModel<float> model;
  MetricLog log{{"step", "loss", "nll", "reg", "alpha", "beta"}};
  MetricLog eval_log{{"step", "eval_alpha", "eval_nll", "beta"}};
  double final_eval_accuracy = 0.0;
  std::vector<std::size_t> eval_indices;
};

/// Trains psi and the inverse head on `ds` (rewards are never read).
SingleStepResult train_single_step(const TransitionDataset& ds, const SSTrainConfig& cfg,
                                   std::uint64_t seed);

/// Held-out accuracy of the inverse head on the given transition indices.
double inverse_accuracy(SingleStepModel<float>& model, const TransitionDataset& ds,
                        std::span<const std::size_t> indices, int k = 1);

/// Encoder spec for an environment: geometry from the env, architecture from `base`.
nn::EncoderSpec encoder_spec_for(const GridConfig& env, const nn::EncoderSpec& base);

nlohmann::json to_json(const SSTrainConfig& cfg);
SSTrainConfig ss_config_from_json(const nlohmann::json& j, const std::string& path = "ss");

void save_single_step(const std::filesystem::path& dir, SingleStepModel<float>& model,
                      const MetricLog& log, const SSTrainConfig& cfg);
SingleStepModel<float> load_single_step(const std::filesystem::path& dir);

/// Loads the "encoder.*" arrays of any checkpoint (single-step or bisimulation).
nn::Encoder<float> load_encoder(const std::filesystem::path& dir);

/// Embeds observations in chunks; returns (embed_dim, n).
nn::Matrix<float> embed_all(const nn::Encoder<float>& encoder,
                            std::span<const Observation* const> obs, std::size_t chunk = 512);

}  // namespace abisim
