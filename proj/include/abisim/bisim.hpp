#pragma once

#include <cmath>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "abisim/experience.hpp"
#include "abisim/metrics.hpp"
#include "abisim/nn/checkpoint.hpp"
#include "abisim/nn/modules.hpp"

namespace abisim {

inline constexpr double kSigmaMin = 1e-2;

/// Diagonal Gaussians, one per column: mu and sigma are (D, batch).
template <typename Scalar>
struct GaussianLatent {
  nn::Matrix<Scalar> mu;
  nn::Matrix<Scalar> sigma;

  Eigen::Index dim() const { return mu.rows(); }
  Eigen::Index batch() const { return mu.cols(); }
};

/// Per-column surrogate W1: |mu_p - mu_q|_1 + |sigma_p - sigma_q|_1.
template <typename Scalar>
nn::Vector<Scalar> latent_w1(const GaussianLatent<Scalar>& p, const GaussianLatent<Scalar>& q) {
  if (p.dim() != q.dim() || p.batch() != q.batch()) {
    throw ShapeError("latent_w1: dimension mismatch (" + std::to_string(p.dim()) + " vs " +
                     std::to_string(q.dim()) + ")");
  }
  return ((p.mu - q.mu).cwiseAbs().colwise().sum() + (p.sigma - q.sigma).cwiseAbs().colwise().sum())
      .transpose();
}

/// Latent forward model: MLP on [z, one_hot(a)] with a mean head and a softplus scale head
/// floored at sigma_min.
template <typename Scalar>
class ForwardModel {
public:
  using Mat = nn::Matrix<Scalar>;

  ForwardModel() = default;
  ForwardModel(int dim, int n_actions, const std::vector<int>& hidden, Rng& rng,
               Scalar sigma_min = Scalar(kSigmaMin))
      : dim_(dim), n_actions_(n_actions), sigma_min_(sigma_min),
        net_(dim + n_actions, hidden, 2 * dim, rng) {}

  int dim() const { return dim_; }
  int n_actions() const { return n_actions_; }
  Scalar sigma_min() const { return sigma_min_; }

  GaussianLatent<Scalar> infer(const Mat& z, std::span<const int> actions) const {
    return heads(net_.infer(input(z, actions)));
  }

  GaussianLatent<Scalar> forward(const Mat& z, std::span<const int> actions) {
    raw_ = net_.forward(input(z, actions));
    return heads(raw_);
  }

  /// Backpropagates d(loss)/d(mu) and d(loss)/d(sigma) of the last forward(); returns the
  /// gradient w.r.t. z.
  Mat backward(const Mat& dmu, const Mat& dsigma) {
    Mat draw(2 * dim_, dmu.cols());
    draw.topRows(dim_) = dmu;
    const auto pre = raw_.bottomRows(dim_).array();
    const auto soft = pre.unaryExpr([](Scalar v) { return softplus(v); });
    const auto sig = pre.unaryExpr([](Scalar v) { return Scalar(1) / (Scalar(1) + std::exp(-v)); });
    draw.bottomRows(dim_) = (soft > sigma_min_).select(dsigma.array() * sig, Scalar(0)).matrix();
    return net_.backward(draw).topRows(dim_);
  }

  void parameters(nn::ParamList<Scalar>& out, const std::string& prefix) {
    net_.parameters(out, prefix);
  }
  nn::ParamList<Scalar> parameters(const std::string& prefix = "forward") {
    nn::ParamList<Scalar> out;
    parameters(out, prefix);
    return out;
  }

  static Scalar softplus(Scalar v) {
    return v > Scalar(20) ? v : std::log1p(std::exp(v));
  }

private:
  Mat input(const Mat& z, std::span<const int> actions) const {
    if (z.rows() != dim_ || Eigen::Index(actions.size()) != z.cols()) {
      throw ShapeError("forward model input shape mismatch");
    }
    Mat x = Mat::Zero(dim_ + n_actions_, z.cols());
    x.topRows(dim_) = z;
    for (Eigen::Index b = 0; b < z.cols(); ++b) x(dim_ + actions[b], b) = Scalar(1);
    return x;
  }

  GaussianLatent<Scalar> heads(const Mat& raw) const {
    GaussianLatent<Scalar> g;
    g.mu = raw.topRows(dim_);
    const Scalar floor = sigma_min_;
    g.sigma = raw.bottomRows(dim_).unaryExpr([floor](Scalar v) { return std::max(softplus(v), floor); });
    return g;
  }

  int dim_ = 0;
  int n_actions_ = 0;
  Scalar sigma_min_ = Scalar(kSigmaMin);
  nn::Mlp<Scalar> net_;
  Mat raw_;
};

/// Mean Gaussian NLL of `target` (D, B) under `pred`, with optional gradients w.r.t. mu and sigma.
template <typename Scalar>
double gaussian_nll(const GaussianLatent<Scalar>& pred, const nn::Matrix<Scalar>& target,
                    nn::Matrix<Scalar>* dmu = nullptr, nn::Matrix<Scalar>* dsigma = nullptr) {
  const Eigen::Index batch = target.cols();
  const auto diff = (target - pred.mu).array();
  const auto inv = pred.sigma.array().inverse();
  const double half_log_2pi = 0.5 * std::log(2.0 * M_PI);
  const double nll = (double((pred.sigma.array().log() + Scalar(0.5) * (diff * inv).square()).sum()) +
                      half_log_2pi * double(target.size())) /
                     double(batch);
  if (!std::isfinite(nll)) throw NumericalError("non-finite forward-model NLL");
  if (dmu) *dmu = (-(diff * inv.square()) / Scalar(batch)).matrix();
  if (dsigma) *dsigma = ((inv - diff.square() * inv.cube()) / Scalar(batch)).matrix();
  return nll;
}

/// Forward-model NLL on a batch of (z, a, z'); embeddings are constants. Accumulates
/// forward-model gradients when `backward` is set.
template <typename Scalar>
double forward_nll(ForwardModel<Scalar>& model, const nn::Matrix<Scalar>& z,
                   std::span<const int> actions, const nn::Matrix<Scalar>& z_next,
                   bool backward = false) {
  if (!backward) return gaussian_nll(model.infer(z, actions), z_next);
  nn::Matrix<Scalar> dmu, dsigma;
  const double nll = gaussian_nll(model.forward(z, actions), z_next, &dmu, &dsigma);
  model.backward(dmu, dsigma);
  return nll;
}

enum class ActionExpectation { enumerate, monte_carlo, behavioral };

std::string to_string(ActionExpectation e);
ActionExpectation action_expectation_from_string(const std::string& s);

/// Per-column L1 distances between columns of a and b.
template <typename Scalar>
nn::Vector<Scalar> l1_distances(const nn::Matrix<Scalar>& a, const nn::Matrix<Scalar>& b) {
  return (a - b).cwiseAbs().colwise().sum().transpose();
}

struct TargetSpec {
  double c = 0.99;
  ActionExpectation expectation = ActionExpectation::enumerate;
  int mc_samples = 64;
};

/// Bootstrapped action-bisimulation targets for pairs (i, j):
/// (1 - c) |psi_i - psi_j|_1 + c E_a W1(f(phibar_i, a), f(phibar_j, a)).
/// `behavior_actions` supplies a per-pair action for the behavioral expectation.
template <typename Scalar>
nn::Vector<Scalar> abisim_target(const nn::Matrix<Scalar>& psi_i, const nn::Matrix<Scalar>& psi_j,
                                 const nn::Matrix<Scalar>& phibar_i,
                                 const nn::Matrix<Scalar>& phibar_j,
                                 const ForwardModel<Scalar>& model, const TargetSpec& spec,
                                 Rng* rng = nullptr, std::span<const int> behavior_actions = {}) {
  const Eigen::Index batch = psi_i.cols();
  const Scalar c = Scalar(spec.c);
  nn::Vector<Scalar> target = (Scalar(1) - c) * l1_distances(psi_i, psi_j);
  if (spec.c == 0.0) return target;
  nn::Vector<Scalar> expected = nn::Vector<Scalar>::Zero(batch);
  std::vector<int> actions(static_cast<std::size_t>(batch));
  auto accumulate = [&](Scalar weight) {
    const auto p = model.infer(phibar_i, actions);
    const auto q = model.infer(phibar_j, actions);
    expected += weight * latent_w1(p, q);
  };
  switch (spec.expectation) {
    case ActionExpectation::enumerate:
      for (int a = 0; a < model.n_actions(); ++a) {
        std::fill(actions.begin(), actions.end(), a);
        accumulate(Scalar(1) / Scalar(model.n_actions()));
      }
      break;
    case ActionExpectation::monte_carlo: {
      if (spec.mc_samples < 1) throw ConfigError("monte_carlo expectation needs M >= 1 samples");
      if (!rng) throw ConfigError("monte_carlo expectation needs a random generator");
      std::uniform_int_distribution<int> pick(0, model.n_actions() - 1);
      for (int m = 0; m < spec.mc_samples; ++m) {
        for (auto& a : actions) a = pick(*rng);
        accumulate(Scalar(1) / Scalar(spec.mc_samples));
      }
      break;
    }
    case ActionExpectation::behavioral:
      if (Eigen::Index(behavior_actions.size()) != batch) {
        throw ConfigError("behavioral expectation needs one logged action per pair");
      }
      actions.assign(behavior_actions.begin(), behavior_actions.end());
      accumulate(Scalar(1));
      break;
  }
  return target + c * expected;
}

/// Mean | |phi_i - phi_j|_1 - target |. With gradients requested, fills d(loss)/d(phi_i) and
/// d(loss)/d(phi_j).
template <typename Scalar>
double bisim_loss(const nn::Matrix<Scalar>& phi_i, const nn::Matrix<Scalar>& phi_j,
                  const nn::Vector<Scalar>& targets, nn::Matrix<Scalar>* dphi_i = nullptr,
                  nn::Matrix<Scalar>* dphi_j = nullptr) {
  const Eigen::Index batch = phi_i.cols();
  const nn::Matrix<Scalar> diff = phi_i - phi_j;
  const nn::Vector<Scalar> residual = diff.cwiseAbs().colwise().sum().transpose() - targets;
  const double loss = double(residual.cwiseAbs().sum()) / double(batch);
  if (!std::isfinite(loss)) throw NumericalError("non-finite bisimulation loss");
  if (dphi_i || dphi_j) {
    auto sgn = [](Scalar v) { return Scalar((v > Scalar(0)) - (v < Scalar(0))); };
    nn::Matrix<Scalar> g = diff.unaryExpr(sgn);
    for (Eigen::Index b = 0; b < batch; ++b) g.col(b) *= sgn(residual(b)) / Scalar(batch);
    if (dphi_i) *dphi_i = g;
    if (dphi_j) *dphi_j = -g;
  }
  return loss;
}

enum class PhiInit { psi, random };

struct BisimConfig {
  double c = 0.99;
  double tau = 0.005;
  int steps = 20000;
  int batch = 64;
  double learning_rate = 1e-4;
  double forward_learning_rate = 1e-4;
  ActionExpectation action_expectation = ActionExpectation::enumerate;
  int mc_samples = 64;
  std::vector<int> forward_hidden{256, 256};
  PhiInit phi_init = PhiInit::psi;
  double convergence_tol = 1e-4;
  int convergence_window = 1000;

  void validate() const;
  TargetSpec target_spec() const { return {c, action_expectation, mc_samples}; }
};

nlohmann::json to_json(const BisimConfig& cfg);
BisimConfig bisim_config_from_json(const nlohmann::json& j, const std::string& path = "bisim");

struct BisimModel {
  nn::Encoder<float> phi;
  nn::Encoder<float> phi_target;
  ForwardModel<float> forward;

  nn::ParamList<float> phi_parameters() { return phi.parameters("encoder"); }
  nn::ParamList<float> target_parameters() { return phi_target.parameters("target"); }
  nn::ParamList<float> forward_parameters() { return forward.parameters("forward"); }
};

struct BisimResult {
  BisimModel model;
  MetricLog log{{"iter", "fwd_nll", "bisim_loss", "mean_target", "ema_tau", "c"}};
  std::string psi_checksum_before;
  std::string psi_checksum_after;
  int iterations = 0;
  bool converged = false;
};

/// Embeds every `obs` of the dataset with a frozen encoder; column i belongs to ds[i].obs.
nn::Matrix<float> embed_dataset(const nn::Encoder<float>& encoder, const TransitionDataset& ds,
                                bool next = false);

/// Called after every iteration with the iteration count and the current model.
using BisimHook = std::function<void(int iterations, const BisimModel& model)>;

/// Action-bisimulation training loop. `psi` is read-only.
BisimResult train_action_bisim(const TransitionDataset& ds, nn::Encoder<float>& psi,
                               const BisimConfig& cfg, std::uint64_t seed, const BisimHook& hook = {});

void save_bisim(const std::filesystem::path& dir, BisimModel& model, const MetricLog& log,
                const BisimConfig& cfg);
BisimModel load_bisim(const std::filesystem::path& dir);

}  // namespace abisim
