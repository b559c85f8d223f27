#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "abisim/gridworld.hpp"
#include "abisim/metrics.hpp"
#include "abisim/nn/modules.hpp"

namespace abisim {

enum class EncoderInit { none, ssi, acro, abisim, path };

std::string to_string(EncoderInit e);
EncoderInit encoder_init_from_string(const std::string& s);

struct RLConfig {
  double gamma = 0.99;
  int batch = 32;
  double lr = 1e-4;
  double eps_start = 0.9;
  double eps_end = 0.2;
  double eps_decay_fraction = 0.5;
  int target_update_period = 1000;
  int replay_capacity = 100000;
  int total_steps = 200000;
  int eval_every = 5000;
  int eval_episodes = 20;
  int learning_starts = 1000;
  int train_every = 1;
  int q_hidden = 256;
  EncoderInit encoder_init = EncoderInit::none;
  /// Checkpoint directory used when encoder_init is not `none`.
  std::string encoder_checkpoint;
  /// Architecture of a freshly initialized encoder (encoder_init = none).
  nn::EncoderSpec encoder;

  void validate() const;
};

nlohmann::json to_json(const RLConfig& cfg);
RLConfig rl_config_from_json(const nlohmann::json& j, const std::string& path = "rl");

/// Linear decay from eps_start to eps_end over eps_decay_fraction * total_steps, then constant.
double epsilon_by_step(long t, const RLConfig& cfg);

/// Q-network: encoder followed by a one-hidden-layer head.
struct QNetwork {
  nn::Encoder<float> encoder;
  nn::Mlp<float> head;

  QNetwork() = default;
  QNetwork(nn::Encoder<float> enc, int hidden, int n_actions, Rng& rng)
      : encoder(std::move(enc)), head(encoder.embed_dim(), {hidden}, n_actions, rng) {}

  nn::Matrix<float> infer(const nn::RowMatrix<float>& x) const { return head.infer(encoder.infer(x)); }
  nn::Matrix<float> forward(const nn::RowMatrix<float>& x) { return head.forward(encoder.forward(x)); }
  void backward(const nn::Matrix<float>& dq) { encoder.backward(head.backward(dq)); }

  nn::ParamList<float> parameters() {
    nn::ParamList<float> out;
    encoder.parameters(out, "encoder");
    head.parameters(out, "head");
    return out;
  }
  int greedy_action(const Observation& obs) const;
};

/// Fixed-capacity ring buffer of transitions.
class ReplayBuffer {
public:
  struct Item {
    Observation obs;
    int action = 0;
    float reward = 0.0f;
    Observation next_obs;
  };

  explicit ReplayBuffer(std::size_t capacity);
  void add(Item item);
  std::size_t size() const { return items_.size(); }
  std::size_t capacity() const { return capacity_; }
  const Item& operator[](std::size_t i) const { return items_[i]; }
  /// Uniform indices (with replacement) over the occupied slots.
  std::vector<std::size_t> sample(std::size_t batch, Rng& rng) const;

private:
  std::size_t capacity_;
  std::size_t next_ = 0;
  std::vector<Item> items_;
};

using Policy = std::function<int(const GridState&, const Observation&)>;

struct EvalStats {
  double mean = 0.0;
  double ci95 = 0.0;
  std::vector<double> returns;
};

/// Greedy rollouts on fresh resets; deterministic given seed.
EvalStats evaluate_policy(const Policy& policy, const GridConfig& env, int episodes,
                          std::uint64_t seed);
EvalStats evaluate_policy(const QNetwork& q, const GridConfig& env, int episodes,
                          std::uint64_t seed);

/// Optimal policy from BFS distances to the goal.
Policy shortest_path_policy(const GridConfig& env);

struct DQNResult {
  QNetwork q;
  MetricLog curve{{"env_step", "mean_eval_return", "ci95", "train_loss"}};
  std::string initial_encoder_fingerprint;
  long updates = 0;
};

/// Encoder for the Q-network: fresh (none) or loaded verbatim from cfg.encoder_checkpoint.
nn::Encoder<float> make_rl_encoder(const GridConfig& env, const RLConfig& cfg, Rng& rng);

/// Called after each environment step; lets callers observe training (tests, progress).
using DQNHook = std::function<void(long step, const QNetwork& online, const QNetwork& target)>;

DQNResult dqn_train(const GridConfig& env, const RLConfig& cfg, std::uint64_t seed,
                    const DQNHook& hook = {});

}  // namespace abisim
