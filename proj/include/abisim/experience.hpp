#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "abisim/gridworld.hpp"

namespace abisim {

enum class PolicyTag { uniform, external };

struct Transition {
  Observation obs;
  int action = 0;
  Observation next_obs;
  float reward = 0.0f;
  bool done = false;
  int episode_id = 0;
  int t = 0;

  bool operator==(const Transition&) const = default;
};

/// Reward-free pretraining data. Append-only while collecting, read-only afterwards.
struct TransitionDataset {
  std::vector<Transition> transitions;
  GridConfig env_config;
  std::uint64_t collection_seed = 0;
  PolicyTag policy_tag = PolicyTag::uniform;
  std::vector<std::uint64_t> shard_seeds;

  std::size_t size() const { return transitions.size(); }
  bool empty() const { return transitions.empty(); }
  const Transition& operator[](std::size_t i) const { return transitions[i]; }
};

/// n transitions under the uniform random policy, resetting every episode_len steps.
TransitionDataset collect_random(const GridConfig& config, std::size_t n, std::uint64_t seed);

/// Concatenates shards collected with distinct seeds; episode ids are renumbered.
TransitionDataset merge_shards(const std::vector<TransitionDataset>& shards);

/// Uniform sample of `batch` distinct indices out of `population`.
std::vector<std::size_t> sample_indices(std::size_t population, std::size_t batch, Rng& rng);

std::vector<std::size_t> sample_batch(const TransitionDataset& ds, std::size_t batch, Rng& rng);
std::vector<std::size_t> sample_batch(const TransitionDataset& ds, std::size_t batch,
                                      std::uint64_t seed);

/// Pair k is (ds[indices[k]].obs, ds[indices[partner[k]]].obs): the second half of each pair
/// is the sampled batch under a random permutation, so self-pairs can occur.
struct PairBatch {
  std::vector<std::size_t> indices;
  std::vector<std::size_t> partner;
};

PairBatch sample_state_pairs(const TransitionDataset& ds, std::size_t batch, Rng& rng);
PairBatch sample_state_pairs(const TransitionDataset& ds, std::size_t batch, std::uint64_t seed);

/// (s_t, a_t, s_{t+k}) drawn inside one episode. `future` points at next_obs of the
/// transition k - 1 steps after `start`.
struct KStepSample {
  const Transition* start;
  const Observation* future;
};

std::vector<KStepSample> sample_k_step(const TransitionDataset& ds, std::size_t batch, int k,
                                       Rng& rng);

/// Indices of transitions that have a same-episode successor k - 1 steps ahead.
std::vector<std::size_t> k_step_starts(const TransitionDataset& ds, int k);

/// Writes `manifest.json` + `transitions.bin` into `dir` (created if needed).
void save_dataset(const TransitionDataset& ds, const std::filesystem::path& dir);
TransitionDataset load_dataset(const std::filesystem::path& dir);

inline constexpr int kDatasetFormatVersion = 1;
inline constexpr const char* kDatasetFormatName = "abisim-transitions";

std::string to_string(PolicyTag tag);
PolicyTag policy_tag_from_string(const std::string& s);

}  // namespace abisim
