#include "abisim/experience.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <numeric>

#include "abisim/io.hpp"

namespace abisim {

std::string to_string(PolicyTag tag) { return tag == PolicyTag::uniform ? "uniform" : "external"; }

PolicyTag policy_tag_from_string(const std::string& s) {
  if (s == "uniform") return PolicyTag::uniform;
  if (s == "external") return PolicyTag::external;
  throw ConfigError("unknown policy tag '" + s + "'");
}

TransitionDataset collect_random(const GridConfig& config, std::size_t n, std::uint64_t seed) {
  GridWorld world(config);
  TransitionDataset ds;
  ds.env_config = config;
  ds.collection_seed = seed;
  ds.policy_tag = PolicyTag::uniform;
  ds.shard_seeds = {seed};
  ds.transitions.reserve(n);

  Rng action_rng = make_rng(seed, 1);
  std::uniform_int_distribution<int> pick(0, kNumActions - 1);
  int episode = 0;
  auto reset = world.reset(derive_seed(seed, 1000 + episode));
  GridState state = std::move(reset.state);
  Observation obs = std::move(reset.observation);
  for (std::size_t i = 0; i < n; ++i) {
    const int a = pick(action_rng);
    StepResult r = world.step(state, static_cast<Action>(a));
    Transition tr{obs, a, r.observation, r.reward, r.done, episode, state.t};
    ds.transitions.push_back(std::move(tr));
    if (r.done) {
      ++episode;
      reset = world.reset(derive_seed(seed, 1000 + episode));
      state = std::move(reset.state);
      obs = std::move(reset.observation);
    } else {
      state = std::move(r.state);
      obs = std::move(r.observation);
    }
  }
  return ds;
}

TransitionDataset merge_shards(const std::vector<TransitionDataset>& shards) {
  TransitionDataset out;
  if (shards.empty()) return out;
  out.env_config = shards.front().env_config;
  out.collection_seed = shards.front().collection_seed;
  out.policy_tag = shards.front().policy_tag;
  int episode_offset = 0;
  for (const auto& shard : shards) {
    if (!(shard.env_config == out.env_config)) {
      throw ConfigError("cannot merge shards collected under different env configs");
    }
    out.shard_seeds.insert(out.shard_seeds.end(), shard.shard_seeds.begin(),
                           shard.shard_seeds.end());
    int max_episode = -1;
    for (const auto& tr : shard.transitions) {
      Transition copy = tr;
      copy.episode_id += episode_offset;
      max_episode = std::max(max_episode, tr.episode_id);
      out.transitions.push_back(std::move(copy));
    }
    episode_offset += max_episode + 1;
  }
  return out;
}

std::vector<std::size_t> sample_indices(std::size_t population, std::size_t batch, Rng& rng) {
  if (batch > population) {
    throw InsufficientDataError("requested " + std::to_string(batch) + " samples from " +
                                std::to_string(population));
  }
  std::vector<std::size_t> out;
  out.reserve(batch);
  if (batch * 4 >= population) {
    // Partial Fisher-Yates when the batch is a large fraction of the population.
    std::vector<std::size_t> all(population);
    std::iota(all.begin(), all.end(), std::size_t{0});
    for (std::size_t i = 0; i < batch; ++i) {
      std::uniform_int_distribution<std::size_t> d(i, population - 1);
      std::swap(all[i], all[d(rng)]);
      out.push_back(all[i]);
    }
    return out;
  }
  std::uniform_int_distribution<std::size_t> d(0, population - 1);
  while (out.size() < batch) {
    const std::size_t k = d(rng);
    if (std::find(out.begin(), out.end(), k) == out.end()) out.push_back(k);
  }
  return out;
}

std::vector<std::size_t> sample_batch(const TransitionDataset& ds, std::size_t batch, Rng& rng) {
  return sample_indices(ds.size(), batch, rng);
}

std::vector<std::size_t> sample_batch(const TransitionDataset& ds, std::size_t batch,
                                      std::uint64_t seed) {
  Rng rng = make_rng(seed);
  return sample_batch(ds, batch, rng);
}

PairBatch sample_state_pairs(const TransitionDataset& ds, std::size_t batch, Rng& rng) {
  PairBatch pairs;
  pairs.indices = sample_indices(ds.size(), batch, rng);
  pairs.partner.resize(batch);
  std::iota(pairs.partner.begin(), pairs.partner.end(), std::size_t{0});
  std::shuffle(pairs.partner.begin(), pairs.partner.end(), rng);
  return pairs;
}

PairBatch sample_state_pairs(const TransitionDataset& ds, std::size_t batch, std::uint64_t seed) {
  Rng rng = make_rng(seed);
  return sample_state_pairs(ds, batch, rng);
}

std::vector<std::size_t> k_step_starts(const TransitionDataset& ds, int k) {
  if (k < 1) throw ConfigError("k must be >= 1");
  if (k >= ds.env_config.episode_len) {
    throw ConfigError("invalid horizon: k = " + std::to_string(k) +
                      " must be smaller than episode_len = " +
                      std::to_string(ds.env_config.episode_len));
  }
  std::vector<std::size_t> starts;
  for (std::size_t i = 0; i + std::size_t(k) - 1 < ds.size(); ++i) {
    if (ds[i + k - 1].episode_id == ds[i].episode_id) starts.push_back(i);
  }
  return starts;
}

std::vector<KStepSample> sample_k_step(const TransitionDataset& ds, std::size_t batch, int k,
                                       Rng& rng) {
  const auto starts = k_step_starts(ds, k);
  const auto picks = sample_indices(starts.size(), batch, rng);
  std::vector<KStepSample> out;
  out.reserve(batch);
  for (std::size_t p : picks) {
    const std::size_t i = starts[p];
    out.push_back({&ds[i], &ds[i + k - 1].next_obs});
  }
  return out;
}

namespace {

void put_u32_le(std::vector<char>& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint32_t get_u32_le(const char* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= std::uint32_t(static_cast<unsigned char>(p[i])) << (8 * i);
  return v;
}

}  // namespace

void save_dataset(const TransitionDataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const GridConfig& cfg = ds.env_config;
  const std::size_t obs_bytes = std::size_t(cfg.channels()) * cfg.height * cfg.width;
  const std::size_t stride = 2 * obs_bytes + 1 + 4 + 1;

  std::vector<char> buf;
  buf.reserve(stride * ds.size());
  for (const auto& tr : ds.transitions) {
    if (tr.obs.size() != obs_bytes || tr.next_obs.size() != obs_bytes) {
      throw ShapeError("transition observation does not match the dataset env config");
    }
    buf.insert(buf.end(), tr.obs.data.begin(), tr.obs.data.end());
    buf.push_back(static_cast<char>(static_cast<std::uint8_t>(tr.action)));
    buf.insert(buf.end(), tr.next_obs.data.begin(), tr.next_obs.data.end());
    put_u32_le(buf, std::bit_cast<std::uint32_t>(tr.reward));
    buf.push_back(tr.done ? 1 : 0);
  }
  {
    std::ofstream out(dir / "transitions.bin", std::ios::binary | std::ios::trunc);
    out.write(buf.data(), std::streamsize(buf.size()));
    if (!out) throw Error("failed to write " + (dir / "transitions.bin").string());
  }

  nlohmann::json manifest{
      {"format", kDatasetFormatName},
      {"version", kDatasetFormatVersion},
      {"count", ds.size()},
      {"obs_shape", {cfg.channels(), cfg.height, cfg.width}},
      {"record_stride", stride},
      {"record_layout",
       {"obs:int8[C*H*W]", "action:uint8", "next_obs:int8[C*H*W]", "reward:float32le", "done:uint8"}},
      {"endianness", "little"},
      {"env_config", cfg},
      {"collection_seed", ds.collection_seed},
      {"policy_tag", to_string(ds.policy_tag)},
      {"shard_seeds", ds.shard_seeds},
      {"payload_sha256", sha256_hex(buf.data(), buf.size())}};
  write_json(dir / "manifest.json", manifest);
}

TransitionDataset load_dataset(const std::filesystem::path& dir) {
  nlohmann::json manifest;
  try {
    manifest = read_json(dir / "manifest.json");
  } catch (const std::exception& e) {
    throw CorruptDatasetError("manifest: " + std::string(e.what()));
  }
  if (manifest.value("format", std::string()) != kDatasetFormatName) {
    throw CorruptDatasetError("manifest: bad magic (format field is not '" +
                              std::string(kDatasetFormatName) + "')");
  }
  if (manifest.value("version", -1) != kDatasetFormatVersion) {
    throw CorruptDatasetError("manifest: unsupported format version");
  }

  TransitionDataset ds;
  std::size_t count = 0, stride = 0;
  try {
    ds.env_config = manifest.at("env_config").get<GridConfig>();
    ds.collection_seed = manifest.at("collection_seed").get<std::uint64_t>();
    ds.policy_tag = policy_tag_from_string(manifest.at("policy_tag").get<std::string>());
    ds.shard_seeds = manifest.at("shard_seeds").get<std::vector<std::uint64_t>>();
    count = manifest.at("count").get<std::size_t>();
    stride = manifest.at("record_stride").get<std::size_t>();
  } catch (const std::exception& e) {
    throw CorruptDatasetError("manifest: " + std::string(e.what()));
  }
  const GridConfig& cfg = ds.env_config;
  const int channels = cfg.channels();
  const std::size_t obs_bytes = std::size_t(channels) * cfg.height * cfg.width;
  if (stride != 2 * obs_bytes + 6) {
    throw CorruptDatasetError("manifest: record_stride does not match obs_shape");
  }

  std::ifstream in(dir / "transitions.bin", std::ios::binary | std::ios::ate);
  if (!in) throw CorruptDatasetError("transitions.bin: missing");
  const std::size_t bytes = std::size_t(in.tellg());
  if (bytes != count * stride) {
    throw CorruptDatasetError("transitions.bin: truncated payload (declared " +
                              std::to_string(count) + " records = " +
                              std::to_string(count * stride) + " bytes, found " +
                              std::to_string(bytes) + ")");
  }
  std::vector<char> buf(bytes);
  in.seekg(0);
  in.read(buf.data(), std::streamsize(bytes));
  if (manifest.contains("payload_sha256") &&
      manifest["payload_sha256"].get<std::string>() != sha256_hex(buf.data(), buf.size())) {
    throw CorruptDatasetError("transitions.bin: payload checksum mismatch");
  }

  auto make_obs = [&](const char* p) {
    Observation o;
    o.channels = channels;
    o.height = cfg.height;
    o.width = cfg.width;
    o.data.resize(obs_bytes);
    std::memcpy(o.data.data(), p, obs_bytes);
    return o;
  };
  ds.transitions.reserve(count);
  int episode = 0, t = 0;
  for (std::size_t i = 0; i < count; ++i) {
    const char* rec = buf.data() + i * stride;
    Transition tr;
    tr.obs = make_obs(rec);
    tr.action = static_cast<unsigned char>(rec[obs_bytes]);
    tr.next_obs = make_obs(rec + obs_bytes + 1);
    tr.reward = std::bit_cast<float>(get_u32_le(rec + 2 * obs_bytes + 1));
    tr.done = rec[2 * obs_bytes + 5] != 0;
    tr.episode_id = episode;
    tr.t = t;
    if (tr.action < 0 || tr.action >= kNumActions) {
      throw CorruptDatasetError("transitions.bin: action out of range in record " +
                                std::to_string(i));
    }
    ++t;
    if (tr.done) {
      ++episode;
      t = 0;
    }
    ds.transitions.push_back(std::move(tr));
  }
  return ds;
}

}  // namespace abisim
