#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <set>

#include "abisim/experience.hpp"
#include "abisim/io.hpp"
#include "support/oracles.hpp"

using namespace abisim;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("abisim_test_" + name);
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST_CASE("uniform action frequencies") {
  const auto ds = collect_random(GridConfig{}, 1000, 3);
  REQUIRE(ds.size() == 1000);
  std::array<int, 4> counts{};
  for (const auto& t : ds.transitions) counts[std::size_t(t.action)]++;
  const double sd = std::sqrt(1000 * 0.25 * 0.75);
  for (int c : counts) CHECK(std::abs(c - 250.0) <= 4 * sd);
}

TEST_CASE("empty collection") {
  const auto ds = collect_random(GridConfig{}, 0, 3);
  CHECK(ds.empty());
}

TEST_CASE("stored transitions replay through the reference move rule") {
  const auto ds = collect_random(GridConfig{}, 2000, 9);
  for (const auto& t : ds.transitions) {
    const auto before = oracle_ref::decode(t.obs);
    const auto after = oracle_ref::decode(t.next_obs);
    const auto [x, y] = oracle_ref::move(before, t.action);
    REQUIRE(x == after.ax);
    REQUIRE(y == after.ay);
    REQUIRE(before.walls == after.walls);
    REQUIRE(t.reward == ((x == before.gx && y == before.gy) ? 0.0f : -1.0f));
  }
}

TEST_CASE("episodes reset at the horizon") {
  GridConfig cfg;
  const auto ds = collect_random(cfg, 3 * std::size_t(cfg.episode_len), 1);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    CHECK(ds[i].t == int(i) % cfg.episode_len);
    CHECK(ds[i].episode_id == int(i) / cfg.episode_len);
    CHECK(ds[i].done == (ds[i].t + 1 == cfg.episode_len));
  }
}

TEST_CASE("sample_batch") {
  const auto ds = collect_random(GridConfig{}, 200, 2);
  SUBCASE("full batch is a permutation") {
    auto idx = sample_batch(ds, ds.size(), 7);
    std::sort(idx.begin(), idx.end());
    for (std::size_t i = 0; i < idx.size(); ++i) CHECK(idx[i] == i);
  }
  SUBCASE("same seed, same batch") { CHECK(sample_batch(ds, 32, 4) == sample_batch(ds, 32, 4)); }
  SUBCASE("oversized batch is rejected") {
    CHECK_THROWS_AS(sample_batch(ds, ds.size() + 1, 4), InsufficientDataError);
  }
  SUBCASE("single draws are uniform") {
    Rng rng(1);
    std::vector<int> hits(ds.size(), 0);
    const int draws = 40000;
    for (int i = 0; i < draws; ++i) hits[sample_batch(ds, 1, rng)[0]]++;
    const double expected = double(draws) / double(ds.size());
    double chi2 = 0.0;
    for (int h : hits) chi2 += (h - expected) * (h - expected) / expected;
    // 199 degrees of freedom; the 0.9999 quantile is about 280.
    CHECK(chi2 < 280.0);
  }
}

TEST_CASE("sample_state_pairs") {
  const auto ds = collect_random(GridConfig{}, 100, 2);
  SUBCASE("batch of two gives identity or swap") {
    Rng rng(3);
    for (int r = 0; r < 50; ++r) {
      const auto pb = sample_state_pairs(ds, 2, rng);
      const bool identity = pb.partner[0] == 0 && pb.partner[1] == 1;
      const bool swap = pb.partner[0] == 1 && pb.partner[1] == 0;
      CHECK((identity || swap));
    }
  }
  SUBCASE("pair marginals match sample_batch marginals") {
    Rng a(5), b(6);
    std::vector<double> first(ds.size(), 0), second(ds.size(), 0), plain(ds.size(), 0);
    const int rounds = 10000;
    for (int r = 0; r < rounds; ++r) {
      const auto pb = sample_state_pairs(ds, 4, a);
      for (std::size_t k = 0; k < 4; ++k) {
        first[pb.indices[k]] += 1;
        second[pb.indices[pb.partner[k]]] += 1;
      }
      for (auto i : sample_batch(ds, 4, b)) plain[i] += 1;
    }
    const double expected = rounds * 4.0 / double(ds.size());
    for (std::size_t i = 0; i < ds.size(); ++i) {
      CHECK(std::abs(first[i] - expected) < 5 * std::sqrt(expected));
      CHECK(std::abs(second[i] - expected) < 5 * std::sqrt(expected));
      CHECK(std::abs(plain[i] - expected) < 5 * std::sqrt(expected));
    }
  }
}

TEST_CASE("k-step samples stay inside one episode") {
  GridConfig cfg;
  const auto ds = collect_random(cfg, 500, 4);
  Rng rng(2);
  const auto batch = sample_k_step(ds, 64, 5, rng);
  for (const auto& s : batch) {
    const std::size_t i = std::size_t(s.start - ds.transitions.data());
    REQUIRE(i + 4 < ds.size());
    CHECK(ds[i + 4].episode_id == s.start->episode_id);
    CHECK(s.future == &ds[i + 4].next_obs);
  }
  CHECK_THROWS_AS(sample_k_step(ds, 4, cfg.episode_len + 1, rng), ConfigError);
  CHECK_THROWS_AS(sample_k_step(ds, 4, 0, rng), ConfigError);
}

TEST_CASE("dataset roundtrip and corruption") {
  GridConfig cfg;
  cfg.n_obstacles = 5;
  const auto ds = collect_random(cfg, 1000, 8);
  const fs::path dir = scratch_dir("roundtrip");
  save_dataset(ds, dir);
  const auto back = load_dataset(dir);
  CHECK(back.transitions == ds.transitions);
  CHECK(back.env_config == cfg);
  CHECK(read_json(dir / "manifest.json").at("env_config").get<GridConfig>() == cfg);

  SUBCASE("truncated payload") {
    fs::resize_file(dir / "transitions.bin", fs::file_size(dir / "transitions.bin") - 10);
    CHECK_THROWS_AS(load_dataset(dir), CorruptDatasetError);
  }
  SUBCASE("declared count disagrees with payload") {
    auto m = read_json(dir / "manifest.json");
    m["count"] = 999;
    write_json(dir / "manifest.json", m);
    CHECK_THROWS_AS(load_dataset(dir), CorruptDatasetError);
  }
  SUBCASE("bad magic") {
    auto m = read_json(dir / "manifest.json");
    m["format"] = "something-else";
    write_json(dir / "manifest.json", m);
    CHECK_THROWS_AS(load_dataset(dir), CorruptDatasetError);
  }
  SUBCASE("flipped payload byte") {
    std::fstream f(dir / "transitions.bin", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(17);
    f.put(char(0x55));
    f.close();
    CHECK_THROWS_AS(load_dataset(dir), CorruptDatasetError);
  }
  fs::remove_all(dir);
}

TEST_CASE("shards merge with renumbered episodes") {
  GridConfig cfg;
  const auto a = collect_random(cfg, 100, 1), b = collect_random(cfg, 100, 2);
  const auto m = merge_shards({a, b});
  CHECK(m.size() == 200);
  std::set<int> ids;
  for (const auto& t : m.transitions) ids.insert(t.episode_id);
  const int per_shard = (100 + cfg.episode_len - 1) / cfg.episode_len;
  CHECK(ids.size() == std::size_t(2 * per_shard));
  GridConfig other = cfg;
  other.n_obstacles = 3;
  CHECK_THROWS_AS(merge_shards({a, collect_random(other, 10, 1)}), ConfigError);
}
