// Copyright 2026 The pmam-lab Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <catch_amalgamated.hpp>
#include <filesystem>
#include <set>

#include "pmam/io.hpp"
#include "pmam/synth.hpp"

using namespace pmam;
using namespace pmam::synth;

namespace {

std::filesystem::path temp_dir(const std::string& tag) {
  auto p = std::filesystem::temp_directory_path() / ("pmam_test_" + tag);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

GenConfig tiny_config() {
  GenConfig cfg;
  cfg.C = 3;
  cfg.F = 8;
  cfg.T = 50;
  cfg.n_strong = 4;
  cfg.n_weak = 4;
  cfg.n_unlabeled = 10;
  cfg.n_validation = 5;
  cfg.dur_min = 5;
  cfg.dur_max = 15;
  cfg.seed = 99;
  return cfg;
}

}  // namespace

TEST_CASE("sample_events trivial and statistical behaviour") {
  GenConfig cfg = tiny_config();
  auto profiles = default_profiles(cfg);
  Rng rng(1);
  REQUIRE(sample_events(rng, cfg.C, cfg.T, 0.0, profiles).empty());

  long total = 0;
  for (int i = 0; i < 10000; ++i) {
    auto events = sample_events(rng, cfg.C, cfg.T, 3.0, profiles);
    total += static_cast<long>(events.size());
    for (const auto& e : events) {
      REQUIRE(e.valid(cfg.T));
      REQUIRE(e.category < cfg.C);
    }
  }
  double mean = static_cast<double>(total) / 10000.0;
  REQUIRE(mean > 2.9);
  REQUIRE(mean < 3.1);
}

TEST_CASE("render_features composes additively") {
  GenConfig cfg = tiny_config();
  cfg.jitter_std = 0.0;
  cfg.dual_mode_category = -1;
  auto profiles = default_profiles(cfg);

  SECTION("no events, no noise: all zero") {
    Rng rng(2);
    auto clip = render_features(rng, {}, profiles, 0.0, cfg.F, cfg.T);
    for (std::size_t i = 0; i < clip.features.size(); ++i) REQUIRE(clip.features.cat(i) == 0.0);
    for (std::size_t i = 0; i < clip.label_matrix.size(); ++i) REQUIRE(clip.label_matrix.cat(i) == 0.0);
  }

  SECTION("single event without jitter reproduces the signature") {
    Rng rng(3);
    std::vector<EventInstance> events{{1, 10, 20}};
    auto clip = render_features(rng, events, profiles, 0.0, cfg.F, cfg.T);
    for (std::size_t f = 0; f < cfg.F; ++f) {
      REQUIRE(clip.features.cat(f, 15) == profiles[1].signature.cat(f));
      REQUIRE(clip.features.cat(f, 9) == 0.0);
      REQUIRE(clip.features.cat(f, 20) == 0.0);
    }
    REQUIRE(clip.label_matrix.cat(1, 15) == 1.0);
    REQUIRE(clip.label_matrix.cat(0, 15) == 0.0);
  }

  SECTION("overlapping events sum their signatures") {
    Rng rng(4);
    std::vector<EventInstance> events{{0, 5, 25}, {2, 15, 35}};
    auto clip = render_features(rng, events, profiles, 0.0, cfg.F, cfg.T);
    for (std::size_t f = 0; f < cfg.F; ++f) {
      double expected = profiles[0].signature.cat(f) + profiles[2].signature.cat(f);
      REQUIRE(clip.features.cat(f, 20) == expected);
    }
    REQUIRE(clip.label_matrix.cat(0, 20) == 1.0);
    REQUIRE(clip.label_matrix.cat(2, 20) == 1.0);
  }
}

TEST_CASE("label matrix equals brute-force interval union") {
  GenConfig cfg = tiny_config();
  auto profiles = default_profiles(cfg);
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    auto events = sample_events(rng, cfg.C, cfg.T, 4.0, profiles);
    auto clip = render_features(rng, events, profiles, cfg.noise_std, cfg.F, cfg.T);
    for (std::size_t c = 0; c < cfg.C; ++c)
      for (std::size_t t = 0; t < cfg.T; ++t) {
        bool covered = false;
        for (const auto& e : events)
          if (e.category == c && e.onset <= t && t < e.offset) covered = true;
        REQUIRE(clip.label_matrix.cat(c, t) == (covered ? 1.0 : 0.0));
      }
  }
}

TEST_CASE("polyphony is actually exercised at mean two events") {
  GenConfig cfg = tiny_config();
  cfg.T = 200;
  cfg.dur_min = 20;
  cfg.dur_max = 60;
  auto profiles = default_profiles(cfg);
  Rng rng(6);
  std::size_t overlap_frames = 0, total_frames = 0;
  for (int trial = 0; trial < 50; ++trial) {
    auto events = sample_events(rng, cfg.C, cfg.T, 2.0, profiles);
    auto labels = rasterize_labels(events, cfg.C, cfg.T);
    for (std::size_t t = 0; t < cfg.T; ++t) {
      int active = 0;
      for (std::size_t c = 0; c < cfg.C; ++c) active += labels.cat(c, t) != 0.0;
      overlap_frames += active >= 2;
      ++total_frames;
    }
  }
  REQUIRE(overlap_frames > 0);
  REQUIRE(total_frames > 0);
}

TEST_CASE("clip files round-trip") {
  GenConfig cfg = tiny_config();
  auto profiles = default_profiles(cfg);
  Rng rng(7);
  auto events = sample_events(rng, cfg.C, cfg.T, 3.0, profiles);
  auto clip = render_features(rng, events, profiles, cfg.noise_std, cfg.F, cfg.T);
  auto dir = temp_dir("clip_roundtrip");

  save_clip(dir / "a.clip", clip, true);
  auto loaded = load_clip(dir / "a.clip");
  REQUIRE(loaded.features.bit_equal(clip.features));
  REQUIRE(loaded.label_matrix.bit_equal(clip.label_matrix));
  REQUIRE(loaded.events.size() == clip.events.size());
  for (std::size_t i = 0; i < clip.events.size(); ++i) {
    REQUIRE(loaded.events[i].category == clip.events[i].category);
    REQUIRE(loaded.events[i].onset == clip.events[i].onset);
    REQUIRE(loaded.events[i].offset == clip.events[i].offset);
  }

  save_clip(dir / "b.clip", clip, false);
  auto stripped = load_clip(dir / "b.clip");
  REQUIRE(stripped.features.bit_equal(clip.features));
  REQUIRE(stripped.events.empty());
  for (std::size_t i = 0; i < stripped.label_matrix.size(); ++i)
    REQUIRE(stripped.label_matrix.cat(i) == 0.0);
}

TEST_CASE("build_dataset produces the requested disjoint splits") {
  GenConfig cfg = tiny_config();
  auto dir = temp_dir("dataset_splits");
  auto m = build_dataset(cfg, dir);
  REQUIRE(m.strong.size() == cfg.n_strong);
  REQUIRE(m.weak.size() == cfg.n_weak);
  REQUIRE(m.unlabeled.size() == cfg.n_unlabeled);
  REQUIRE(m.validation.size() == cfg.n_validation);

  std::set<std::string> all;
  for (const auto& v : {m.strong, m.weak, m.unlabeled, m.validation})
    for (const auto& id : v) all.insert(id);
  REQUIRE(all.size() == cfg.n_strong + cfg.n_weak + cfg.n_unlabeled + cfg.n_validation);

  for (const auto& id : m.strong) REQUIRE(std::filesystem::exists(clip_path(dir, id)));

  // weak clips: category set recorded, no frame annotations persisted
  for (const auto& id : m.weak) {
    auto clip = load_clip(clip_path(dir, id));
    REQUIRE(clip.events.empty());
    for (std::size_t i = 0; i < clip.label_matrix.size(); ++i)
      REQUIRE(clip.label_matrix.cat(i) == 0.0);
    REQUIRE(m.weak_sets.count(id) == 1);
  }

  // weak label set equals the categories of the regenerated events
  auto profiles = default_profiles(cfg);
  for (std::size_t i = 0; i < m.weak.size(); ++i) {
    std::size_t global_index = cfg.n_strong + i;
    Rng rng(derive_seed(cfg.seed, "data", global_index));
    auto events = sample_events(rng, cfg.C, cfg.T, cfg.mean_events, profiles);
    std::set<std::size_t> want;
    for (const auto& e : events) want.insert(e.category);
    std::set<std::size_t> got(m.weak_sets[m.weak[i]].begin(), m.weak_sets[m.weak[i]].end());
    REQUIRE(got == want);
  }
}

TEST_CASE("regeneration with the same seed is byte-identical") {
  GenConfig cfg = tiny_config();
  auto d1 = temp_dir("dataset_rerun_a");
  auto d2 = temp_dir("dataset_rerun_b");
  build_dataset(cfg, d1);
  build_dataset(cfg, d2);
  for (auto& entry : std::filesystem::recursive_directory_iterator(d1)) {
    if (!entry.is_regular_file()) continue;
    auto rel = std::filesystem::relative(entry.path(), d1);
    REQUIRE(io::slurp(entry.path()) == io::slurp(d2 / rel));
  }

  cfg.seed = 100;
  auto d3 = temp_dir("dataset_rerun_c");
  build_dataset(cfg, d3);
  REQUIRE(io::slurp(d1 / "clips" / "strong_0000.clip") !=
          io::slurp(d3 / "clips" / "strong_0000.clip"));
}

TEST_CASE("manifest round-trips through text") {
  GenConfig cfg = tiny_config();
  auto dir = temp_dir("manifest_roundtrip");
  auto m = build_dataset(cfg, dir);
  auto loaded = load_manifest(dir / "manifest.txt");
  REQUIRE(loaded.strong == m.strong);
  REQUIRE(loaded.weak == m.weak);
  REQUIRE(loaded.unlabeled == m.unlabeled);
  REQUIRE(loaded.validation == m.validation);
  REQUIRE(loaded.weak_sets == m.weak_sets);
  REQUIRE(loaded.config.C == cfg.C);
  REQUIRE(loaded.config.T == cfg.T);
  REQUIRE(loaded.config.seed == cfg.seed);
  REQUIRE(loaded.config.noise_std == cfg.noise_std);
}
