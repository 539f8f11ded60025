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

#ifndef PMAM_SYNTH_HPP
#define PMAM_SYNTH_HPP

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "pmam/array.hpp"
#include "pmam/errors.hpp"
#include "pmam/io.hpp"
#include "pmam/random.hpp"

// Seeded synthetic polyphonic datasets: clips are frequency x time feature
// matrices composed of additive per-category signatures with per-instance
// jitter and background noise. Splits mirror the strong / weak / unlabeled /
// validation regime of domestic sound event detection corpora, scaled down
// to desk size. Overlapping events add their signatures, so overlapping
// frames genuinely lie between single-category clusters in feature space.

namespace pmam::synth {

struct EventInstance {
  std::size_t category;
  std::size_t onset;   // first frame covered
  std::size_t offset;  // exclusive

  bool valid(std::size_t t_total) const { return onset < offset && offset <= t_total; }
};

struct CategoryProfile {
  Array signature;           // F-vector mean feature pattern
  Array signature2;          // optional second mode; empty when absent
  Array signature_variance;  // F-vector per-instance jitter variance
  std::size_t dur_min = 20;  // frames
  std::size_t dur_max = 60;

  bool dual_mode() const { return !signature2.empty(); }
};

struct FeatureClip {
  Array features;      // F x T
  std::vector<EventInstance> events;
  Array label_matrix;  // C x T, entries 0/1
};

struct GenConfig {
  std::size_t C = 4;
  std::size_t F = 16;
  std::size_t T = 200;
  std::size_t n_strong = 20;
  std::size_t n_weak = 20;
  std::size_t n_unlabeled = 200;
  std::size_t n_validation = 100;
  double mean_events = 3.0;
  double noise_std = 0.22;
  double jitter_std = 0.15;
  std::size_t dur_min = 20;
  std::size_t dur_max = 60;
  long dual_mode_category = 0;  // -1 disables the second signature mode
  std::uint64_t seed = 0;
};

struct DatasetManifest {
  GenConfig config;
  std::vector<std::string> strong, weak, unlabeled, validation;
  std::map<std::string, std::vector<std::size_t>> weak_sets;  // clip id -> categories present

  std::vector<std::string> training_ids() const {
    std::vector<std::string> ids = strong;
    ids.insert(ids.end(), weak.begin(), weak.end());
    ids.insert(ids.end(), unlabeled.begin(), unlabeled.end());
    return ids;
  }
};

// Gaussian bumps over the frequency axis, evenly placed per category; the
// dual-mode category gets a second, shifted bump to plant intra-class
// variance.
inline std::vector<CategoryProfile> default_profiles(const GenConfig& cfg) {
  std::vector<CategoryProfile> profiles;
  profiles.reserve(cfg.C);
  double width = static_cast<double>(cfg.F) / 10.0;
  for (std::size_t c = 0; c < cfg.C; ++c) {
    CategoryProfile p;
    p.dur_min = cfg.dur_min;
    p.dur_max = cfg.dur_max;
    double center = static_cast<double>(cfg.F) * (static_cast<double>(c) + 1.0) /
                    (static_cast<double>(cfg.C) + 1.0);
    p.signature = Array({cfg.F});
    double* sig = p.signature.data();
    for (std::size_t f = 0; f < cfg.F; ++f) {
      double d = (static_cast<double>(f) - center) / width;
      sig[f] = 2.0 * std::exp(-0.5 * d * d);
    }
    if (cfg.dual_mode_category >= 0 && c == static_cast<std::size_t>(cfg.dual_mode_category)) {
      // second mode sits well apart (toward the low bins) so the category
      // spans two distinct clusters in feature space
      double center2 = center - 0.7 * static_cast<double>(cfg.F) / (static_cast<double>(cfg.C) + 1.0);
      p.signature2 = Array({cfg.F});
      double* sig2 = p.signature2.data();
      for (std::size_t f = 0; f < cfg.F; ++f) {
        double d = (static_cast<double>(f) - center2) / (width * 0.7);
        sig2[f] = 2.4 * std::exp(-0.5 * d * d);
      }
    }
    p.signature_variance = Array::full({cfg.F}, cfg.jitter_std * cfg.jitter_std);
    profiles.push_back(std::move(p));
  }
  return profiles;
}

// Event count ~ Poisson(mean); categories and onsets uniform; durations
// uniform in the category's range, clipped at T. Overlaps are permitted.
inline std::vector<EventInstance> sample_events(Rng& rng, std::size_t c_total, std::size_t t_total,
                                                double mean_events_per_clip,
                                                const std::vector<CategoryProfile>& profiles) {
  if (mean_events_per_clip < 0.0) throw ParameterError("sample_events: mean must be >= 0");
  if (profiles.size() != c_total) throw DimensionError("sample_events: one profile per category");
  int n = rng.poisson(mean_events_per_clip);
  std::vector<EventInstance> events;
  events.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    EventInstance e;
    e.category = rng.index(c_total);
    e.onset = rng.index(t_total);
    const auto& p = profiles[e.category];
    std::size_t dur = p.dur_min + rng.index(p.dur_max - p.dur_min + 1);
    e.offset = std::min(e.onset + dur, t_total);
    events.push_back(e);
  }
  return events;
}

inline Array rasterize_labels(const std::vector<EventInstance>& events, std::size_t c_total,
                              std::size_t t_total) {
  Array labels({c_total, t_total});
  double* l = labels.data();
  for (const auto& e : events)
    for (std::size_t t = e.onset; t < e.offset; ++t) l[e.category * t_total + t] = 1.0;
  return labels;
}

// features[:, t] = sum over active events of (signature + per-instance
// jitter) + background noise.
inline FeatureClip render_features(Rng& rng, const std::vector<EventInstance>& events,
                                   const std::vector<CategoryProfile>& profiles, double noise_std,
                                   std::size_t f_total, std::size_t t_total) {
  FeatureClip clip;
  clip.events = events;
  clip.features = Array({f_total, t_total});
  double* feat = clip.features.data();

  for (const auto& e : events) {
    const auto& p = profiles.at(e.category);
    const Array& base =
        (p.dual_mode() && rng.uniform() < 0.5) ? p.signature2 : p.signature;
    const double* sig = base.cdata();
    const double* var = p.signature_variance.cdata();
    std::vector<double> instance(f_total);
    for (std::size_t f = 0; f < f_total; ++f)
      instance[f] = sig[f] + rng.normal(0.0, std::sqrt(var[f]));
    for (std::size_t t = e.onset; t < e.offset; ++t)
      for (std::size_t f = 0; f < f_total; ++f) feat[f * t_total + t] += instance[f];
  }
  if (noise_std > 0.0) {
    for (std::size_t i = 0; i < f_total * t_total; ++i) feat[i] += rng.normal(0.0, noise_std);
  }
  clip.label_matrix = rasterize_labels(events, profiles.size(), t_total);
  return clip;
}

// ---------------------------------------------------------------------------
// Clip files. Layout (all integers little-endian):
//   magic "PMAMCLIP", version u32, F u32, T u32, C u32,
//   F*T f64 features (row-major), C*T bytes of 0/1 labels,
//   event count u32, then per event: category u32, onset u32, offset u32.
// Unannotated clips carry zeroed labels and an empty event list.

constexpr std::uint32_t kClipFormatVersion = 1;

inline void save_clip(const std::filesystem::path& path, const FeatureClip& clip,
                      bool with_annotations) {
  auto os = io::open_out(path);
  io::write_magic(os, "PMAMCLIP");
  io::write_u32(os, kClipFormatVersion);
  std::size_t f_total = clip.features.dim(0), t_total = clip.features.dim(1);
  std::size_t c_total = clip.label_matrix.dim(0);
  io::write_u32(os, static_cast<std::uint32_t>(f_total));
  io::write_u32(os, static_cast<std::uint32_t>(t_total));
  io::write_u32(os, static_cast<std::uint32_t>(c_total));
  io::write_f64_block(os, clip.features.cdata(), f_total * t_total);
  if (with_annotations) {
    const double* l = clip.label_matrix.cdata();
    for (std::size_t i = 0; i < c_total * t_total; ++i)
      os.put(l[i] != 0.0 ? '\x01' : '\x00');
    io::write_u32(os, static_cast<std::uint32_t>(clip.events.size()));
    for (const auto& e : clip.events) {
      io::write_u32(os, static_cast<std::uint32_t>(e.category));
      io::write_u32(os, static_cast<std::uint32_t>(e.onset));
      io::write_u32(os, static_cast<std::uint32_t>(e.offset));
    }
  } else {
    for (std::size_t i = 0; i < c_total * t_total; ++i) os.put('\x00');
    io::write_u32(os, 0);
  }
  if (!os) throw IoError("failed writing clip: " + path.string());
}

struct LoadedClip {
  Array features;      // F x T
  Array label_matrix;  // C x T
  std::vector<EventInstance> events;
};

inline LoadedClip load_clip(const std::filesystem::path& path) {
  auto is = io::open_in(path);
  io::expect_magic(is, "PMAMCLIP");
  std::uint32_t version = io::read_u32(is);
  if (version != kClipFormatVersion)
    throw LoadError("unsupported clip format version " + std::to_string(version));
  std::size_t f_total = io::read_u32(is);
  std::size_t t_total = io::read_u32(is);
  std::size_t c_total = io::read_u32(is);
  LoadedClip clip;
  clip.features = Array({f_total, t_total});
  io::read_f64_block(is, clip.features.data(), f_total * t_total);
  clip.label_matrix = Array({c_total, t_total});
  double* l = clip.label_matrix.data();
  for (std::size_t i = 0; i < c_total * t_total; ++i) {
    int b = is.get();
    if (b < 0) throw IoError("unexpected end of clip file: " + path.string());
    l[i] = b ? 1.0 : 0.0;
  }
  std::uint32_t n_events = io::read_u32(is);
  clip.events.reserve(n_events);
  for (std::uint32_t i = 0; i < n_events; ++i) {
    EventInstance e;
    e.category = io::read_u32(is);
    e.onset = io::read_u32(is);
    e.offset = io::read_u32(is);
    clip.events.push_back(e);
  }
  return clip;
}

// ---------------------------------------------------------------------------
// Manifest: structured text, key = value lines plus one [section] per split.
// Weak entries carry the clip-level category set after " : ".

namespace detail {

inline std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace detail

inline void save_manifest(const std::filesystem::path& path, const DatasetManifest& m) {
  auto os = io::open_out(path);
  const GenConfig& c = m.config;
  os << "# pmam dataset manifest\n";
  os << "format = 1\n";
  os << "C = " << c.C << "\n";
  os << "F = " << c.F << "\n";
  os << "T = " << c.T << "\n";
  os << "n_strong = " << c.n_strong << "\n";
  os << "n_weak = " << c.n_weak << "\n";
  os << "n_unlabeled = " << c.n_unlabeled << "\n";
  os << "n_validation = " << c.n_validation << "\n";
  os << "mean_events = " << detail::fmt_double(c.mean_events) << "\n";
  os << "noise_std = " << detail::fmt_double(c.noise_std) << "\n";
  os << "jitter_std = " << detail::fmt_double(c.jitter_std) << "\n";
  os << "dur_min = " << c.dur_min << "\n";
  os << "dur_max = " << c.dur_max << "\n";
  os << "dual_mode_category = " << c.dual_mode_category << "\n";
  os << "seed = " << c.seed << "\n";
  auto section = [&](const char* name, const std::vector<std::string>& ids, bool with_sets) {
    os << "[" << name << "]\n";
    for (const auto& id : ids) {
      os << id;
      if (with_sets) {
        os << " :";
        auto it = m.weak_sets.find(id);
        if (it != m.weak_sets.end()) {
          bool first = true;
          for (std::size_t cat : it->second) {
            os << (first ? " " : ",") << cat;
            first = false;
          }
        }
      }
      os << "\n";
    }
  };
  section("strong", m.strong, false);
  section("weak", m.weak, true);
  section("unlabeled", m.unlabeled, false);
  section("validation", m.validation, false);
  if (!os) throw IoError("failed writing manifest: " + path.string());
}

inline DatasetManifest load_manifest(const std::filesystem::path& path) {
  auto is = io::open_in(path);
  DatasetManifest m;
  std::string line, section;
  auto trim = [](std::string s) {
    std::size_t a = s.find_first_not_of(" \t\r");
    std::size_t b = s.find_last_not_of(" \t\r");
    return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
  };
  while (std::getline(is, line)) {
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    if (line.front() == '[' && line.back() == ']') {
      section = line.substr(1, line.size() - 2);
      continue;
    }
    if (section.empty()) {
      auto eq = line.find('=');
      if (eq == std::string::npos) throw IoError("manifest: malformed line '" + line + "'");
      std::string key = trim(line.substr(0, eq));
      std::string value = trim(line.substr(eq + 1));
      GenConfig& c = m.config;
      if (key == "format") {
        if (value != "1") throw LoadError("manifest: unsupported format " + value);
      } else if (key == "C") c.C = std::stoul(value);
      else if (key == "F") c.F = std::stoul(value);
      else if (key == "T") c.T = std::stoul(value);
      else if (key == "n_strong") c.n_strong = std::stoul(value);
      else if (key == "n_weak") c.n_weak = std::stoul(value);
      else if (key == "n_unlabeled") c.n_unlabeled = std::stoul(value);
      else if (key == "n_validation") c.n_validation = std::stoul(value);
      else if (key == "mean_events") c.mean_events = std::stod(value);
      else if (key == "noise_std") c.noise_std = std::stod(value);
      else if (key == "jitter_std") c.jitter_std = std::stod(value);
      else if (key == "dur_min") c.dur_min = std::stoul(value);
      else if (key == "dur_max") c.dur_max = std::stoul(value);
      else if (key == "dual_mode_category") c.dual_mode_category = std::stol(value);
      else if (key == "seed") c.seed = std::stoull(value);
      else throw IoError("manifest: unknown key '" + key + "'");
      continue;
    }
    // split entry, optionally "id : a,b,c"
    std::string id = line;
    auto colon = line.find(" :");
    std::vector<std::size_t> cats;
    if (colon != std::string::npos) {
      id = trim(line.substr(0, colon));
      std::string rest = trim(line.substr(colon + 2));
      std::stringstream ss(rest);
      std::string tok;
      while (std::getline(ss, tok, ',')) {
        tok = trim(tok);
        if (!tok.empty()) cats.push_back(std::stoul(tok));
      }
    }
    if (section == "strong") m.strong.push_back(id);
    else if (section == "weak") {
      m.weak.push_back(id);
      m.weak_sets[id] = cats;
    } else if (section == "unlabeled") m.unlabeled.push_back(id);
    else if (section == "validation") m.validation.push_back(id);
    else throw IoError("manifest: unknown section '" + section + "'");
  }
  return m;
}

// ---------------------------------------------------------------------------

inline std::string clip_path(const std::filesystem::path& dir, const std::string& id) {
  return (dir / "clips" / (id + ".clip")).string();
}

inline std::string zero_pad(std::size_t n, int width = 4) {
  std::string s = std::to_string(n);
  while (static_cast<int>(s.size()) < width) s.insert(s.begin(), '0');
  return s;
}

// Generates and persists every split. Per-clip randomness comes from a seed
// derived from (master seed, global clip index), so generation order is
// irrelevant and regeneration is byte-identical.
inline DatasetManifest build_dataset(const GenConfig& cfg, const std::filesystem::path& out_dir) {
  DatasetManifest m;
  m.config = cfg;
  auto profiles = default_profiles(cfg);
  std::filesystem::create_directories(out_dir / "clips");

  std::size_t global_index = 0;
  auto make_split = [&](const char* prefix, std::size_t count, std::vector<std::string>& ids,
                        bool annotated, bool weak_labels) {
    for (std::size_t i = 0; i < count; ++i, ++global_index) {
      std::string id = std::string(prefix) + "_" + zero_pad(i);
      Rng rng(derive_seed(cfg.seed, "data", global_index));
      auto events = sample_events(rng, cfg.C, cfg.T, cfg.mean_events, profiles);
      FeatureClip clip = render_features(rng, events, profiles, cfg.noise_std, cfg.F, cfg.T);
      save_clip(clip_path(out_dir, id), clip, annotated);
      if (annotated) {
        // human-readable sidecar of events
        auto sidecar = io::open_out(out_dir / "clips" / (id + ".events.txt"));
        for (const auto& e : clip.events)
          sidecar << e.category << " " << e.onset << " " << e.offset << "\n";
      }
      if (weak_labels) {
        std::vector<std::size_t> cats;
        for (const auto& e : clip.events)
          if (std::find(cats.begin(), cats.end(), e.category) == cats.end())
            cats.push_back(e.category);
        std::sort(cats.begin(), cats.end());
        m.weak_sets[id] = cats;
      }
      ids.push_back(id);
    }
  };
  make_split("strong", cfg.n_strong, m.strong, true, false);
  make_split("weak", cfg.n_weak, m.weak, false, true);
  make_split("unlabeled", cfg.n_unlabeled, m.unlabeled, false, false);
  make_split("validation", cfg.n_validation, m.validation, true, false);
  save_manifest(out_dir / "manifest.txt", m);
  return m;
}

}  // namespace pmam::synth

#endif  // PMAM_SYNTH_HPP
