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

#ifndef PMAM_CONFIG_HPP
#define PMAM_CONFIG_HPP

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "pmam/encoder.hpp"
#include "pmam/errors.hpp"
#include "pmam/io.hpp"
#include "pmam/mam.hpp"
#include "pmam/synth.hpp"

// Run configuration: a flat, schema-validated key space persisted as
// structured text ("key = value" lines). Unknown keys are rejected; every key
// carries a documented default. CLI flags override file values; the effective
// config is echoed into the output directory of each command.

namespace pmam {

struct RunConfig {
  synth::GenConfig data;          // data.seed is always overwritten by run.seed
  enc::EncoderConfig encoder;
  mam::ContextConfig context;

  std::size_t proto_k = 12;
  std::string proto_kind = "gmm";  // gmm | kmeans
  std::size_t proto_max_iters = 50;
  double proto_tol = 1e-6;
  std::size_t proto_subsample_cap = 50000;
  bool proto_refit_from_scratch = true;  // documented stance; warm start unimplemented

  double mask_ratio = 0.75;
  std::size_t mask_block = 10;
  bool mask_enabled = true;
  double tau = 0.1;
  double leaky_slope = 0.01;
  std::string loss_kind = "bce";  // bce | infonce
  std::size_t pretrain_epochs = 15;
  std::size_t iterations = 2;

  std::size_t ft_epochs = 20;
  std::size_t ft_freeze_epochs = 5;
  double cons_weight_max = 2.0;
  std::size_t cons_ramp_epochs = 10;
  double ema_decay = 0.99;

  double lr_tf = 1e-3;
  double lr_rest = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.01;
  std::size_t batch_size = 8;

  std::size_t median_window = 7;
  double threshold = 0.5;
  double event_rho = 0.5;
  bool median_enabled = true;

  std::uint64_t seed = 0;
  std::size_t threads = 2;

  std::size_t exp_seeds = 3;
  bool exp_full_grid = false;
};

namespace cfgdetail {

inline std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

inline double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    double d = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing");
    return d;
  } catch (...) {
    throw ParameterError("config: '" + key + "' expects a number, got '" + v + "'");
  }
}

inline std::size_t parse_size(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    long long d = std::stoll(v, &pos);
    if (pos != v.size() || d < 0) throw std::invalid_argument("bad");
    return static_cast<std::size_t>(d);
  } catch (...) {
    throw ParameterError("config: '" + key + "' expects a nonnegative integer, got '" + v + "'");
  }
}

inline long parse_long(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    long d = std::stol(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("bad");
    return d;
  } catch (...) {
    throw ParameterError("config: '" + key + "' expects an integer, got '" + v + "'");
  }
}

inline std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    unsigned long long d = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("bad");
    return d;
  } catch (...) {
    throw ParameterError("config: '" + key + "' expects an unsigned integer, got '" + v + "'");
  }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ParameterError("config: '" + key + "' expects true/false, got '" + v + "'");
}

inline std::vector<std::size_t> parse_size_list(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  std::stringstream ss(v);
  std::string tok;
  while (std::getline(ss, tok, ',')) out.push_back(parse_size(key, tok));
  if (out.empty()) throw ParameterError("config: '" + key + "' expects a comma list");
  return out;
}

inline std::string fmt_size_list(const std::vector<std::size_t>& v) {
  std::ostringstream os;
  for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
  return os.str();
}

}  // namespace cfgdetail

struct ConfigKey {
  std::string name;
  std::string doc;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

inline const std::vector<ConfigKey>& config_schema() {
  using namespace cfgdetail;
  static const std::vector<ConfigKey> schema = {
      // dataset
      {"data.categories", "number of event categories C",
       [](const RunConfig& c) { return std::to_string(c.data.C); },
       [](RunConfig& c, const std::string& v) { c.data.C = parse_size("data.categories", v); }},
      {"data.f_bins", "feature rows per frame (frequency bins)",
       [](const RunConfig& c) { return std::to_string(c.data.F); },
       [](RunConfig& c, const std::string& v) { c.data.F = parse_size("data.f_bins", v); }},
      {"data.frames", "frames per clip T",
       [](const RunConfig& c) { return std::to_string(c.data.T); },
       [](RunConfig& c, const std::string& v) { c.data.T = parse_size("data.frames", v); }},
      {"data.n_strong", "strongly labeled training clips",
       [](const RunConfig& c) { return std::to_string(c.data.n_strong); },
       [](RunConfig& c, const std::string& v) { c.data.n_strong = parse_size("data.n_strong", v); }},
      {"data.n_weak", "weakly labeled training clips",
       [](const RunConfig& c) { return std::to_string(c.data.n_weak); },
       [](RunConfig& c, const std::string& v) { c.data.n_weak = parse_size("data.n_weak", v); }},
      {"data.n_unlabeled", "unlabeled training clips",
       [](const RunConfig& c) { return std::to_string(c.data.n_unlabeled); },
       [](RunConfig& c, const std::string& v) { c.data.n_unlabeled = parse_size("data.n_unlabeled", v); }},
      {"data.n_validation", "validation clips (strong labels)",
       [](const RunConfig& c) { return std::to_string(c.data.n_validation); },
       [](RunConfig& c, const std::string& v) { c.data.n_validation = parse_size("data.n_validation", v); }},
      {"data.mean_events", "Poisson mean of events per clip",
       [](const RunConfig& c) { return fmt_double(c.data.mean_events); },
       [](RunConfig& c, const std::string& v) { c.data.mean_events = parse_double("data.mean_events", v); }},
      {"data.noise_std", "background noise standard deviation",
       [](const RunConfig& c) { return fmt_double(c.data.noise_std); },
       [](RunConfig& c, const std::string& v) { c.data.noise_std = parse_double("data.noise_std", v); }},
      {"data.jitter_std", "per-instance signature jitter standard deviation",
       [](const RunConfig& c) { return fmt_double(c.data.jitter_std); },
       [](RunConfig& c, const std::string& v) { c.data.jitter_std = parse_double("data.jitter_std", v); }},
      {"data.dur_min", "minimum event duration in frames",
       [](const RunConfig& c) { return std::to_string(c.data.dur_min); },
       [](RunConfig& c, const std::string& v) { c.data.dur_min = parse_size("data.dur_min", v); }},
      {"data.dur_max", "maximum event duration in frames",
       [](const RunConfig& c) { return std::to_string(c.data.dur_max); },
       [](RunConfig& c, const std::string& v) { c.data.dur_max = parse_size("data.dur_max", v); }},
      {"data.dual_mode_category", "category with two signature modes (-1 disables)",
       [](const RunConfig& c) { return std::to_string(c.data.dual_mode_category); },
       [](RunConfig& c, const std::string& v) { c.data.dual_mode_category = parse_long("data.dual_mode_category", v); }},
      // encoder
      {"enc.conv_channels", "comma list of conv branch channel widths",
       [](const RunConfig& c) { return fmt_size_list(c.encoder.conv_channels); },
       [](RunConfig& c, const std::string& v) { c.encoder.conv_channels = parse_size_list("enc.conv_channels", v); }},
      {"enc.conv_kernel", "temporal conv kernel size (odd)",
       [](const RunConfig& c) { return std::to_string(c.encoder.conv_kernel); },
       [](RunConfig& c, const std::string& v) { c.encoder.conv_kernel = parse_size("enc.conv_kernel", v); }},
      {"enc.d_model", "transformer branch width (must equal enc.embed_dim)",
       [](const RunConfig& c) { return std::to_string(c.encoder.d_model); },
       [](RunConfig& c, const std::string& v) { c.encoder.d_model = parse_size("enc.d_model", v); }},
      {"enc.n_blocks", "transformer branch depth",
       [](const RunConfig& c) { return std::to_string(c.encoder.n_blocks); },
       [](RunConfig& c, const std::string& v) { c.encoder.n_blocks = parse_size("enc.n_blocks", v); }},
      {"enc.n_heads", "attention heads in the encoder branch",
       [](const RunConfig& c) { return std::to_string(c.encoder.n_heads); },
       [](RunConfig& c, const std::string& v) { c.encoder.n_heads = parse_size("enc.n_heads", v); }},
      {"enc.n_bands", "frequency bands for patching",
       [](const RunConfig& c) { return std::to_string(c.encoder.n_bands); },
       [](RunConfig& c, const std::string& v) { c.encoder.n_bands = parse_size("enc.n_bands", v); }},
      {"enc.time_stride", "frames per transformer token (upsampling factor u)",
       [](const RunConfig& c) { return std::to_string(c.encoder.time_stride); },
       [](RunConfig& c, const std::string& v) { c.encoder.time_stride = parse_size("enc.time_stride", v); }},
      {"enc.embed_dim", "merged latent width D",
       [](const RunConfig& c) { return std::to_string(c.encoder.embed_dim); },
       [](RunConfig& c, const std::string& v) { c.encoder.embed_dim = parse_size("enc.embed_dim", v); }},
      {"enc.max_tokens_t", "learned position capacity (max tokens along time)",
       [](const RunConfig& c) { return std::to_string(c.encoder.max_tokens_t); },
       [](RunConfig& c, const std::string& v) { c.encoder.max_tokens_t = parse_size("enc.max_tokens_t", v); }},
      // context network
      {"ctx.n_blocks", "context network depth",
       [](const RunConfig& c) { return std::to_string(c.context.n_blocks); },
       [](RunConfig& c, const std::string& v) { c.context.n_blocks = parse_size("ctx.n_blocks", v); }},
      {"ctx.n_heads", "context network attention heads",
       [](const RunConfig& c) { return std::to_string(c.context.n_heads); },
       [](RunConfig& c, const std::string& v) { c.context.n_heads = parse_size("ctx.n_heads", v); }},
      {"ctx.rel_clip", "relative-position bias clipping distance",
       [](const RunConfig& c) { return std::to_string(c.context.rel_clip); },
       [](RunConfig& c, const std::string& v) { c.context.rel_clip = parse_size("ctx.rel_clip", v); }},
      // prototypes
      {"proto.k", "number of prototypes (mixture components)",
       [](const RunConfig& c) { return std::to_string(c.proto_k); },
       [](RunConfig& c, const std::string& v) { c.proto_k = parse_size("proto.k", v); }},
      {"proto.kind", "prototype model: gmm or kmeans",
       [](const RunConfig& c) { return c.proto_kind; },
       [](RunConfig& c, const std::string& v) { c.proto_kind = v; }},
      {"proto.max_iters", "EM / Lloyd iteration cap",
       [](const RunConfig& c) { return std::to_string(c.proto_max_iters); },
       [](RunConfig& c, const std::string& v) { c.proto_max_iters = parse_size("proto.max_iters", v); }},
      {"proto.tol", "relative log-likelihood improvement stop threshold",
       [](const RunConfig& c) { return fmt_double(c.proto_tol); },
       [](RunConfig& c, const std::string& v) { c.proto_tol = parse_double("proto.tol", v); }},
      {"proto.subsample_cap", "max frames used to fit the prototype model",
       [](const RunConfig& c) { return std::to_string(c.proto_subsample_cap); },
       [](RunConfig& c, const std::string& v) { c.proto_subsample_cap = parse_size("proto.subsample_cap", v); }},
      {"proto.refit_from_scratch", "refit the prototype model each iteration",
       [](const RunConfig& c) { return c.proto_refit_from_scratch ? "true" : "false"; },
       [](RunConfig& c, const std::string& v) { c.proto_refit_from_scratch = parse_bool("proto.refit_from_scratch", v); }},
      // masked audio model
      {"mam.mask_ratio", "fraction of frames to mask, in (0,1]",
       [](const RunConfig& c) { return fmt_double(c.mask_ratio); },
       [](RunConfig& c, const std::string& v) { c.mask_ratio = parse_double("mam.mask_ratio", v); }},
      {"mam.mask_block", "block size of the mask sampler",
       [](const RunConfig& c) { return std::to_string(c.mask_block); },
       [](RunConfig& c, const std::string& v) { c.mask_block = parse_size("mam.mask_block", v); }},
      {"mam.mask_enabled", "apply masking during self-supervised training",
       [](const RunConfig& c) { return c.mask_enabled ? "true" : "false"; },
       [](RunConfig& c, const std::string& v) { c.mask_enabled = parse_bool("mam.mask_enabled", v); }},
      {"mam.tau", "logit temperature of the self-supervised losses",
       [](const RunConfig& c) { return fmt_double(c.tau); },
       [](RunConfig& c, const std::string& v) { c.tau = parse_double("mam.tau", v); }},
      {"mam.leaky_slope", "leaky ReLU slope (losses and activations)",
       [](const RunConfig& c) { return fmt_double(c.leaky_slope); },
       [](RunConfig& c, const std::string& v) { c.leaky_slope = parse_double("mam.leaky_slope", v); }},
      {"mam.loss", "self-supervised objective: bce or infonce",
       [](const RunConfig& c) { return c.loss_kind; },
       [](RunConfig& c, const std::string& v) { c.loss_kind = v; }},
      {"mam.epochs", "epochs per self-supervised iteration",
       [](const RunConfig& c) { return std::to_string(c.pretrain_epochs); },
       [](RunConfig& c, const std::string& v) { c.pretrain_epochs = parse_size("mam.epochs", v); }},
      {"mam.iterations", "number of E/M iterations",
       [](const RunConfig& c) { return std::to_string(c.iterations); },
       [](RunConfig& c, const std::string& v) { c.iterations = parse_size("mam.iterations", v); }},
      // fine-tuning
      {"ft.epochs", "fine-tuning epochs",
       [](const RunConfig& c) { return std::to_string(c.ft_epochs); },
       [](RunConfig& c, const std::string& v) { c.ft_epochs = parse_size("ft.epochs", v); }},
      {"ft.freeze_epochs", "initial epochs training only the classifier head",
       [](const RunConfig& c) { return std::to_string(c.ft_freeze_epochs); },
       [](RunConfig& c, const std::string& v) { c.ft_freeze_epochs = parse_size("ft.freeze_epochs", v); }},
      {"ft.cons_weight_max", "maximum mean-teacher consistency weight",
       [](const RunConfig& c) { return fmt_double(c.cons_weight_max); },
       [](RunConfig& c, const std::string& v) { c.cons_weight_max = parse_double("ft.cons_weight_max", v); }},
      {"ft.cons_ramp_epochs", "epochs over which the consistency weight ramps up",
       [](const RunConfig& c) { return std::to_string(c.cons_ramp_epochs); },
       [](RunConfig& c, const std::string& v) { c.cons_ramp_epochs = parse_size("ft.cons_ramp_epochs", v); }},
      {"ft.ema_decay", "mean-teacher EMA decay",
       [](const RunConfig& c) { return fmt_double(c.ema_decay); },
       [](RunConfig& c, const std::string& v) { c.ema_decay = parse_double("ft.ema_decay", v); }},
      // optimizer
      {"opt.lr_tf", "learning rate for the transformer branch group",
       [](const RunConfig& c) { return fmt_double(c.lr_tf); },
       [](RunConfig& c, const std::string& v) { c.lr_tf = parse_double("opt.lr_tf", v); }},
      {"opt.lr_rest", "learning rate for all remaining parameters",
       [](const RunConfig& c) { return fmt_double(c.lr_rest); },
       [](RunConfig& c, const std::string& v) { c.lr_rest = parse_double("opt.lr_rest", v); }},
      {"opt.beta1", "AdamW beta1",
       [](const RunConfig& c) { return fmt_double(c.beta1); },
       [](RunConfig& c, const std::string& v) { c.beta1 = parse_double("opt.beta1", v); }},
      {"opt.beta2", "AdamW beta2",
       [](const RunConfig& c) { return fmt_double(c.beta2); },
       [](RunConfig& c, const std::string& v) { c.beta2 = parse_double("opt.beta2", v); }},
      {"opt.eps", "AdamW epsilon",
       [](const RunConfig& c) { return fmt_double(c.adam_eps); },
       [](RunConfig& c, const std::string& v) { c.adam_eps = parse_double("opt.eps", v); }},
      {"opt.weight_decay", "decoupled weight decay",
       [](const RunConfig& c) { return fmt_double(c.weight_decay); },
       [](RunConfig& c, const std::string& v) { c.weight_decay = parse_double("opt.weight_decay", v); }},
      {"opt.batch_size", "clips per optimizer step",
       [](const RunConfig& c) { return std::to_string(c.batch_size); },
       [](RunConfig& c, const std::string& v) { c.batch_size = parse_size("opt.batch_size", v); }},
      // evaluation
      {"eval.median_window", "median filter window (odd)",
       [](const RunConfig& c) { return std::to_string(c.median_window); },
       [](RunConfig& c, const std::string& v) { c.median_window = parse_size("eval.median_window", v); }},
      {"eval.threshold", "frame activity threshold",
       [](const RunConfig& c) { return fmt_double(c.threshold); },
       [](RunConfig& c, const std::string& v) { c.threshold = parse_double("eval.threshold", v); }},
      {"eval.event_rho", "intersection fraction for event matching",
       [](const RunConfig& c) { return fmt_double(c.event_rho); },
       [](RunConfig& c, const std::string& v) { c.event_rho = parse_double("eval.event_rho", v); }},
      {"eval.median_enabled", "apply the median filter before thresholding",
       [](const RunConfig& c) { return c.median_enabled ? "true" : "false"; },
       [](RunConfig& c, const std::string& v) { c.median_enabled = parse_bool("eval.median_enabled", v); }},
      // run
      {"run.seed", "master seed; every random stream derives from it",
       [](const RunConfig& c) { return std::to_string(c.seed); },
       [](RunConfig& c, const std::string& v) { c.seed = parse_u64("run.seed", v); }},
      {"run.threads", "worker threads for batch-parallel passes",
       [](const RunConfig& c) { return std::to_string(c.threads); },
       [](RunConfig& c, const std::string& v) { c.threads = parse_size("run.threads", v); }},
      // experiment driver
      {"exp.seeds", "seeds per experiment condition",
       [](const RunConfig& c) { return std::to_string(c.exp_seeds); },
       [](RunConfig& c, const std::string& v) { c.exp_seeds = parse_size("exp.seeds", v); }},
      {"exp.full_grid", "run the full condition cross-product",
       [](const RunConfig& c) { return c.exp_full_grid ? "true" : "false"; },
       [](RunConfig& c, const std::string& v) { c.exp_full_grid = parse_bool("exp.full_grid", v); }},
  };
  return schema;
}

inline void set_config_key(RunConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& entry : config_schema())
    if (entry.name == key) {
      entry.set(cfg, value);
      return;
    }
  throw ParameterError("config: unknown key '" + key + "'");
}

// Stage schedule and mixture size at the published scale; model dims stay at
// desk scale (the pre-trained backbone is out of scope).
inline void apply_preset(RunConfig& cfg, const std::string& preset) {
  if (preset == "desk") return;  // the defaults
  if (preset == "paper") {
    cfg.encoder.conv_channels = {16, 32, 64, 128, 128, 128, 128};
    cfg.context.n_blocks = 3;
    cfg.proto_k = 30;
    cfg.pretrain_epochs = 30;
    cfg.iterations = 2;
    cfg.ft_epochs = 45;
    cfg.ft_freeze_epochs = 15;
    cfg.batch_size = 18;
    cfg.lr_tf = 1e-5;
    cfg.lr_rest = 2e-4;
    cfg.ema_decay = 0.999;
    return;
  }
  throw ParameterError("unknown preset '" + preset + "' (expected desk or paper)");
}

inline RunConfig parse_config_file(const std::filesystem::path& path, RunConfig base = {}) {
  auto is = io::open_in(path);
  std::string line;
  std::size_t line_no = 0;
  auto trim = [](std::string s) {
    std::size_t a = s.find_first_not_of(" \t\r");
    std::size_t b = s.find_last_not_of(" \t\r");
    return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
  };
  while (std::getline(is, line)) {
    ++line_no;
    auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ParameterError("config line " + std::to_string(line_no) + ": expected key = value");
    set_config_key(base, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return base;
}

inline void write_effective_config(const std::filesystem::path& path, const RunConfig& cfg) {
  auto os = io::open_out(path);
  os << "# effective configuration (key = value; '#' starts a comment)\n";
  for (const auto& entry : config_schema())
    os << entry.name << " = " << entry.get(cfg) << "  # " << entry.doc << "\n";
  if (!os) throw IoError("failed writing config: " + path.string());
}

inline enc::EncoderConfig encoder_config(const RunConfig& cfg);

inline void validate_config(const RunConfig& cfg) {
  if (cfg.data.C == 0 || cfg.data.F == 0 || cfg.data.T == 0)
    throw ParameterError("config: dataset dimensions must be positive");
  encoder_config(cfg).validate();
  cfg.context.validate(cfg.encoder.embed_dim);
  if (cfg.data.dur_min < 1 || cfg.data.dur_max < cfg.data.dur_min || cfg.data.dur_max > cfg.data.T)
    throw ParameterError("config: event duration range invalid");
  if (cfg.data.dual_mode_category >= static_cast<long>(cfg.data.C))
    throw ParameterError("config: dual-mode category out of range");
  if (cfg.proto_kind != "gmm" && cfg.proto_kind != "kmeans")
    throw ParameterError("config: proto.kind must be gmm or kmeans");
  if (cfg.proto_k == 0) throw ParameterError("config: proto.k must be positive");
  std::size_t train_frames =
      (cfg.data.n_strong + cfg.data.n_weak + cfg.data.n_unlabeled) * cfg.data.T;
  if (cfg.proto_k > train_frames)
    throw ParameterError("config: proto.k exceeds the number of training frames");
  if (cfg.mask_ratio <= 0.0 || cfg.mask_ratio > 1.0)
    throw ParameterError("config: mam.mask_ratio must lie in (0,1]");
  if (cfg.mask_block < 1 || cfg.mask_block > cfg.data.T)
    throw ParameterError("config: mam.mask_block must lie in [1, data.frames]");
  if (cfg.tau <= 0.0) throw ParameterError("config: mam.tau must be positive");
  if (cfg.leaky_slope < 0.0) throw ParameterError("config: mam.leaky_slope must be >= 0");
  if (cfg.loss_kind != "bce" && cfg.loss_kind != "infonce")
    throw ParameterError("config: mam.loss must be bce or infonce");
  if (cfg.ft_freeze_epochs > cfg.ft_epochs)
    throw ParameterError("config: ft.freeze_epochs cannot exceed ft.epochs");
  if (cfg.ema_decay < 0.0 || cfg.ema_decay > 1.0)
    throw ParameterError("config: ft.ema_decay must lie in [0,1]");
  if (cfg.lr_tf <= 0.0 || cfg.lr_rest <= 0.0)
    throw ParameterError("config: learning rates must be positive");
  if (cfg.batch_size < 1) throw ParameterError("config: opt.batch_size must be >= 1");
  if (cfg.median_window % 2 == 0 || cfg.median_window < 1)
    throw ParameterError("config: eval.median_window must be odd");
  if (cfg.threshold <= 0.0 || cfg.threshold >= 1.0)
    throw ParameterError("config: eval.threshold must lie in (0,1)");
  if (cfg.event_rho <= 0.0 || cfg.event_rho > 1.0)
    throw ParameterError("config: eval.event_rho must lie in (0,1]");
  if (cfg.threads < 1) throw ParameterError("config: run.threads must be >= 1");
  if (cfg.exp_seeds < 1) throw ParameterError("config: exp.seeds must be >= 1");
}

// Loss/encoder/context views with the shared leaky slope applied.
inline mam::MamLossConfig loss_config(const RunConfig& cfg) {
  mam::MamLossConfig lcfg;
  lcfg.kind = cfg.loss_kind == "bce" ? mam::MamLossConfig::Kind::PrototypeBce
                                     : mam::MamLossConfig::Kind::InfoNce;
  lcfg.tau = cfg.tau;
  lcfg.leaky_slope = cfg.leaky_slope;
  return lcfg;
}

inline enc::EncoderConfig encoder_config(const RunConfig& cfg) {
  enc::EncoderConfig ecfg = cfg.encoder;
  ecfg.f_bins = cfg.data.F;
  ecfg.leaky_slope = cfg.leaky_slope;
  // position capacity must cover the clip length
  std::size_t steps = (cfg.data.T + ecfg.time_stride - 1) / ecfg.time_stride;
  if (ecfg.max_tokens_t < steps) ecfg.max_tokens_t = steps;
  return ecfg;
}

inline mam::ContextConfig context_config(const RunConfig& cfg) {
  mam::ContextConfig ccfg = cfg.context;
  ccfg.leaky_slope = cfg.leaky_slope;
  return ccfg;
}

}  // namespace pmam

#endif  // PMAM_CONFIG_HPP
