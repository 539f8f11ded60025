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

// Command-line front end: gen-data, pretrain, finetune, evaluate, analyze,
// experiment. Exit codes: 0 success, 2 config error, 3 data error,
// 4 numerical failure.

#include <CLI11.hpp>
#include <cstdint>
#include <iostream>
#include <string>

#include "pmam/pipeline.hpp"

namespace {

struct GlobalFlags {
  std::string config_path;
  std::string preset = "desk";
  std::string out;
  bool has_seed = false;
  std::uint64_t seed = 0;
  bool has_iterations = false;
  std::size_t iterations = 0;
  std::string loss;   // bce | infonce
  std::string proto;  // gmm | kmeans
  bool no_mask = false;
};

pmam::RunConfig build_config(const GlobalFlags& flags) {
  pmam::RunConfig cfg;
  pmam::apply_preset(cfg, flags.preset);
  if (!flags.config_path.empty()) cfg = pmam::parse_config_file(flags.config_path, cfg);
  if (flags.has_seed) cfg.seed = flags.seed;
  if (flags.has_iterations) cfg.iterations = flags.iterations;
  if (!flags.loss.empty()) cfg.loss_kind = flags.loss;
  if (!flags.proto.empty()) cfg.proto_kind = flags.proto;
  if (flags.no_mask) cfg.mask_enabled = false;
  pmam::validate_config(cfg);
  return cfg;
}

void add_global_flags(CLI::App& app, GlobalFlags& flags) {
  app.add_option("--config", flags.config_path, "configuration file (key = value lines)");
  app.add_option("--preset", flags.preset, "desk or paper stage schedule")
      ->check(CLI::IsMember({"desk", "paper"}));
  app.add_option_function<std::uint64_t>(
         "--seed", [&flags](const std::uint64_t& v) { flags.has_seed = true; flags.seed = v; },
         "master seed override");
  app.add_option_function<std::size_t>(
         "--iterations",
         [&flags](const std::size_t& v) { flags.has_iterations = true; flags.iterations = v; },
         "self-supervised E/M iterations");
  app.add_option("--loss", flags.loss, "self-supervised objective")
      ->check(CLI::IsMember({"bce", "infonce"}));
  app.add_option("--proto", flags.proto, "prototype model")
      ->check(CLI::IsMember({"gmm", "kmeans"}));
  app.add_flag("--no-mask", flags.no_mask, "disable masking during self-supervised training");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"prototype-based masked audio modeling laboratory"};
  app.require_subcommand(1);

  GlobalFlags flags;
  add_global_flags(app, flags);

  std::string data_dir, ckpt_path, split = "validation";
  std::size_t n_timelines = 3;

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  gen->add_option("--out", flags.out, "output directory")->required();

  auto* pre = app.add_subcommand("pretrain", "iterative self-supervised training");
  pre->add_option("--data", data_dir, "dataset directory")->required();
  pre->add_option("--out", flags.out, "output directory")->required();

  auto* fin = app.add_subcommand("finetune", "semi-supervised fine-tuning");
  fin->add_option("--data", data_dir, "dataset directory")->required();
  fin->add_option("--ckpt", ckpt_path, "pretraining checkpoint")->required();
  fin->add_option("--out", flags.out, "output directory")->required();

  auto* eval = app.add_subcommand("evaluate", "score a finetuned checkpoint");
  eval->add_option("--data", data_dir, "dataset directory")->required();
  eval->add_option("--ckpt", ckpt_path, "finetuned checkpoint")->required();
  eval->add_option("--out", flags.out, "output directory")->required();
  eval->add_option("--split", split, "validation or strong");

  auto* ana = app.add_subcommand("analyze", "pseudo-label correlation analysis");
  ana->add_option("--data", data_dir, "dataset directory")->required();
  ana->add_option("--ckpt", ckpt_path, "checkpoint whose encoder embeds the clips")->required();
  ana->add_option("--out", flags.out, "output directory")->required();
  ana->add_option("--timelines", n_timelines, "number of per-clip timelines to export");

  auto* exp = app.add_subcommand("experiment", "seeded condition grid with medians");
  exp->add_option("--out", flags.out, "output directory")->required();
  std::size_t exp_seeds = 0;
  exp->add_option("--seeds", exp_seeds, "seeds per condition");
  bool full_grid = false;
  exp->add_flag("--full-grid", full_grid, "run the full condition cross-product");

  CLI11_PARSE(app, argc, argv);

  try {
    pmam::RunConfig cfg = build_config(flags);

    if (gen->parsed()) {
      auto manifest = pmam::pipe::run_gen_data(cfg, flags.out);
      std::cout << "dataset written to " << flags.out << "\n"
                << "strong " << manifest.strong.size() << ", weak " << manifest.weak.size()
                << ", unlabeled " << manifest.unlabeled.size() << ", validation "
                << manifest.validation.size() << "\n";
    } else if (pre->parsed()) {
      auto result = pmam::pipe::run_pretrain(cfg, data_dir, flags.out);
      for (std::size_t i = 0; i < result.checkpoints.size(); ++i)
        std::cout << "checkpoint iter" << i << ": " << result.checkpoints[i].string() << "\n";
    } else if (fin->parsed()) {
      auto result = pmam::pipe::run_finetune(cfg, data_dir, ckpt_path, flags.out);
      std::cout << "finetuned checkpoint: " << result.checkpoint.string() << "\n"
                << "best validation frame macro-F1: " << result.best_val_frame_f1 << "\n";
    } else if (eval->parsed()) {
      auto result = pmam::pipe::run_evaluate(cfg, data_dir, ckpt_path, split, flags.out);
      std::cout << "frame_macro_f1: " << result.report.frame_macro_f1 << "\n"
                << "event_f1: " << result.report.event_f1 << "\n"
                << "report: " << result.report_path.string() << "\n";
    } else if (ana->parsed()) {
      auto result = pmam::pipe::run_analyze(cfg, data_dir, ckpt_path, flags.out, n_timelines);
      std::cout << "correlation matrices and timelines written to "
                << result.out_dir.string() << "\n";
    } else if (exp->parsed()) {
      if (exp_seeds > 0) cfg.exp_seeds = exp_seeds;
      if (full_grid) cfg.exp_full_grid = true;
      auto result = pmam::pipe::run_experiment(cfg, flags.out);
      std::cout << "runs: " << result.runs_csv.string() << "\n"
                << "table: " << result.table_csv.string() << "\n";
    }
    return 0;
  } catch (const pmam::ParameterError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const pmam::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const pmam::IoError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const pmam::LoadError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const pmam::NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
