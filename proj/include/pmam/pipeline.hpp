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

#ifndef PMAM_PIPELINE_HPP
#define PMAM_PIPELINE_HPP

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <numeric>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include "pmam/checkpoint.hpp"
#include "pmam/config.hpp"
#include "pmam/encoder.hpp"
#include "pmam/evalkit.hpp"
#include "pmam/finetune.hpp"
#include "pmam/mam.hpp"
#include "pmam/optim.hpp"
#include "pmam/proto.hpp"
#include "pmam/synth.hpp"

// Orchestration of the full training laboratory: dataset loading, the
// iterative E/M self-supervised driver, semi-supervised fine-tuning,
// evaluation, pseudo-label analysis, and the seeded experiment grid.
//
// Every stage is deterministic: randomness flows from run.seed through named
// substreams, batch items are processed with per-clip gradient sinks reduced
// in clip order, and no output file contains timestamps.

namespace pmam::pipe {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Dataset access.

struct DatasetClip {
  enum class Kind { Strong, Weak, Unlabeled, Validation };
  std::string id;
  Kind kind;
  Array features;      // F x T
  Array label_matrix;  // C x T (zeros when unannotated)
  std::vector<std::size_t> weak_set;
};

struct LoadedDataset {
  synth::DatasetManifest manifest;
  std::vector<DatasetClip> train;  // strong, weak, unlabeled in manifest order
  std::vector<DatasetClip> validation;

  std::size_t categories() const { return manifest.config.C; }
  std::size_t frames() const { return manifest.config.T; }
};

inline LoadedDataset load_dataset(const fs::path& dir) {
  LoadedDataset ds;
  ds.manifest = synth::load_manifest(dir / "manifest.txt");
  auto push = [&](const std::string& id, DatasetClip::Kind kind, std::vector<DatasetClip>& into) {
    auto clip = synth::load_clip(synth::clip_path(dir, id));
    DatasetClip c;
    c.id = id;
    c.kind = kind;
    c.features = std::move(clip.features);
    c.label_matrix = std::move(clip.label_matrix);
    if (kind == DatasetClip::Kind::Weak) {
      auto it = ds.manifest.weak_sets.find(id);
      if (it == ds.manifest.weak_sets.end()) throw DataError("weak clip without label set: " + id);
      c.weak_set = it->second;
    }
    into.push_back(std::move(c));
  };
  for (const auto& id : ds.manifest.strong) push(id, DatasetClip::Kind::Strong, ds.train);
  for (const auto& id : ds.manifest.weak) push(id, DatasetClip::Kind::Weak, ds.train);
  for (const auto& id : ds.manifest.unlabeled) push(id, DatasetClip::Kind::Unlabeled, ds.train);
  for (const auto& id : ds.manifest.validation) push(id, DatasetClip::Kind::Validation, ds.validation);
  if (ds.train.empty()) throw DataError("dataset has no training clips");
  return ds;
}

// ---------------------------------------------------------------------------
// Deterministic batch parallelism: items are processed by a small pool with a
// static stride partition; outputs land in per-item slots, so scheduling
// cannot reorder anything observable.

template <typename Fn>
inline void parallel_items(std::size_t n, std::size_t n_threads, Fn&& fn) {
  n_threads = std::min(n_threads, n);
  if (n_threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::exception_ptr first_error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  pool.reserve(n_threads);
  for (std::size_t tid = 0; tid < n_threads; ++tid)
    pool.emplace_back([&, tid] {
      try {
        for (std::size_t i = tid; i < n; i += n_threads) fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!first_error) first_error = std::current_exception();
      }
    });
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

// ---------------------------------------------------------------------------
// Model bundle.

struct ModelBundle {
  enc::EncoderConfig ecfg;
  mam::ContextConfig ccfg;
  ad::ParamStore params;
};

// Fresh self-supervised model (encoder + context + predictor + mask token).
inline ModelBundle init_model(const RunConfig& cfg) {
  ModelBundle b;
  b.ecfg = encoder_config(cfg);
  b.ccfg = context_config(cfg);
  Rng rng(derive_seed(cfg.seed, "init"));
  enc::init_encoder_params(b.params, b.ecfg, rng);
  mam::init_context_params(b.params, b.ccfg, b.ecfg.embed_dim, rng);
  return b;
}

// Name prefix of the transformer-branch parameter group (distinct learning
// rate, mirroring the pre-trained-backbone split).
inline constexpr const char* kTransformerGroupPrefix = "enc.tf.";

// ---------------------------------------------------------------------------
// E-step: fit the prototype model on pooled training embeddings and emit
// per-clip responsibilities.

struct EStepResult {
  proto::PrototypeModel model;      // for kmeans: centroids as means, unit variances
  std::vector<Array> gammas;        // one [T x K] matrix per training clip
  bool used_initial_embeddings = false;
};

inline Array embed_clip(const ModelBundle& bundle, const Array& features, bool initial) {
  if (initial) return enc::initial_embeddings(bundle.params, bundle.ecfg, features);
  ad::NoGradGuard guard;
  return enc::encode(bundle.params, bundle.ecfg, features)->value;
}

inline EStepResult e_step(const RunConfig& cfg, const LoadedDataset& ds, const ModelBundle& bundle,
                          std::size_t iteration) {
  EStepResult out;
  out.used_initial_embeddings = iteration <= 1;

  std::vector<Array> embeds(ds.train.size());
  parallel_items(ds.train.size(), cfg.threads, [&](std::size_t i) {
    embeds[i] = embed_clip(bundle, ds.train[i].features, out.used_initial_embeddings);
  });

  std::size_t d = embeds[0].dim(1);
  std::size_t total = 0;
  for (const auto& e : embeds) total += e.dim(0);
  Array pooled({total, d});
  {
    double* p = pooled.data();
    std::size_t off = 0;
    for (const auto& e : embeds) {
      const double* src = e.cdata();
      for (std::size_t i = 0; i < e.size(); ++i) p[off + i] = src[i];
      off += e.size();
    }
  }

  Rng rng(derive_seed(cfg.seed, "estep", iteration));
  Array fit_set = proto::subsample_rows(pooled, cfg.proto_subsample_cap, rng);
  if (fit_set.dim(0) < cfg.proto_k)
    throw DataError("e_step: fewer training frames than prototypes");

  out.gammas.resize(ds.train.size());
  if (cfg.proto_kind == "gmm") {
    out.model = proto::fit_gmm(fit_set, cfg.proto_k, rng, cfg.proto_max_iters, cfg.proto_tol);
    parallel_items(ds.train.size(), cfg.threads, [&](std::size_t i) {
      out.gammas[i] = proto::responsibilities(out.model, embeds[i]);
    });
  } else {
    auto fit = proto::fit_kmeans(fit_set, cfg.proto_k, rng, cfg.proto_max_iters);
    out.model.priors = Array::full({cfg.proto_k}, 1.0 / static_cast<double>(cfg.proto_k));
    out.model.means = fit.model.centroids.clone();
    out.model.variances = Array::full({cfg.proto_k, d}, 1.0);
    parallel_items(ds.train.size(), cfg.threads, [&](std::size_t i) {
      out.gammas[i] = proto::kmeans_one_hot(fit.model, embeds[i]);
    });
  }
  return out;
}

inline void persist_e_step(const EStepResult& e, const LoadedDataset& ds, const fs::path& iter_dir) {
  proto::save_prototype_model(iter_dir / "proto.bin", e.model);
  for (std::size_t i = 0; i < ds.train.size(); ++i)
    proto::save_pseudo_labels(iter_dir / "psl" / (ds.train[i].id + ".psl"), e.gammas[i]);
}

// ---------------------------------------------------------------------------
// M-step: masked-prediction training.

using GradSink = std::unordered_map<const ad::Node*, Array>;

// Reduce per-clip gradient sinks into the parameter store in a fixed order.
inline void reduce_sinks(ad::ParamStore& params, std::vector<GradSink>& sinks, double scale) {
  for (const auto& [name, p] : params.items()) {
    for (auto& sink : sinks) {
      auto it = sink.find(p.get());
      if (it == sink.end()) continue;
      p->ensure_grad().add_scaled(it->second, scale);
    }
  }
}

struct EpochStats {
  double loss_sum = 0.0;
  double loss_mean = 0.0;
  std::size_t masked_frames = 0;
};

// One self-supervised epoch over all training clips. Mask randomness is keyed
// by (seed, iteration, epoch, clip index) so batch partitioning cannot shift
// it; gradients accumulate per clip and reduce in clip order.
inline EpochStats pretrain_epoch(const RunConfig& cfg, const LoadedDataset& ds, ModelBundle& bundle,
                                 AdamW& opt, const std::vector<double>& lr, const EStepResult& e,
                                 std::size_t iteration, std::size_t epoch) {
  mam::MamLossConfig lcfg = loss_config(cfg);
  std::vector<std::size_t> order(ds.train.size());
  std::iota(order.begin(), order.end(), 0);
  {
    Rng shuffle_rng(derive_seed(cfg.seed, "shuffle", iteration, epoch));
    shuffle_rng.shuffle(order);
  }

  EpochStats stats;
  double term_count = 0.0;
  for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
    std::size_t b = std::min(cfg.batch_size, order.size() - start);
    std::vector<mam::MaskSpec> masks(b);
    for (std::size_t i = 0; i < b; ++i) {
      std::size_t clip_index = order[start + i];
      std::size_t t = ds.train[clip_index].features.dim(1);
      if (cfg.mask_enabled) {
        Rng mask_rng(derive_seed(cfg.seed, "mask", iteration, epoch, clip_index));
        masks[i] = mam::sample_block_mask(mask_rng, t, cfg.mask_ratio, cfg.mask_block);
      } else {
        masks[i] = mam::full_mask(t);
      }
    }

    std::vector<GradSink> sinks(b);
    std::vector<double> sums(b, 0.0);
    std::vector<std::size_t> terms(b, 0), masked(b, 0);
    parallel_items(b, cfg.threads, [&](std::size_t i) {
      const auto& clip = ds.train[order[start + i]];
      auto piece = mam::clip_pretrain_loss(bundle.params, bundle.ecfg, bundle.ccfg, lcfg,
                                           clip.features, masks[i], e.gammas[order[start + i]],
                                           e.model.means, cfg.mask_enabled);
      if (piece.sum) {
        sums[i] = piece.sum->value.cat(0);
        terms[i] = piece.n_terms;
        masked[i] = piece.masked_frames;
        ad::BackwardCtx ctx{&sinks[i]};
        ad::backward(piece.sum, &ctx);
      }
    });

    std::size_t batch_terms = 0;
    double batch_sum = 0.0;
    for (std::size_t i = 0; i < b; ++i) {
      batch_terms += terms[i];
      batch_sum += sums[i];
      stats.masked_frames += masked[i];
    }
    if (batch_terms == 0) throw ContractError("pretrain: no masked frames in batch");
    if (!std::isfinite(batch_sum)) throw NumericalError("pretrain: non-finite loss");

    bundle.params.zero_grads();
    reduce_sinks(bundle.params, sinks, 1.0 / static_cast<double>(batch_terms));
    opt.step(bundle.params, lr);

    stats.loss_sum += batch_sum;
    term_count += static_cast<double>(batch_terms);
  }
  stats.loss_mean = term_count > 0.0 ? stats.loss_sum / term_count : 0.0;
  return stats;
}

struct PretrainResult {
  std::vector<fs::path> checkpoints;  // index = iteration (0 = untrained)
};

// The iterative E/M driver. Iteration i fits pseudo labels with the encoder
// after iteration i-1 (iteration 1 uses the averaged initial embeddings),
// then trains the masked model against them; checkpoints and pseudo labels
// are persisted per iteration.
inline PretrainResult run_pretrain(const RunConfig& cfg, const fs::path& dataset_dir,
                                   const fs::path& out_dir) {
  validate_config(cfg);
  auto ds = load_dataset(dataset_dir);
  if (ds.categories() != cfg.data.C)
    throw DataError("dataset category count differs from configuration");
  fs::create_directories(out_dir);
  write_effective_config(out_dir / "effective_config.txt", cfg);

  ModelBundle bundle = init_model(cfg);
  AdamW opt(bundle.params, {cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay});
  auto lr = two_group_lr(bundle.params, kTransformerGroupPrefix, cfg.lr_tf, cfg.lr_rest);
  Rng run_rng(derive_seed(cfg.seed, "pretrain"));

  PretrainResult result;
  auto save = [&](std::size_t iteration) {
    fs::path path = out_dir / ("checkpoint_iter" + std::to_string(iteration) + ".ckpt");
    save_checkpoint(path, make_checkpoint("pretrain_iter" + std::to_string(iteration),
                                          bundle.params, &opt, run_rng.state_string()));
    result.checkpoints.push_back(path);
  };
  save(0);

  for (std::size_t iteration = 1; iteration <= cfg.iterations; ++iteration) {
    fs::path iter_dir = out_dir / ("iter" + std::to_string(iteration));
    EStepResult e = e_step(cfg, ds, bundle, iteration);
    persist_e_step(e, ds, iter_dir);

    std::ofstream log(iter_dir / "train_log.csv");
    log << "epoch,split,loss_sum,loss_mean,masked_frames\n";
    log.precision(17);
    for (std::size_t epoch = 0; epoch < cfg.pretrain_epochs; ++epoch) {
      EpochStats stats = pretrain_epoch(cfg, ds, bundle, opt, lr, e, iteration, epoch);
      log << epoch << ",train," << stats.loss_sum << "," << stats.loss_mean << ","
          << stats.masked_frames << "\n";
    }
    save(iteration);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Evaluation.

inline Array clip_frame_probs(const ad::ParamStore& params, const enc::EncoderConfig& ecfg,
                              const mam::ContextConfig& ccfg, const Array& features) {
  ad::NoGradGuard guard;
  return ft::frame_probs(params, ecfg, ccfg, features)->value;
}

struct MetricsReport {
  double frame_macro_f1 = 0.0;
  double event_f1 = 0.0;
  std::size_t clips = 0;
};

// Post-process and score a set of probability matrices against clip truth.
inline MetricsReport score_probs(const RunConfig& cfg, const std::vector<Array>& probs,
                                 const std::vector<const DatasetClip*>& clips, bool use_median) {
  if (probs.size() != clips.size()) throw ContractError("score_probs: size mismatch");
  std::size_t c_total = cfg.data.C;
  evalkit::FrameF1Accumulator frame_acc(c_total);
  evalkit::EventF1Accumulator event_acc(cfg.event_rho);
  for (std::size_t i = 0; i < probs.size(); ++i) {
    Array post = probs[i].clone();
    std::size_t t_total = post.dim(0);
    if (use_median && cfg.median_window > 1) {
      for (std::size_t c = 0; c < c_total; ++c) {
        std::vector<double> column(t_total);
        for (std::size_t t = 0; t < t_total; ++t) column[t] = post.cat(t, c);
        auto filtered = evalkit::median_filter(column, cfg.median_window);
        for (std::size_t t = 0; t < t_total; ++t) post.at(t, c) = filtered[t];
      }
    }
    Array binary({t_total, c_total});
    for (std::size_t t = 0; t < t_total; ++t)
      for (std::size_t c = 0; c < c_total; ++c)
        binary.at(t, c) = post.cat(t, c) >= cfg.threshold ? 1.0 : 0.0;
    frame_acc.add(binary, transposed(clips[i]->label_matrix));
    event_acc.add(evalkit::binarize_and_extract(post, cfg.threshold),
                  evalkit::events_from_label_matrix(clips[i]->label_matrix));
  }
  MetricsReport report;
  report.frame_macro_f1 = frame_acc.macro_f1();
  report.event_f1 = event_acc.f1();
  report.clips = probs.size();
  return report;
}

inline MetricsReport evaluate_params(const RunConfig& cfg, const ad::ParamStore& params,
                                     const enc::EncoderConfig& ecfg,
                                     const mam::ContextConfig& ccfg,
                                     const std::vector<const DatasetClip*>& clips, bool use_median,
                                     std::vector<Array>* probs_out = nullptr) {
  std::vector<Array> probs(clips.size());
  parallel_items(clips.size(), cfg.threads, [&](std::size_t i) {
    probs[i] = clip_frame_probs(params, ecfg, ccfg, clips[i]->features);
  });
  auto report = score_probs(cfg, probs, clips, use_median);
  if (probs_out) *probs_out = std::move(probs);
  return report;
}

// ---------------------------------------------------------------------------
// Fine-tuning.

struct FinetuneResult {
  fs::path checkpoint;
  double best_val_frame_f1 = 0.0;
};

// Attach a classifier head to a pretraining checkpoint: predictor dropped,
// every other parameter copied, head appended with small uniform weights.
inline ad::ParamStore attach_classifier(const Checkpoint& ckpt, std::size_t n_categories,
                                        std::size_t embed_dim, Rng& rng) {
  ad::ParamStore params = params_from_checkpoint(ckpt);
  ad::ParamStore pruned;
  for (const auto& [name, p] : params.items())
    if (name.rfind("mam.pred.", 0) != 0) pruned.add(name, p->value.clone());
  ft::init_classifier_params(pruned, embed_dim, n_categories, rng);
  return pruned;
}

// Semi-supervised fine-tuning with a mean teacher. For the first
// freeze_epochs only the head trains against cached backbone activations (so
// non-head gradients are exactly zero); afterwards the whole model updates.
// Model selection is by best validation frame macro-F1 at the configured
// threshold (no median filter during selection).
inline FinetuneResult run_finetune(const RunConfig& cfg, const fs::path& dataset_dir,
                                   const fs::path& checkpoint_path, const fs::path& out_dir) {
  validate_config(cfg);
  auto ds = load_dataset(dataset_dir);
  if (ds.manifest.strong.empty() && ds.manifest.weak.empty())
    throw DataError("finetune: no labeled clips in dataset");
  fs::create_directories(out_dir);
  write_effective_config(out_dir / "effective_config.txt", cfg);

  enc::EncoderConfig ecfg = encoder_config(cfg);
  mam::ContextConfig ccfg = context_config(cfg);
  Checkpoint ckpt = load_checkpoint(checkpoint_path);
  Rng head_rng(derive_seed(cfg.seed, "head"));
  ad::ParamStore params = attach_classifier(ckpt, cfg.data.C, ecfg.embed_dim, head_rng);

  ft::TeacherState teacher = ft::make_teacher(params, cfg.ema_decay);

  ad::ParamStore head_view;
  head_view.add_existing("head.w", params.get("head.w"));
  head_view.add_existing("head.b", params.get("head.b"));
  AdamW opt_head(head_view, {cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay});
  AdamW opt_full(params, {cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay});
  auto lr_head = two_group_lr(head_view, kTransformerGroupPrefix, cfg.lr_tf, cfg.lr_rest);
  auto lr_full = two_group_lr(params, kTransformerGroupPrefix, cfg.lr_tf, cfg.lr_rest);

  std::size_t c_total = cfg.data.C;
  std::vector<const DatasetClip*> val_clips;
  for (const auto& c : ds.validation) val_clips.push_back(&c);

  // cached backbone activations for the frozen phase (shared by student and
  // teacher, whose backbones coincide until the first full update)
  std::vector<Array> train_ctx, val_ctx;
  bool cache_valid = false;
  auto build_cache = [&] {
    train_ctx.assign(ds.train.size(), Array());
    val_ctx.assign(ds.validation.size(), Array());
    parallel_items(ds.train.size(), cfg.threads, [&](std::size_t i) {
      train_ctx[i] = ft::context_values(params, ecfg, ccfg, ds.train[i].features);
    });
    parallel_items(ds.validation.size(), cfg.threads, [&](std::size_t i) {
      val_ctx[i] = ft::context_values(params, ecfg, ccfg, ds.validation[i].features);
    });
    cache_valid = true;
  };

  std::ofstream log(out_dir / "metrics_log.csv");
  log << "epoch,sup_loss,cons_loss,val_frame_f1,val_event_f1\n";
  log.precision(17);

  double best_f1 = -1.0;
  ad::ParamStore best_params = params.clone();

  for (std::size_t epoch = 0; epoch < cfg.ft_epochs; ++epoch) {
    bool frozen = epoch < cfg.ft_freeze_epochs;
    if (frozen && !cache_valid) build_cache();
    if (!frozen) cache_valid = false;
    double w = ft::consistency_weight(epoch, cfg.cons_ramp_epochs, cfg.cons_weight_max);

    std::vector<std::size_t> order(ds.train.size());
    std::iota(order.begin(), order.end(), 0);
    {
      Rng shuffle_rng(derive_seed(cfg.seed, "ft_shuffle", epoch));
      shuffle_rng.shuffle(order);
    }

    double sup_total = 0.0, cons_total = 0.0;
    std::size_t sup_clips = 0, cons_clips = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      std::size_t b = std::min(cfg.batch_size, order.size() - start);
      std::vector<GradSink> sinks(b);
      std::vector<double> sup_vals(b, 0.0), cons_vals(b, 0.0);
      std::vector<int> sup_flag(b, 0), cons_flag(b, 0);
      parallel_items(b, cfg.threads, [&](std::size_t i) {
        const auto& clip = ds.train[order[start + i]];
        ad::Ptr student_probs;
        Array teacher_probs;
        if (frozen) {
          const Array& ctx = train_ctx[order[start + i]];
          student_probs = ft::head_probs(params, ad::constant(ctx));
          {
            ad::NoGradGuard guard;
            teacher_probs = ft::head_probs(teacher.params, ad::constant(ctx))->value;
          }
        } else {
          student_probs = ft::frame_probs(params, ecfg, ccfg, clip.features);
          {
            ad::NoGradGuard guard;
            teacher_probs = ft::frame_probs(teacher.params, ecfg, ccfg, clip.features)->value;
          }
        }
        ad::Ptr loss;
        if (clip.kind == DatasetClip::Kind::Strong) {
          loss = ft::strong_supervised_loss(student_probs, clip.label_matrix);
          sup_vals[i] = loss->value.cat(0);
          sup_flag[i] = 1;
        } else if (clip.kind == DatasetClip::Kind::Weak) {
          loss = ft::weak_supervised_loss(student_probs, clip.weak_set, c_total);
          sup_vals[i] = loss->value.cat(0);
          sup_flag[i] = 1;
        }
        if (w > 0.0) {
          auto cons = ft::consistency_loss(student_probs, teacher_probs);
          cons_vals[i] = cons->value.cat(0);
          cons_flag[i] = 1;
          auto weighted = ad::scale(cons, w);
          loss = loss ? ad::add(loss, weighted) : weighted;
        }
        if (loss) {
          if (!std::isfinite(loss->value.cat(0)))
            throw NumericalError("finetune: non-finite loss");
          ad::BackwardCtx ctx{&sinks[i]};
          ad::backward(loss, &ctx);
        }
      });

      std::size_t contributing = 0;
      for (std::size_t i = 0; i < b; ++i) {
        sup_total += sup_vals[i];
        cons_total += cons_vals[i];
        sup_clips += sup_flag[i];
        cons_clips += cons_flag[i];
        if (sup_flag[i] || cons_flag[i]) ++contributing;
      }
      if (contributing == 0) continue;

      params.zero_grads();
      reduce_sinks(params, sinks, 1.0 / static_cast<double>(contributing));
      if (frozen) {
        opt_head.step(head_view, lr_head);
      } else {
        opt_full.step(params, lr_full);
      }
      ft::ema_update(teacher, params, cfg.ema_decay);
    }

    MetricsReport val;
    if (frozen) {
      std::vector<Array> probs(ds.validation.size());
      parallel_items(ds.validation.size(), cfg.threads, [&](std::size_t i) {
        ad::NoGradGuard guard;
        probs[i] = ft::head_probs(params, ad::constant(val_ctx[i]))->value;
      });
      val = score_probs(cfg, probs, val_clips, false);
    } else {
      val = evaluate_params(cfg, params, ecfg, ccfg, val_clips, false);
    }
    log << epoch << "," << (sup_clips ? sup_total / static_cast<double>(sup_clips) : 0.0) << ","
        << (cons_clips ? cons_total / static_cast<double>(cons_clips) : 0.0) << ","
        << val.frame_macro_f1 << "," << val.event_f1 << "\n";

    if (val.frame_macro_f1 > best_f1) {
      best_f1 = val.frame_macro_f1;
      best_params = params.clone();
    }
  }

  if (cfg.ft_epochs == 0) {
    auto val = evaluate_params(cfg, params, ecfg, ccfg, val_clips, false);
    best_f1 = val.frame_macro_f1;
    best_params = params.clone();
  }

  FinetuneResult result;
  result.best_val_frame_f1 = best_f1;
  result.checkpoint = out_dir / "checkpoint_finetuned.ckpt";
  save_checkpoint(result.checkpoint, make_checkpoint("finetuned", best_params));
  return result;
}

// ---------------------------------------------------------------------------
// Evaluate command: metrics report plus a raw probability dump (so that
// post-processing toggles are verifiably post-hoc).

struct EvaluateOutput {
  MetricsReport report;
  fs::path report_path;
  fs::path probs_path;
};

inline EvaluateOutput run_evaluate(const RunConfig& cfg, const fs::path& dataset_dir,
                                   const fs::path& checkpoint_path, const std::string& split,
                                   const fs::path& out_dir) {
  validate_config(cfg);
  auto ds = load_dataset(dataset_dir);
  fs::create_directories(out_dir);

  std::vector<const DatasetClip*> clips;
  if (split == "validation") {
    for (const auto& c : ds.validation) clips.push_back(&c);
  } else if (split == "strong") {
    for (const auto& c : ds.train)
      if (c.kind == DatasetClip::Kind::Strong) clips.push_back(&c);
  } else {
    throw ParameterError("evaluate: split must be validation or strong");
  }
  if (clips.empty()) throw DataError("evaluate: split is empty");

  Checkpoint ckpt = load_checkpoint(checkpoint_path);
  if (ckpt.stage != "finetuned")
    throw LoadError("evaluate: expected a finetuned checkpoint, got stage '" + ckpt.stage + "'");
  ad::ParamStore params = params_from_checkpoint(ckpt);
  enc::EncoderConfig ecfg = encoder_config(cfg);
  mam::ContextConfig ccfg = context_config(cfg);

  std::vector<Array> probs;
  auto report = evaluate_params(cfg, params, ecfg, ccfg, clips, cfg.median_enabled, &probs);

  EvaluateOutput out;
  out.report = report;
  out.probs_path = out_dir / "probs.bin";
  {
    auto os = io::open_out(out.probs_path);
    io::write_u32(os, static_cast<std::uint32_t>(probs.size()));
    for (const auto& p : probs) {
      io::write_u32(os, static_cast<std::uint32_t>(p.dim(0)));
      io::write_u32(os, static_cast<std::uint32_t>(p.dim(1)));
      io::write_f64_block(os, p.cdata(), p.size());
    }
  }
  out.report_path = out_dir / "report.txt";
  {
    auto os = io::open_out(out.report_path);
    os.precision(17);
    os << "split: " << split << "\n";
    os << "clips: " << report.clips << "\n";
    os << "median_filter: " << (cfg.median_enabled ? "on" : "off") << "\n";
    os << "frame_macro_f1: " << report.frame_macro_f1 << "\n";
    os << "event_f1: " << report.event_f1 << "\n";
  }
  {
    auto os = io::open_out(out_dir / "metrics.csv");
    os.precision(17);
    os << "metric,value\nframe_macro_f1," << report.frame_macro_f1 << "\nevent_f1,"
       << report.event_f1 << "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Analysis: prototype/label correlation on annotated validation clips, using
// pseudo labels from a prototype model fit on the training split with the
// given checkpoint's encoder.

struct AnalyzeOutput {
  evalkit::CorrelationMatrix raw;
  evalkit::ReorderedMatrix reordered;
  fs::path out_dir;
};

inline void write_correlation_csv(const fs::path& path, const evalkit::CorrelationMatrix& m) {
  auto os = io::open_out(path);
  os.precision(17);
  std::size_t rows = m.values.dim(0), k = m.values.dim(1);
  os << "row";
  for (std::size_t j = 0; j < k; ++j) os << ",p" << j;
  os << "\n";
  for (std::size_t r = 0; r < rows; ++r) {
    bool none_row = m.includes_none && r + 1 == rows;
    os << (none_row ? std::string("none") : "cat_" + std::to_string(r));
    for (std::size_t j = 0; j < k; ++j) os << "," << m.values.cat(r, j);
    os << "\n";
  }
  os << "zero_variance";
  for (std::size_t j = 0; j < k; ++j) os << "," << (m.zero_variance[j] ? 1 : 0);
  os << "\n";
}

inline AnalyzeOutput run_analyze(const RunConfig& cfg, const fs::path& dataset_dir,
                                 const fs::path& checkpoint_path, const fs::path& out_dir,
                                 std::size_t n_timelines) {
  validate_config(cfg);
  auto ds = load_dataset(dataset_dir);
  if (ds.validation.empty()) throw DataError("analyze: needs annotated validation clips");
  fs::create_directories(out_dir);

  Checkpoint ckpt = load_checkpoint(checkpoint_path);
  ModelBundle bundle;
  bundle.ecfg = encoder_config(cfg);
  bundle.ccfg = context_config(cfg);
  bundle.params = params_from_checkpoint(ckpt);

  // iteration index: initial embeddings only for an untrained checkpoint
  std::size_t iteration = ckpt.stage == "pretrain_iter0" ? 1 : 2;
  EStepResult e = e_step(cfg, ds, bundle, iteration);
  proto::save_prototype_model(out_dir / "proto.bin", e.model);

  // responsibilities of annotated validation clips under the fitted model
  std::vector<Array> val_gammas(ds.validation.size());
  bool initial = e.used_initial_embeddings;
  parallel_items(ds.validation.size(), cfg.threads, [&](std::size_t i) {
    Array embed = embed_clip(bundle, ds.validation[i].features, initial);
    val_gammas[i] = proto::responsibilities(e.model, embed);
  });

  std::size_t total_frames = 0;
  for (const auto& g : val_gammas) total_frames += g.dim(0);
  Array pseudo({total_frames, cfg.proto_k});
  Array truth({total_frames, cfg.data.C});
  {
    std::size_t off = 0;
    for (std::size_t i = 0; i < ds.validation.size(); ++i) {
      const Array& g = val_gammas[i];
      const Array& labels = ds.validation[i].label_matrix;
      for (std::size_t t = 0; t < g.dim(0); ++t) {
        for (std::size_t j = 0; j < cfg.proto_k; ++j) pseudo.at(off + t, j) = g.cat(t, j);
        for (std::size_t c = 0; c < cfg.data.C; ++c) truth.at(off + t, c) = labels.cat(c, t);
      }
      off += g.dim(0);
    }
  }

  AnalyzeOutput out;
  out.out_dir = out_dir;
  out.raw = evalkit::point_biserial_matrix(pseudo, truth, true);
  out.reordered = evalkit::reorder_prototypes(out.raw);
  write_correlation_csv(out_dir / "corr_raw.csv", out.raw);
  write_correlation_csv(out_dir / "corr_reordered.csv", out.reordered.matrix);
  {
    auto os = io::open_out(out_dir / "permutation.csv");
    os << "position,prototype\n";
    for (std::size_t j = 0; j < out.reordered.permutation.size(); ++j)
      os << j << "," << out.reordered.permutation[j] << "\n";
  }
  for (std::size_t i = 0; i < std::min(n_timelines, ds.validation.size()); ++i)
    evalkit::export_timeline(val_gammas[i], ds.validation[i].label_matrix,
                             out_dir / ("timeline_" + ds.validation[i].id + ".csv"));
  return out;
}

// ---------------------------------------------------------------------------
// Experiment grid: Table-style conditions over several seeds with medians.

struct ExperimentCondition {
  std::string name;
  std::size_t iterations;  // 0 = no self-supervised training
  std::string proto_kind;  // gmm | kmeans
  std::string loss_kind;   // bce | infonce
  bool mask_enabled;
};

inline std::vector<ExperimentCondition> default_conditions() {
  return {
      {"iter0", 0, "gmm", "bce", true},
      {"iter1", 1, "gmm", "bce", true},
      {"iter2", 2, "gmm", "bce", true},
      {"iter2_kmeans", 2, "kmeans", "bce", true},
      {"iter2_infonce", 2, "gmm", "infonce", true},
      {"iter2_nomask", 2, "gmm", "bce", false},
  };
}

inline std::vector<ExperimentCondition> full_grid_conditions(std::size_t max_iterations) {
  std::vector<ExperimentCondition> out;
  out.push_back({"iter0", 0, "gmm", "bce", true});
  for (std::size_t it = 1; it <= max_iterations; ++it)
    for (const char* proto : {"gmm", "kmeans"})
      for (const char* loss : {"bce", "infonce"})
        for (bool mask : {true, false}) {
          std::string name = "iter" + std::to_string(it) + "_" + proto + "_" + loss +
                             (mask ? "_mask" : "_nomask");
          out.push_back({name, it, proto, loss, mask});
        }
  return out;
}

struct ExperimentRow {
  std::string condition;
  std::uint64_t seed;
  double frame_f1 = 0.0;
  double event_f1 = 0.0;
  std::string status;  // ok | failed: <reason>
};

struct ExperimentResult {
  std::vector<ExperimentRow> rows;
  fs::path runs_csv;
  fs::path table_csv;
};

inline double median_of(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Runs every condition over exp_seeds seeds. Work shared within a seed:
// one dataset per seed, one pretraining trajectory per (proto, loss, mask)
// group reused for all iteration levels, and a single shared iter0 cell.
// Cell failures are recorded and the grid continues.
inline ExperimentResult run_experiment(const RunConfig& base_cfg, const fs::path& out_dir) {
  validate_config(base_cfg);
  fs::create_directories(out_dir);
  write_effective_config(out_dir / "effective_config.txt", base_cfg);
  auto conditions =
      base_cfg.exp_full_grid ? full_grid_conditions(base_cfg.iterations) : default_conditions();

  ExperimentResult result;
  for (std::size_t s = 0; s < base_cfg.exp_seeds; ++s) {
    RunConfig seed_cfg = base_cfg;
    seed_cfg.seed = base_cfg.seed + s;
    fs::path seed_dir = out_dir / ("seed" + std::to_string(seed_cfg.seed));
    fs::path data_dir = seed_dir / "dataset";

    synth::GenConfig gen = seed_cfg.data;
    gen.seed = seed_cfg.seed;
    synth::build_dataset(gen, data_dir);

    // group pretraining work by (proto, loss, mask)
    std::map<std::string, std::vector<const ExperimentCondition*>> groups;
    for (const auto& cond : conditions) {
      if (cond.iterations == 0) continue;
      std::string key = cond.proto_kind + "_" + cond.loss_kind + (cond.mask_enabled ? "_mask" : "_nomask");
      groups[key].push_back(&cond);
    }

    auto finetune_and_score = [&](const ExperimentCondition& cond, const fs::path& ckpt) {
      ExperimentRow row;
      row.condition = cond.name;
      row.seed = seed_cfg.seed;
      try {
        fs::path ft_dir = seed_dir / ("ft_" + cond.name);
        auto ft = run_finetune(seed_cfg, data_dir, ckpt, ft_dir);
        auto eval = run_evaluate(seed_cfg, data_dir, ft.checkpoint, "validation",
                                 seed_dir / ("eval_" + cond.name));
        row.frame_f1 = eval.report.frame_macro_f1;
        row.event_f1 = eval.report.event_f1;
        row.status = "ok";
      } catch (const Error& err) {
        row.status = std::string("failed: ") + err.what();
      }
      result.rows.push_back(row);
    };

    // shared iter0 cell
    for (const auto& cond : conditions)
      if (cond.iterations == 0) {
        try {
          RunConfig cfg0 = seed_cfg;
          cfg0.iterations = 0;
          auto pre = run_pretrain(cfg0, data_dir, seed_dir / "pre_iter0");
          finetune_and_score(cond, pre.checkpoints.at(0));
        } catch (const Error& err) {
          result.rows.push_back({cond.name, seed_cfg.seed, 0.0, 0.0,
                                 std::string("failed: ") + err.what()});
        }
      }

    for (const auto& [key, conds] : groups) {
      std::size_t max_iter = 0;
      for (const auto* c : conds) max_iter = std::max(max_iter, c->iterations);
      try {
        RunConfig cfg_g = seed_cfg;
        cfg_g.proto_kind = conds.front()->proto_kind;
        cfg_g.loss_kind = conds.front()->loss_kind;
        cfg_g.mask_enabled = conds.front()->mask_enabled;
        cfg_g.iterations = max_iter;
        auto pre = run_pretrain(cfg_g, data_dir, seed_dir / ("pre_" + key));
        for (const auto* cond : conds)
          finetune_and_score(*cond, pre.checkpoints.at(cond->iterations));
      } catch (const Error& err) {
        for (const auto* cond : conds)
          result.rows.push_back({cond->name, seed_cfg.seed, 0.0, 0.0,
                                 std::string("failed: ") + err.what()});
      }
    }
  }

  result.runs_csv = out_dir / "runs.csv";
  {
    auto os = io::open_out(result.runs_csv);
    os.precision(17);
    os << "condition,seed,frame_f1,event_f1,status\n";
    for (const auto& r : result.rows)
      os << r.condition << "," << r.seed << "," << r.frame_f1 << "," << r.event_f1 << ",\""
         << r.status << "\"\n";
  }
  result.table_csv = out_dir / "table.csv";
  {
    auto os = io::open_out(result.table_csv);
    os.precision(17);
    os << "condition,median_frame_f1,median_event_f1,n_ok\n";
    for (const auto& cond : conditions) {
      std::vector<double> f1s, ef1s;
      for (const auto& r : result.rows)
        if (r.condition == cond.name && r.status == "ok") {
          f1s.push_back(r.frame_f1);
          ef1s.push_back(r.event_f1);
        }
      os << cond.name << "," << median_of(f1s) << "," << median_of(ef1s) << "," << f1s.size()
         << "\n";
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// gen-data command.

inline synth::DatasetManifest run_gen_data(const RunConfig& cfg, const fs::path& out_dir) {
  validate_config(cfg);
  synth::GenConfig gen = cfg.data;
  gen.seed = cfg.seed;
  auto manifest = synth::build_dataset(gen, out_dir);
  write_effective_config(out_dir / "effective_config.txt", cfg);
  return manifest;
}

}  // namespace pmam::pipe

#endif  // PMAM_PIPELINE_HPP
