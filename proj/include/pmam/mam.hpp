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

#ifndef PMAM_MAM_HPP
#define PMAM_MAM_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "pmam/array.hpp"
#include "pmam/autodiff.hpp"
#include "pmam/encoder.hpp"
#include "pmam/nn.hpp"
#include "pmam/errors.hpp"
#include "pmam/random.hpp"

// Masked-context training: block-wise time masking of latent frames, a
// context transformer with learned relative-position bias, a linear
// predictor, and the self-supervised objectives. Predictions at masked
// frames are scored against prototype means: either an independent
// per-prototype binary cross-entropy on a squashed cosine-similarity logit
// (so several prototypes can be positive at once) or the contrastive
// InfoNCE ablation with a single positive.

namespace pmam::mam {

struct MaskSpec {
  std::vector<std::size_t> indices;  // sorted, unique, within [0, T)

  std::size_t count() const { return indices.size(); }
};

// Repeatedly samples uniform block starts and unions the intervals until at
// least ceil(ratio * T) frames are covered. The overshoot is bounded by
// block - 1 frames.
inline MaskSpec sample_block_mask(Rng& rng, std::size_t t, double ratio, std::size_t block) {
  if (t == 0) throw ParameterError("sample_block_mask: empty sequence");
  if (ratio <= 0.0 || ratio > 1.0) throw ParameterError("sample_block_mask: ratio must be in (0,1]");
  if (block < 1 || block > t) throw ParameterError("sample_block_mask: block must be in [1,T]");
  std::size_t target = static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(t)));
  std::vector<bool> masked(t, false);
  std::size_t covered = 0;
  std::size_t guard = 0;
  while (covered < target) {
    if (++guard > 1000 * t) {
      // unreachable in practice; fill deterministically rather than spin
      for (std::size_t i = 0; i < t && covered < target; ++i)
        if (!masked[i]) {
          masked[i] = true;
          ++covered;
        }
      break;
    }
    std::size_t start = rng.index(t);
    for (std::size_t i = start; i < std::min(start + block, t); ++i)
      if (!masked[i]) {
        masked[i] = true;
        ++covered;
      }
  }
  MaskSpec spec;
  spec.indices.reserve(covered);
  for (std::size_t i = 0; i < t; ++i)
    if (masked[i]) spec.indices.push_back(i);
  return spec;
}

inline MaskSpec full_mask(std::size_t t) {
  MaskSpec spec;
  spec.indices.resize(t);
  for (std::size_t i = 0; i < t; ++i) spec.indices[i] = i;
  return spec;
}

// Masked positions are replaced by the shared learnable token.
inline ad::Ptr apply_mask(const ad::Ptr& latent, const MaskSpec& mask, const ad::Ptr& mask_token) {
  if (mask.indices.empty()) return latent;
  return ad::replace_rows(latent, mask.indices, mask_token);
}

// ---------------------------------------------------------------------------
// Context network.

struct ContextConfig {
  std::size_t n_blocks = 2;
  std::size_t n_heads = 2;
  std::size_t rel_clip = 32;  // relative-position bias reach
  std::size_t ffn_mult = 2;
  double leaky_slope = 0.01;

  void validate(std::size_t d) const {
    if (n_blocks == 0) throw ParameterError("context: need at least one block");
    if (n_heads == 0 || d % n_heads != 0)
      throw ParameterError("context: width must be divisible by head count");
  }
};

inline void init_context_params(ad::ParamStore& params, const ContextConfig& cfg, std::size_t d,
                                Rng& rng) {
  cfg.validate(d);
  params.add("mam.mask_token", nn::small_normal(rng, {d}));
  for (std::size_t b = 0; b < cfg.n_blocks; ++b) {
    std::string prefix = "ctx.block" + std::to_string(b);
    nn::init_transformer_block(params, rng, prefix, d, cfg.ffn_mult);
    params.add(prefix + ".relpos", Array({2 * cfg.rel_clip + 1}));
  }
  nn::init_layer_norm(params, "ctx.ln", d);
  nn::init_linear(params, rng, "mam.pred", d, d);
}

// Self-attention blocks with a learned relative-position bias added to the
// attention logits (shared across heads within a block), residual and
// feedforward sublayers, then a final normalization.
inline ad::Ptr context_forward(const ad::ParamStore& params, const ContextConfig& cfg,
                               const ad::Ptr& masked_latent) {
  std::size_t t = masked_latent->value.dim(0);
  ad::Ptr x = masked_latent;
  for (std::size_t b = 0; b < cfg.n_blocks; ++b) {
    std::string prefix = "ctx.block" + std::to_string(b);
    auto bias = ad::relative_position_bias(params.get(prefix + ".relpos"), t);
    x = nn::transformer_block(params, prefix, x, bias, cfg.n_heads, cfg.leaky_slope);
  }
  return nn::norm(params, "ctx.ln", x);
}

// Linear predictor mapping context representations to the prototype space.
inline ad::Ptr predict(const ad::ParamStore& params, const ad::Ptr& context) {
  return nn::linear(params, "mam.pred", context);
}

// ---------------------------------------------------------------------------
// Objectives.

struct MamLossConfig {
  enum class Kind { PrototypeBce, InfoNce };
  Kind kind = Kind::PrototypeBce;
  double tau = 0.1;
  double leaky_slope = 0.01;

  void validate() const {
    if (tau <= 0.0) throw ParameterError("loss: tau must be positive");
    if (leaky_slope < 0.0) throw ParameterError("loss: leaky slope must be >= 0");
  }
};

// p[t][k] = sigmoid((2 * leaky(cos(c_t, mu_k)) - 1) / tau).
inline ad::Ptr prototype_predictions(const ad::Ptr& preds, const Array& means,
                                     const MamLossConfig& cfg) {
  cfg.validate();
  auto sims = ad::cosine_rows(preds, ad::constant(means));
  auto squashed = ad::scale(ad::add_scalar(ad::scale(ad::leaky_relu(sims, cfg.leaky_slope), 2.0), -1.0),
                            1.0 / cfg.tau);
  return ad::sigmoid(squashed);
}

// Per-(frame, prototype) BCE terms between p and the pseudo labels gamma;
// term (t,k) depends only on c_t, mu_k and gamma[t][k].
inline ad::Ptr prototype_bce_terms(const ad::Ptr& preds, const Array& means, const Array& gamma,
                                   const MamLossConfig& cfg) {
  for (std::size_t i = 0; i < gamma.size(); ++i)
    if (gamma.cat(i) < 0.0 || gamma.cat(i) > 1.0)
      throw ContractError("prototype_bce_terms: gamma entries must lie in [0,1]");
  return ad::binary_cross_entropy(prototype_predictions(preds, means, cfg), gamma);
}

// Single-frame form: returns the summed scalar loss and the K per-prototype
// terms for one context vector.
inline std::pair<ad::Ptr, ad::Ptr> prototype_bce_loss(const ad::Ptr& pred_row, const Array& means,
                                                      const Array& gamma_row,
                                                      const MamLossConfig& cfg) {
  auto pred = pred_row->value.ndim() == 1
                  ? ad::reshape(pred_row, {1, pred_row->value.size()})
                  : pred_row;
  Array g = gamma_row.ndim() == 1 ? gamma_row.reshaped({1, gamma_row.size()}) : gamma_row;
  auto terms = prototype_bce_terms(pred, means, g, cfg);
  return {ad::sum_all(terms), terms};
}

// InfoNCE ablation: one positive prototype per frame (argmax gamma, ties to
// the lowest index), all others negatives. Returns per-frame losses [g].
inline ad::Ptr info_nce_terms(const ad::Ptr& preds, const Array& means, const Array& gamma,
                              const MamLossConfig& cfg) {
  cfg.validate();
  std::size_t g_rows = gamma.dim(0), k = gamma.dim(1);
  std::vector<std::size_t> positives(g_rows, 0);
  for (std::size_t t = 0; t < g_rows; ++t) {
    double best = gamma.cat(t, 0);
    for (std::size_t j = 1; j < k; ++j)
      if (gamma.cat(t, j) > best) {
        best = gamma.cat(t, j);
        positives[t] = j;
      }
  }
  auto logits = ad::scale(ad::cosine_rows(preds, ad::constant(means)), 1.0 / cfg.tau);
  return ad::cross_entropy_rows(logits, positives);
}

inline ad::Ptr info_nce_loss(const ad::Ptr& pred_row, const Array& means, const Array& gamma_row,
                             const MamLossConfig& cfg) {
  auto pred = pred_row->value.ndim() == 1
                  ? ad::reshape(pred_row, {1, pred_row->value.size()})
                  : pred_row;
  Array g = gamma_row.ndim() == 1 ? gamma_row.reshaped({1, gamma_row.size()}) : gamma_row;
  return ad::sum_all(info_nce_terms(pred, means, g, cfg));
}

// ---------------------------------------------------------------------------
// Batch assembly.

struct ClipLossPieces {
  ad::Ptr sum;               // scalar node: sum of this clip's loss terms
  std::size_t n_terms;       // masked frames x K (BCE) or masked frames (InfoNCE)
  std::size_t masked_frames;
};

// Loss terms of one clip given its prediction sequence [T x D]: gather the
// masked rows, compare to prototype means under the configured objective.
inline ClipLossPieces clip_loss_from_predictions(const ad::Ptr& preds, const MaskSpec& mask,
                                                 const Array& gamma, const Array& means,
                                                 const MamLossConfig& cfg) {
  if (gamma.dim(0) != preds->value.dim(0))
    throw DimensionError("clip_loss_from_predictions: gamma rows must match frames");
  ClipLossPieces out;
  out.masked_frames = mask.count();
  if (mask.indices.empty()) {
    out.sum = nullptr;
    out.n_terms = 0;
    return out;
  }
  auto pred_rows = ad::gather_rows(preds, mask.indices);
  std::size_t k = means.dim(0);
  Array gamma_rows({mask.count(), k});
  {
    double* g = gamma_rows.data();
    for (std::size_t i = 0; i < mask.indices.size(); ++i)
      for (std::size_t j = 0; j < k; ++j) g[i * k + j] = gamma.cat(mask.indices[i], j);
  }
  if (cfg.kind == MamLossConfig::Kind::PrototypeBce) {
    out.sum = ad::sum_all(prototype_bce_terms(pred_rows, means, gamma_rows, cfg));
    out.n_terms = mask.count() * k;
  } else {
    out.sum = ad::sum_all(info_nce_terms(pred_rows, means, gamma_rows, cfg));
    out.n_terms = mask.count();
  }
  return out;
}

struct BatchLoss {
  ad::Ptr mean;               // optimizer objective: sum / total terms
  double sum = 0.0;           // raw summed loss over the batch
  std::size_t masked_frames = 0;
  std::size_t n_terms = 0;
};

// Mean-normalized total over a batch of per-clip pieces. An empty mask over
// the whole batch is a degenerate objective and is rejected.
inline BatchLoss combine_batch(const std::vector<ClipLossPieces>& pieces) {
  BatchLoss out;
  ad::Ptr total;
  for (const auto& piece : pieces) {
    out.masked_frames += piece.masked_frames;
    out.n_terms += piece.n_terms;
    if (!piece.sum) continue;
    out.sum += piece.sum->value.cat(0);
    total = total ? ad::add(total, piece.sum) : piece.sum;
  }
  if (!total || out.n_terms == 0)
    throw ContractError("masked loss: no masked frames in the whole batch");
  out.mean = ad::scale(total, 1.0 / static_cast<double>(out.n_terms));
  return out;
}

// Full forward pass for one clip during self-supervised training. When
// masking is disabled (ablation), the latent sequence is left intact and
// every frame contributes to the loss.
inline ClipLossPieces clip_pretrain_loss(const ad::ParamStore& params,
                                         const enc::EncoderConfig& ecfg, const ContextConfig& ccfg,
                                         const MamLossConfig& lcfg, const Array& features,
                                         const MaskSpec& mask, const Array& gamma,
                                         const Array& means, bool mask_enabled) {
  auto latent = enc::encode(params, ecfg, features);
  auto masked = mask_enabled ? apply_mask(latent, mask, params.get("mam.mask_token")) : latent;
  auto context = context_forward(params, ccfg, masked);
  auto preds = predict(params, context);
  return clip_loss_from_predictions(preds, mask, gamma, means, lcfg);
}

}  // namespace pmam::mam

#endif  // PMAM_MAM_HPP
