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

#ifndef PMAM_ENCODER_HPP
#define PMAM_ENCODER_HPP

#include <cstddef>
#include <string>
#include <vector>

#include "pmam/array.hpp"
#include "pmam/autodiff.hpp"
#include "pmam/errors.hpp"
#include "pmam/nn.hpp"
#include "pmam/random.hpp"

// Dual-branch frame-level encoder: a temporal-convolution branch at full time
// resolution in parallel with a transformer branch over time-strided
// frequency-band patches. Transformer tokens are pooled across bands by
// attention against a learnable query, upsampled back to frame rate, and both
// branches are linearly projected to a common width and summed.

namespace pmam::enc {

struct EncoderConfig {
  std::size_t f_bins = 16;                        // spectrogram rows
  std::vector<std::size_t> conv_channels = {16, 16};
  std::size_t conv_kernel = 3;
  std::size_t d_model = 32;                       // transformer branch width
  std::size_t n_blocks = 2;
  std::size_t n_heads = 2;
  std::size_t n_bands = 2;                        // frequency patches
  std::size_t time_stride = 4;                    // u: frames per token
  std::size_t embed_dim = 32;                     // D: merged latent width
  std::size_t max_tokens_t = 64;                  // learned position capacity
  double leaky_slope = 0.01;
  std::size_t ffn_mult = 2;

  std::size_t patch_dim() const { return (f_bins / n_bands) * time_stride; }

  void validate() const {
    if (f_bins == 0 || embed_dim == 0 || d_model == 0)
      throw ParameterError("encoder: zero-sized dimension");
    if (n_bands == 0 || f_bins % n_bands != 0)
      throw ParameterError("encoder: f_bins must be divisible by n_bands");
    if (time_stride < 1) throw ParameterError("encoder: time_stride must be >= 1");
    if (n_heads == 0 || d_model % n_heads != 0)
      throw ParameterError("encoder: d_model must be divisible by n_heads");
    if (conv_channels.empty()) throw ParameterError("encoder: need at least one conv layer");
    if (conv_kernel % 2 == 0) throw ParameterError("encoder: conv kernel must be odd");
    // prototype space must be stable across iterations: iteration-0 pseudo
    // labels live in d_model space, later ones in embed_dim space
    if (d_model != embed_dim)
      throw ParameterError("encoder: d_model must equal embed_dim");
  }
};

namespace detail {

inline std::size_t padded_frames(std::size_t t, std::size_t u) { return ((t + u - 1) / u) * u; }

}  // namespace detail

// Parameter creation order is fixed; all draws come from the provided rng.
inline void init_encoder_params(ad::ParamStore& params, const EncoderConfig& cfg, Rng& rng) {
  cfg.validate();
  std::size_t in_ch = cfg.f_bins;
  for (std::size_t layer = 0; layer < cfg.conv_channels.size(); ++layer) {
    std::size_t out_ch = cfg.conv_channels[layer];
    std::string name = "enc.conv." + std::to_string(layer);
    params.add(name + ".w", nn::xavier(rng, {out_ch, in_ch, cfg.conv_kernel},
                                           in_ch * cfg.conv_kernel, out_ch * cfg.conv_kernel));
    params.add(name + ".b", Array({out_ch}));
    nn::init_layer_norm(params, name + ".ln", out_ch);
    in_ch = out_ch;
  }
  nn::init_linear(params, rng, "enc.proj_conv", cfg.conv_channels.back(), cfg.embed_dim);

  nn::init_linear(params, rng, "enc.tf.embed", cfg.patch_dim(), cfg.d_model);
  params.add("enc.tf.pos", nn::small_normal(rng, {cfg.max_tokens_t, cfg.d_model}));
  params.add("enc.tf.band", nn::small_normal(rng, {cfg.n_bands, cfg.d_model}));
  for (std::size_t b = 0; b < cfg.n_blocks; ++b)
    nn::init_transformer_block(params, rng, "enc.tf.block" + std::to_string(b), cfg.d_model,
                                   cfg.ffn_mult);
  nn::init_layer_norm(params, "enc.tf.ln", cfg.d_model);

  params.add("enc.pool.q", nn::small_normal(rng, {cfg.d_model}));
  params.add("enc.pool.wk", nn::xavier(rng, {cfg.d_model, cfg.d_model}, cfg.d_model, cfg.d_model));
  params.add("enc.pool.wv", nn::xavier(rng, {cfg.d_model, cfg.d_model}, cfg.d_model, cfg.d_model));
  nn::init_linear(params, rng, "enc.pool.out", cfg.d_model, cfg.d_model);

  nn::init_linear(params, rng, "enc.proj_tf", cfg.d_model, cfg.embed_dim);
}

// Stack of same-resolution temporal convolutions over the frequency-channel
// input, each followed by layer normalization and a leaky ReLU.
inline ad::Ptr conv_branch(const ad::ParamStore& params, const EncoderConfig& cfg,
                           const Array& features) {
  if (features.ndim() != 2 || features.dim(0) != cfg.f_bins)
    throw DimensionError("conv_branch: features must be [f_bins x T]");
  ad::Ptr x = ad::constant(transposed(features));  // [T x F]
  for (std::size_t layer = 0; layer < cfg.conv_channels.size(); ++layer) {
    std::string name = "enc.conv." + std::to_string(layer);
    x = ad::conv1d_same(x, params.get(name + ".w"), params.get(name + ".b"));
    x = nn::norm(params, name + ".ln", x);
    x = ad::leaky_relu(x, cfg.leaky_slope);
  }
  return x;  // [T x conv_channels.back()]
}

// Token grid of the transformer branch: frequency bands x strided time
// patches, embedded with learned position and band embeddings and processed
// by the block stack. Token (s, b) sits at row s * n_bands + b. The trailing
// partial patch, when T is not a multiple of the stride, replicates the last
// frame.
inline ad::Ptr transformer_tokens(const ad::ParamStore& params, const EncoderConfig& cfg,
                                  const Array& features) {
  if (features.ndim() != 2 || features.dim(0) != cfg.f_bins)
    throw DimensionError("transformer_tokens: features must be [f_bins x T]");
  std::size_t t = features.dim(1);
  std::size_t steps = detail::padded_frames(t, cfg.time_stride) / cfg.time_stride;
  if (steps > cfg.max_tokens_t)
    throw ParameterError("transformer_tokens: clip longer than max_tokens_t capacity");
  std::size_t band_rows = cfg.f_bins / cfg.n_bands;
  std::size_t p = cfg.patch_dim();

  Array patches({steps * cfg.n_bands, p});
  {
    double* out = patches.data();
    const double* feat = features.cdata();
    for (std::size_t s = 0; s < steps; ++s)
      for (std::size_t b = 0; b < cfg.n_bands; ++b) {
        double* row = out + (s * cfg.n_bands + b) * p;
        std::size_t w = 0;
        for (std::size_t f = b * band_rows; f < (b + 1) * band_rows; ++f)
          for (std::size_t dt = 0; dt < cfg.time_stride; ++dt) {
            std::size_t src = std::min(s * cfg.time_stride + dt, t - 1);
            row[w++] = feat[f * t + src];
          }
      }
  }

  std::vector<std::size_t> pos_idx, band_idx;
  pos_idx.reserve(steps * cfg.n_bands);
  band_idx.reserve(steps * cfg.n_bands);
  for (std::size_t s = 0; s < steps; ++s)
    for (std::size_t b = 0; b < cfg.n_bands; ++b) {
      pos_idx.push_back(s);
      band_idx.push_back(b);
    }

  auto tokens = nn::linear(params, "enc.tf.embed", ad::constant(std::move(patches)));
  tokens = ad::add(tokens, ad::gather_rows(params.get("enc.tf.pos"), pos_idx));
  tokens = ad::add(tokens, ad::gather_rows(params.get("enc.tf.band"), band_idx));
  for (std::size_t b = 0; b < cfg.n_blocks; ++b)
    tokens = nn::transformer_block(params, "enc.tf.block" + std::to_string(b), tokens, nullptr,
                                       cfg.n_heads, cfg.leaky_slope);
  return nn::norm(params, "enc.tf.ln", tokens);
}

// Attention pooling of the band tokens at one time step: the learnable query
// attends over key/value projections of the tokens; returns one [1 x d] row.
// The shared output projection is applied by encode() after concatenation.
inline ad::Ptr freq_attention_pool(const ad::ParamStore& params, const EncoderConfig& cfg,
                                   const ad::Ptr& tokens_at_step) {
  auto query = ad::reshape(params.get("enc.pool.q"), {1, cfg.d_model});
  auto keys = ad::matmul(tokens_at_step, params.get("enc.pool.wk"));
  auto values = ad::matmul(tokens_at_step, params.get("enc.pool.wv"));
  return ad::attention(query, keys, values, nullptr, cfg.n_heads);
}

// Full encoder: conv branch plus the pooled, upsampled transformer branch,
// each projected to embed_dim and merged by summation. Output is [T x D].
inline ad::Ptr encode(const ad::ParamStore& params, const EncoderConfig& cfg,
                      const Array& features) {
  std::size_t t = features.dim(1);
  auto conv = nn::linear(params, "enc.proj_conv", conv_branch(params, cfg, features));

  auto tokens = transformer_tokens(params, cfg, features);
  std::size_t steps = tokens->value.dim(0) / cfg.n_bands;
  std::vector<ad::Ptr> pooled;
  pooled.reserve(steps);
  for (std::size_t s = 0; s < steps; ++s) {
    std::vector<std::size_t> rows(cfg.n_bands);
    for (std::size_t b = 0; b < cfg.n_bands; ++b) rows[b] = s * cfg.n_bands + b;
    pooled.push_back(freq_attention_pool(params, cfg, ad::gather_rows(tokens, rows)));
  }
  auto sequence = nn::linear(params, "enc.pool.out", ad::concat_rows(pooled));
  sequence = ad::upsample_linear(sequence, cfg.time_stride);
  if (sequence->value.dim(0) != t) {
    std::vector<std::size_t> keep(t);
    for (std::size_t i = 0; i < t; ++i) keep[i] = i;
    sequence = ad::gather_rows(sequence, keep);
  }
  auto tf = nn::linear(params, "enc.proj_tf", sequence);
  return ad::add(conv, tf);
}

// Iteration-0 embeddings: transformer-branch tokens, averaged over bands at
// each step, upsampled to frame rate. No conv branch, no learned pooling.
inline Array initial_embeddings(const ad::ParamStore& params, const EncoderConfig& cfg,
                                const Array& features) {
  ad::NoGradGuard guard;
  auto tokens = transformer_tokens(params, cfg, features);
  std::size_t steps = tokens->value.dim(0) / cfg.n_bands;
  Array mean({steps, cfg.d_model});
  {
    double* m = mean.data();
    const double* tok = tokens->value.cdata();
    for (std::size_t s = 0; s < steps; ++s)
      for (std::size_t c = 0; c < cfg.d_model; ++c) {
        double acc = 0.0;
        for (std::size_t b = 0; b < cfg.n_bands; ++b)
          acc += tok[(s * cfg.n_bands + b) * cfg.d_model + c];
        m[s * cfg.d_model + c] = acc / static_cast<double>(cfg.n_bands);
      }
  }
  Array up = ad::upsample_linear_array(mean, cfg.time_stride);
  std::size_t t = features.dim(1);
  if (up.dim(0) == t) return up;
  Array out({t, cfg.d_model});
  double* o = out.data();
  const double* u = up.cdata();
  for (std::size_t i = 0; i < t * cfg.d_model; ++i) o[i] = u[i];
  return out;
}

}  // namespace pmam::enc

#endif  // PMAM_ENCODER_HPP
