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

#include "pmam/encoder.hpp"
#include "pmam/optim.hpp"
#include "pmam/random.hpp"
#include "support/oracles.hpp"

using namespace pmam;
using namespace pmam::enc;
using pmam::testing::max_grad_rel_err;
using pmam::testing::random_array;

namespace {

EncoderConfig tiny_cfg() {
  EncoderConfig cfg;
  cfg.f_bins = 4;
  cfg.conv_channels = {5, 6};
  cfg.d_model = 6;
  cfg.embed_dim = 6;
  cfg.n_blocks = 1;
  cfg.n_heads = 2;
  cfg.n_bands = 2;
  cfg.time_stride = 2;
  cfg.max_tokens_t = 16;
  return cfg;
}

std::vector<ad::Ptr> all_params(const ad::ParamStore& store) {
  std::vector<ad::Ptr> out;
  for (const auto& [name, p] : store.items()) out.push_back(p);
  return out;
}

}  // namespace

TEST_CASE("encoder config validation") {
  EncoderConfig cfg = tiny_cfg();
  REQUIRE_NOTHROW(cfg.validate());
  cfg.n_bands = 3;  // 4 % 3 != 0
  REQUIRE_THROWS_AS(cfg.validate(), ParameterError);
  cfg = tiny_cfg();
  cfg.d_model = 8;  // != embed_dim
  REQUIRE_THROWS_AS(cfg.validate(), ParameterError);
  cfg = tiny_cfg();
  cfg.time_stride = 0;
  REQUIRE_THROWS_AS(cfg.validate(), ParameterError);
}

TEST_CASE("conv branch is zero on zero input with zero biases") {
  EncoderConfig cfg = tiny_cfg();
  ad::ParamStore params;
  Rng rng(1);
  init_encoder_params(params, cfg, rng);
  // biases are zero-initialized by construction; weights stay random
  auto out = conv_branch(params, cfg, Array({cfg.f_bins, 7}));
  REQUIRE(out->value.shape() == Shape{7, cfg.conv_channels.back()});
  for (std::size_t i = 0; i < out->value.size(); ++i) REQUIRE(out->value.cat(i) == 0.0);
}

TEST_CASE("conv branch preserves time resolution for any T") {
  EncoderConfig cfg = tiny_cfg();
  ad::ParamStore params;
  Rng rng(2);
  init_encoder_params(params, cfg, rng);
  for (std::size_t t : {1u, 3u, 10u, 17u}) {
    auto out = conv_branch(params, cfg, random_array(rng, {cfg.f_bins, t}));
    REQUIRE(out->value.shape() == Shape{t, cfg.conv_channels.back()});
  }
}

TEST_CASE("conv branch gradient check through two layers") {
  EncoderConfig cfg;
  cfg.f_bins = 8;
  cfg.conv_channels = {4, 4};
  cfg.d_model = 8;
  cfg.embed_dim = 8;
  cfg.n_bands = 2;
  cfg.n_heads = 2;
  cfg.n_blocks = 1;
  cfg.time_stride = 2;
  ad::ParamStore params;
  Rng rng(3);
  init_encoder_params(params, cfg, rng);
  Array features = random_array(rng, {8, 10});
  std::vector<ad::Ptr> conv_params;
  for (const auto& [name, p] : params.items())
    if (name.rfind("enc.conv.", 0) == 0) conv_params.push_back(p);
  auto w = ad::constant(random_array(rng, {10, 4}));
  double err = max_grad_rel_err(conv_params, [&] {
    return ad::sum_all(ad::mul(conv_branch(params, cfg, features), w));
  });
  REQUIRE(err < 1e-4);
}

TEST_CASE("conv branch output is local to the receptive field") {
  EncoderConfig cfg = tiny_cfg();  // two k=3 layers: radius 2
  ad::ParamStore params;
  Rng rng(4);
  init_encoder_params(params, cfg, rng);
  Array base = random_array(rng, {cfg.f_bins, 12});
  auto out0 = conv_branch(params, cfg, base)->value.clone();
  Array poked = base.clone();
  poked.at(1, 11) += 5.0;  // far from frame 3
  auto out1 = conv_branch(params, cfg, poked)->value;
  for (std::size_t c = 0; c < cfg.conv_channels.back(); ++c) {
    REQUIRE(out1.cat(3, c) == out0.cat(3, c));
    REQUIRE(out1.cat(11, c) != out0.cat(11, c));
  }
}

TEST_CASE("transformer token count and degenerate patching") {
  EncoderConfig cfg = tiny_cfg();
  ad::ParamStore params;
  Rng rng(5);
  init_encoder_params(params, cfg, rng);
  auto tokens = transformer_tokens(params, cfg, random_array(rng, {cfg.f_bins, 8}));
  REQUIRE(tokens->value.shape() == Shape{(8 / cfg.time_stride) * cfg.n_bands, cfg.d_model});

  // padding: T=7 with stride 2 gives ceil(7/2)=4 steps
  auto padded = transformer_tokens(params, cfg, random_array(rng, {cfg.f_bins, 7}));
  REQUIRE(padded->value.dim(0) == 4 * cfg.n_bands);

  EncoderConfig flat = tiny_cfg();
  flat.n_bands = 1;
  flat.time_stride = 1;
  ad::ParamStore params2;
  Rng rng2(6);
  init_encoder_params(params2, flat, rng2);
  auto plain = transformer_tokens(params2, flat, random_array(rng2, {flat.f_bins, 5}));
  REQUIRE(plain->value.shape() == Shape{5, flat.d_model});
}

TEST_CASE("permuting frequency bands changes the token outputs") {
  EncoderConfig cfg = tiny_cfg();
  ad::ParamStore params;
  Rng rng(7);
  init_encoder_params(params, cfg, rng);
  Array feats = random_array(rng, {cfg.f_bins, 6});
  Array swapped({cfg.f_bins, 6});
  // swap the two bands (rows 0-1 with rows 2-3)
  for (std::size_t f = 0; f < cfg.f_bins; ++f)
    for (std::size_t t = 0; t < 6; ++t) swapped.at((f + 2) % 4, t) = feats.cat(f, t);
  auto a = transformer_tokens(params, cfg, feats);
  auto b = transformer_tokens(params, cfg, swapped);
  REQUIRE_FALSE(a->value.bit_equal(b->value));
}

TEST_CASE("freq attention pool degenerate cases") {
  EncoderConfig cfg = tiny_cfg();
  ad::ParamStore params;
  Rng rng(8);
  init_encoder_params(params, cfg, rng);

  // single band: output equals the value projection of the lone token
  auto tok = ad::constant(random_array(rng, {1, cfg.d_model}));
  auto pooled = freq_attention_pool(params, cfg, tok);
  auto projected = ad::matmul(tok, params.get("enc.pool.wv"));
  REQUIRE(pooled->value.bit_equal(projected->value));

  // identical tokens across bands: output equals that token's projection
  Array row = random_array(rng, {1, cfg.d_model});
  Array two({2, cfg.d_model});
  for (std::size_t c = 0; c < cfg.d_model; ++c) {
    two.at(0, c) = row.cat(0, c);
    two.at(1, c) = row.cat(0, c);
  }
  auto pooled2 = freq_attention_pool(params, cfg, ad::constant(two));
  auto projected2 = ad::matmul(ad::constant(row), params.get("enc.pool.wv"));
  for (std::size_t c = 0; c < cfg.d_model; ++c)
    REQUIRE(pooled2->value.cat(0, c) == Catch::Approx(projected2->value.cat(0, c)).margin(1e-12));
}

TEST_CASE("freq attention pool gradient check") {
  EncoderConfig cfg = tiny_cfg();
  ad::ParamStore params;
  Rng rng(9);
  init_encoder_params(params, cfg, rng);
  auto tok = ad::param(random_array(rng, {cfg.n_bands, cfg.d_model}));
  auto w = ad::constant(random_array(rng, {1, cfg.d_model}));
  std::vector<ad::Ptr> check = {tok, params.get("enc.pool.q"), params.get("enc.pool.wk"),
                                params.get("enc.pool.wv")};
  double err = max_grad_rel_err(check, [&] {
    return ad::sum_all(ad::mul(freq_attention_pool(params, cfg, tok), w));
  });
  REQUIRE(err < 1e-4);
}

TEST_CASE("encode merges branches and keeps the frame count") {
  EncoderConfig cfg = tiny_cfg();
  ad::ParamStore params;
  Rng rng(10);
  init_encoder_params(params, cfg, rng);
  for (std::size_t t : {4u, 7u, 12u}) {
    auto latent = encode(params, cfg, random_array(rng, {cfg.f_bins, t}));
    REQUIRE(latent->value.shape() == Shape{t, cfg.embed_dim});
    REQUIRE(latent->value.all_finite());
  }

  // zeroed projections produce a zero latent sequence
  for (const char* name : {"enc.proj_conv.w", "enc.proj_conv.b", "enc.proj_tf.w", "enc.proj_tf.b"})
    params.get(name)->value.fill(0.0);
  auto zero = encode(params, cfg, random_array(rng, {cfg.f_bins, 6}));
  for (std::size_t i = 0; i < zero->value.size(); ++i) REQUIRE(zero->value.cat(i) == 0.0);
}

TEST_CASE("encode is deterministic given parameters and input") {
  EncoderConfig cfg = tiny_cfg();
  ad::ParamStore params;
  Rng rng(11);
  init_encoder_params(params, cfg, rng);
  Array feats = random_array(rng, {cfg.f_bins, 9});
  REQUIRE(encode(params, cfg, feats)->value.bit_equal(encode(params, cfg, feats)->value));
}

TEST_CASE("end-to-end encoder gradient check on a tiny config") {
  EncoderConfig cfg = tiny_cfg();  // F=4, D=6
  ad::ParamStore params;
  Rng rng(12);
  init_encoder_params(params, cfg, rng);
  Array feats = random_array(rng, {cfg.f_bins, 8});
  auto w = ad::constant(random_array(rng, {8, cfg.embed_dim}));
  double err = max_grad_rel_err(all_params(params), [&] {
    return ad::sum_all(ad::mul(encode(params, cfg, feats), w));
  });
  REQUIRE(err < 1e-4);
}

TEST_CASE("no dead branch: every parameter receives gradient somewhere") {
  // residual output projections start at zero, so their upstream weights see
  // gradient only after the first update; train two steps before checking
  EncoderConfig cfg = tiny_cfg();
  ad::ParamStore params;
  Rng rng(13);
  init_encoder_params(params, cfg, rng);
  Array feats = random_array(rng, {cfg.f_bins, 8});
  auto w = ad::constant(random_array(rng, {8, cfg.embed_dim}));
  AdamW opt(params, {});
  std::vector<double> lr(params.size(), 1e-2);
  for (int step = 0; step < 2; ++step) {
    params.zero_grads();
    ad::backward(ad::sum_all(ad::mul(encode(params, cfg, feats), w)));
    opt.step(params, lr);
  }
  params.zero_grads();
  ad::backward(ad::sum_all(ad::mul(encode(params, cfg, feats), w)));
  for (const auto& [name, p] : params.items()) {
    double mx = 0.0;
    const Array& g = p->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) mx = std::max(mx, std::abs(g.cat(i)));
    INFO(name);
    REQUIRE(mx > 0.0);
  }
}

TEST_CASE("initial embeddings equal raw tokens in the degenerate config") {
  EncoderConfig flat = tiny_cfg();
  flat.n_bands = 1;
  flat.time_stride = 1;
  ad::ParamStore params;
  Rng rng(14);
  init_encoder_params(params, flat, rng);
  Array feats = random_array(rng, {flat.f_bins, 5});
  Array init = initial_embeddings(params, flat, feats);
  auto tokens = transformer_tokens(params, flat, feats);
  REQUIRE(init.bit_equal(tokens->value));
}

TEST_CASE("initial embeddings equal the brute-force band mean") {
  EncoderConfig cfg = tiny_cfg();
  ad::ParamStore params;
  Rng rng(15);
  init_encoder_params(params, cfg, rng);
  Array feats = random_array(rng, {cfg.f_bins, 8});
  Array init = initial_embeddings(params, cfg, feats);
  REQUIRE(init.shape() == Shape{8, cfg.d_model});

  auto tokens = transformer_tokens(params, cfg, feats)->value;
  std::size_t steps = tokens.dim(0) / cfg.n_bands;
  Array mean({steps, cfg.d_model});
  for (std::size_t s = 0; s < steps; ++s)
    for (std::size_t c = 0; c < cfg.d_model; ++c) {
      double acc = 0.0;
      for (std::size_t b = 0; b < cfg.n_bands; ++b) acc += tokens.cat(s * cfg.n_bands + b, c);
      mean.at(s, c) = acc / static_cast<double>(cfg.n_bands);
    }
  Array up = ad::upsample_linear_array(mean, cfg.time_stride);
  for (std::size_t i = 0; i < init.size(); ++i) REQUIRE(init.cat(i) == up.cat(i));
}
