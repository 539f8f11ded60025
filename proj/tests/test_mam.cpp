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
#include <cmath>

#include "pmam/mam.hpp"
#include "pmam/random.hpp"
#include "support/oracles.hpp"

using namespace pmam;
using namespace pmam::mam;
using pmam::testing::max_grad_rel_err;
using pmam::testing::random_array;

namespace {

// 2-D unit vector at a chosen cosine against [1, 0].
Array unit_at_cosine(double c) {
  return Array({1, 2}, {c, std::sqrt(std::max(0.0, 1.0 - c * c))});
}

}  // namespace

TEST_CASE("block mask saturation and bounds") {
  Rng rng(1);
  auto all = sample_block_mask(rng, 12, 1.0, 12);
  REQUIRE(all.count() == 12);

  for (int seed = 0; seed < 1000; ++seed) {
    Rng r(derive_seed(2, "mask", static_cast<std::uint64_t>(seed)));
    auto spec = sample_block_mask(r, 20, 0.75, 10);
    REQUIRE(spec.count() >= 15);
    REQUIRE(spec.count() <= 20);
    // union of block intervals: maximal runs reach block length unless
    // clipped at the sequence end
    std::size_t run = 0;
    for (std::size_t i = 0; i <= spec.indices.size(); ++i) {
      bool cont = i > 0 && i < spec.indices.size() && spec.indices[i] == spec.indices[i - 1] + 1;
      if (i > 0 && !cont) {
        bool at_end = spec.indices[i - 1] == 19;
        REQUIRE((run >= 10 || at_end));
        run = 0;
      }
      ++run;
    }
  }

  REQUIRE_THROWS_AS(sample_block_mask(rng, 20, 0.0, 10), ParameterError);
  REQUIRE_THROWS_AS(sample_block_mask(rng, 20, 1.5, 10), ParameterError);
  REQUIRE_THROWS_AS(sample_block_mask(rng, 20, 0.5, 0), ParameterError);
  REQUIRE_THROWS_AS(sample_block_mask(rng, 20, 0.5, 21), ParameterError);
}

TEST_CASE("mask statistics over many draws") {
  double total_fraction = 0.0;
  const int draws = 1000;
  for (int seed = 0; seed < draws; ++seed) {
    Rng r(derive_seed(3, "mask", static_cast<std::uint64_t>(seed)));
    auto spec = sample_block_mask(r, 200, 0.75, 10);
    double fraction = static_cast<double>(spec.count()) / 200.0;
    REQUIRE(fraction >= 0.75);
    REQUIRE(fraction <= 0.80);
  }
  for (int seed = 0; seed < draws; ++seed) {
    Rng r(derive_seed(3, "mask", static_cast<std::uint64_t>(seed)));
    total_fraction += static_cast<double>(sample_block_mask(r, 200, 0.75, 10).count()) / 200.0;
  }
  double mean_fraction = total_fraction / draws;
  REQUIRE(mean_fraction >= 0.75);
  REQUIRE(mean_fraction <= 0.75 + 10.0 / 200.0);
}

TEST_CASE("apply_mask identity, total replacement, and token gradient") {
  Rng rng(4);
  auto latent = ad::param(random_array(rng, {5, 3}));
  auto token = ad::param(random_array(rng, {3}));

  auto same = apply_mask(latent, MaskSpec{}, token);
  REQUIRE(same.get() == latent.get());

  auto full = apply_mask(latent, full_mask(5), token);
  for (std::size_t t = 0; t < 5; ++t)
    for (std::size_t c = 0; c < 3; ++c) REQUIRE(full->value.cat(t, c) == token->value.cat(c));

  latent->zero_grad();
  token->zero_grad();
  ad::backward(ad::sum_all(apply_mask(latent, MaskSpec{{1, 2}}, token)));
  double token_grad = 0.0;
  for (std::size_t c = 0; c < 3; ++c) token_grad += std::abs(token->grad.cat(c));
  REQUIRE(token_grad > 0.0);

  token->zero_grad();
  latent->zero_grad();
  ad::backward(ad::sum_all(apply_mask(latent, MaskSpec{}, token)));
  for (std::size_t c = 0; c < 3; ++c) REQUIRE(token->grad.cat(c) == 0.0);

  REQUIRE_THROWS_AS(apply_mask(latent, MaskSpec{{9}}, token), ContractError);
}

TEST_CASE("context network handles a single frame") {
  ContextConfig cfg;
  cfg.n_blocks = 2;
  cfg.n_heads = 2;
  cfg.rel_clip = 4;
  ad::ParamStore params;
  Rng rng(5);
  init_context_params(params, cfg, 8, rng);
  auto out = context_forward(params, cfg, ad::constant(random_array(rng, {1, 8})));
  REQUIRE(out->value.shape() == Shape{1, 8});
  REQUIRE(out->value.all_finite());
}

TEST_CASE("context network end-to-end gradient check") {
  ContextConfig cfg;
  cfg.n_blocks = 1;
  cfg.n_heads = 2;
  cfg.rel_clip = 3;
  ad::ParamStore params;
  Rng rng(6);
  init_context_params(params, cfg, 8, rng);
  auto latent = ad::param(random_array(rng, {6, 8}));
  auto w = ad::constant(random_array(rng, {6, 8}));
  std::vector<ad::Ptr> check = {latent};
  for (const auto& [name, p] : params.items()) check.push_back(p);
  double err = max_grad_rel_err(check, [&] {
    return ad::sum_all(ad::mul(predict(params, context_forward(params, cfg, latent)), w));
  });
  REQUIRE(err < 1e-4);
}

TEST_CASE("predictor is affine per frame") {
  ContextConfig cfg;
  ad::ParamStore params;
  Rng rng(7);
  init_context_params(params, cfg, 4, rng);
  params.get("mam.pred.w")->value.fill(0.0);
  params.get("mam.pred.b")->value.fill(0.0);
  auto out = predict(params, ad::constant(random_array(rng, {5, 4})));
  REQUIRE(out->value.shape() == Shape{5, 4});
  for (std::size_t i = 0; i < out->value.size(); ++i) REQUIRE(out->value.cat(i) == 0.0);
}

TEST_CASE("prototype-wise BCE point values") {
  MamLossConfig cfg;  // tau 0.1, slope 0.01

  SECTION("sim 0.5 with gamma 0.5 gives balanced BCE") {
    Array means({1, 2}, {1.0, 0.0});
    auto [loss, terms] = prototype_bce_loss(ad::constant(unit_at_cosine(0.5)), means,
                                            Array({1}, {0.5}), cfg);
    REQUIRE(loss->value.cat(0) == Catch::Approx(0.6931472).margin(1e-6));
  }

  SECTION("aligned prediction with gamma 1") {
    Array means({1, 2}, {1.0, 0.0});
    auto [loss, terms] = prototype_bce_loss(ad::constant(unit_at_cosine(1.0)), means,
                                            Array({1}, {1.0}), cfg);
    // p = sigmoid(10) = 0.9999546
    REQUIRE(loss->value.cat(0) == Catch::Approx(4.54e-5).epsilon(1e-3));
  }

  SECTION("orthogonal prediction with gamma 0") {
    Array means({1, 2}, {1.0, 0.0});
    auto [loss, terms] = prototype_bce_loss(ad::constant(unit_at_cosine(0.0)), means,
                                            Array({1}, {0.0}), cfg);
    // p = sigmoid(-10) = 4.5398e-5
    REQUIRE(loss->value.cat(0) == Catch::Approx(4.54e-5).epsilon(1e-3));
  }

  SECTION("gamma outside [0,1] is rejected") {
    Array means({1, 2}, {1.0, 0.0});
    REQUIRE_THROWS_AS(
        prototype_bce_loss(ad::constant(unit_at_cosine(0.3)), means, Array({1}, {1.5}), cfg),
        ContractError);
  }
}

TEST_CASE("BCE is monotone in similarity with saturated labels") {
  MamLossConfig cfg;
  Array means({1, 2}, {1.0, 0.0});
  double prev_pos = std::numeric_limits<double>::infinity();
  double prev_neg = -std::numeric_limits<double>::infinity();
  for (double sim = -1.0; sim <= 1.0 + 1e-12; sim += 0.05) {
    auto [pos, t1] = prototype_bce_loss(ad::constant(unit_at_cosine(sim)), means, Array({1}, {1.0}), cfg);
    auto [neg, t2] = prototype_bce_loss(ad::constant(unit_at_cosine(sim)), means, Array({1}, {0.0}), cfg);
    REQUIRE(pos->value.cat(0) < prev_pos);
    REQUIRE(neg->value.cat(0) > prev_neg);
    prev_pos = pos->value.cat(0);
    prev_neg = neg->value.cat(0);
  }
}

TEST_CASE("BCE term (t,k) is local to prototype k") {
  Rng rng(8);
  MamLossConfig cfg;
  auto preds = ad::constant(random_array(rng, {4, 6}));
  Array means = random_array(rng, {5, 6});
  Array gamma = random_array(rng, {4, 5}, 0.0, 1.0);
  auto base = prototype_bce_terms(preds, means, gamma, cfg)->value.clone();

  Array poked = means.clone();
  poked.at(2, 3) += 0.37;
  auto after = prototype_bce_terms(preds, poked, gamma, cfg)->value;
  for (std::size_t t = 0; t < 4; ++t)
    for (std::size_t k = 0; k < 5; ++k) {
      if (k == 2) {
        REQUIRE(after.cat(t, k) != base.cat(t, k));
      } else {
        REQUIRE(after.cat(t, k) == base.cat(t, k));  // bitwise
      }
    }
}

TEST_CASE("InfoNCE degenerate and closed-form cases") {
  MamLossConfig cfg;
  cfg.kind = MamLossConfig::Kind::InfoNce;

  SECTION("single prototype: loss is zero") {
    Array means({1, 2}, {1.0, 0.0});
    auto loss = info_nce_loss(ad::constant(unit_at_cosine(0.4)), means, Array({1}, {1.0}), cfg);
    REQUIRE(loss->value.cat(0) == Catch::Approx(0.0).margin(1e-12));
  }

  SECTION("equal similarities over four prototypes: log 4") {
    Array means({4, 2});
    for (int k = 0; k < 4; ++k) {
      means.at(k, 0) = 1.0;
      means.at(k, 1) = 0.0;
    }
    auto loss = info_nce_loss(ad::constant(unit_at_cosine(0.2)), means, Array({4}, {1, 0, 0, 0}), cfg);
    REQUIRE(loss->value.cat(0) == Catch::Approx(std::log(4.0)).margin(1e-9));
  }

  SECTION("similarities [1, 0] with tau 0.1") {
    Array means({2, 2}, {1.0, 0.0, 0.0, 1.0});
    // prediction aligned with prototype 0, orthogonal to prototype 1
    auto loss = info_nce_loss(ad::constant(Array({1, 2}, {1.0, 0.0})), means, Array({2}, {1, 0}), cfg);
    REQUIRE(loss->value.cat(0) == Catch::Approx(4.54e-5).epsilon(1e-3));
  }

  SECTION("argmax ties resolve to the lowest index") {
    Array means({2, 2}, {1.0, 0.0, 0.0, 1.0});
    Array gamma({1, 2}, {0.5, 0.5});
    auto terms = info_nce_terms(ad::constant(Array({1, 2}, {1.0, 0.0})), means, gamma, cfg);
    // positive 0: aligned -> small loss; had it picked index 1 the loss would be ~10
    REQUIRE(terms->value.cat(0) < 1e-3);
  }
}

TEST_CASE("cross-entropy rows are shift invariant") {
  Rng rng(9);
  auto logits = random_array(rng, {3, 5});
  Array shifted = logits.clone();
  for (std::size_t i = 0; i < shifted.size(); ++i) shifted.at(i) += 7.3;
  auto a = ad::cross_entropy_rows(ad::constant(logits), {1, 4, 0});
  auto b = ad::cross_entropy_rows(ad::constant(shifted), {1, 4, 0});
  for (std::size_t i = 0; i < 3; ++i)
    REQUIRE(a->value.cat(i) == Catch::Approx(b->value.cat(i)).margin(1e-9));
}

TEST_CASE("masked batch loss reaches the entropy lower bound at p = gamma") {
  MamLossConfig cfg;
  Array means({1, 2}, {1.0, 0.0});
  double gamma_v = 0.6;
  double sim_star = (cfg.tau * std::log(gamma_v / (1.0 - gamma_v)) + 1.0) / 2.0;
  auto preds = ad::constant(unit_at_cosine(sim_star));
  Array gamma({1, 1}, {gamma_v});
  auto piece = clip_loss_from_predictions(preds, MaskSpec{{0}}, gamma, means, cfg);
  double entropy = -gamma_v * std::log(gamma_v) - (1.0 - gamma_v) * std::log(1.0 - gamma_v);
  REQUIRE(piece.sum->value.cat(0) == Catch::Approx(entropy).margin(1e-9));
}

TEST_CASE("empty mask across the batch is rejected") {
  MamLossConfig cfg;
  Rng rng(10);
  Array means = random_array(rng, {3, 4});
  auto preds = ad::constant(random_array(rng, {5, 4}));
  Array gamma = random_array(rng, {5, 3}, 0.0, 1.0);
  auto piece = clip_loss_from_predictions(preds, MaskSpec{}, gamma, means, cfg);
  REQUIRE_THROWS_AS(combine_batch({piece, piece}), ContractError);
}

TEST_CASE("duplicating a clip doubles the unnormalized sum exactly") {
  MamLossConfig cfg;
  Rng rng(11);
  Array means = random_array(rng, {3, 4});
  auto preds = ad::constant(random_array(rng, {6, 4}));
  Array gamma = random_array(rng, {6, 3}, 0.0, 1.0);
  MaskSpec mask{{0, 2, 5}};
  auto piece = clip_loss_from_predictions(preds, mask, gamma, means, cfg);
  auto single = combine_batch({piece});
  auto doubled = combine_batch({piece, piece});
  REQUIRE(doubled.sum == 2.0 * single.sum);
  REQUIRE(doubled.mean->value.cat(0) == Catch::Approx(single.mean->value.cat(0)).margin(1e-15));
}

TEST_CASE("unmasked frames receive zero gradient through the predictor") {
  MamLossConfig cfg;
  Rng rng(12);
  Array means = random_array(rng, {3, 4});
  auto preds = ad::param(random_array(rng, {6, 4}));
  Array gamma = random_array(rng, {6, 3}, 0.0, 1.0);
  MaskSpec mask{{1, 4}};
  preds->zero_grad();
  auto piece = clip_loss_from_predictions(preds, mask, gamma, means, cfg);
  ad::backward(combine_batch({piece}).mean);
  for (std::size_t t = 0; t < 6; ++t) {
    bool masked = t == 1 || t == 4;
    double row = 0.0;
    for (std::size_t c = 0; c < 4; ++c) row += std::abs(preds->grad.cat(t, c));
    if (masked) {
      REQUIRE(row > 0.0);
    } else {
      REQUIRE(row == 0.0);
    }
  }
}

TEST_CASE("full pretrain clip loss builds, is finite, and honors the no-mask ablation") {
  enc::EncoderConfig ecfg;
  ecfg.f_bins = 4;
  ecfg.conv_channels = {4, 4};
  ecfg.d_model = 6;
  ecfg.embed_dim = 6;
  ecfg.n_blocks = 1;
  ecfg.n_heads = 2;
  ecfg.n_bands = 2;
  ecfg.time_stride = 2;
  ContextConfig ccfg;
  ccfg.n_blocks = 1;
  ccfg.n_heads = 2;
  ccfg.rel_clip = 4;
  MamLossConfig lcfg;

  ad::ParamStore params;
  Rng rng(13);
  enc::init_encoder_params(params, ecfg, rng);
  init_context_params(params, ccfg, ecfg.embed_dim, rng);

  Array features = random_array(rng, {4, 10});
  Array means = random_array(rng, {3, 6});
  Array gamma = random_array(rng, {10, 3}, 0.0, 1.0);

  Rng mask_rng(14);
  auto mask = sample_block_mask(mask_rng, 10, 0.5, 3);
  auto piece = clip_pretrain_loss(params, ecfg, ccfg, lcfg, features, mask, gamma, means, true);
  auto batch = combine_batch({piece});
  REQUIRE(std::isfinite(batch.sum));
  REQUIRE(batch.masked_frames == mask.count());
  REQUIRE(batch.n_terms == mask.count() * 3);

  // ablation: no token replacement, every frame contributes
  auto all = full_mask(10);
  auto piece2 = clip_pretrain_loss(params, ecfg, ccfg, lcfg, features, all, gamma, means, false);
  REQUIRE(piece2.n_terms == 10 * 3);

  // mask token receives gradient only in the masked variant
  params.zero_grads();
  ad::backward(combine_batch({piece}).mean);
  double tok_grad = 0.0;
  const auto& tok = params.get("mam.mask_token");
  for (std::size_t c = 0; c < 6; ++c) tok_grad += std::abs(tok->ensure_grad().cat(c));
  REQUIRE(tok_grad > 0.0);

  params.zero_grads();
  ad::backward(combine_batch({piece2}).mean);
  double tok_grad2 = 0.0;
  for (std::size_t c = 0; c < 6; ++c) tok_grad2 += std::abs(tok->ensure_grad().cat(c));
  REQUIRE(tok_grad2 == 0.0);
}
